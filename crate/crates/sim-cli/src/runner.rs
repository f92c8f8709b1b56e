//! Per-seed simulation loop, metrics tables, and run output files.
//!
//! A run executes every seed sequentially, records one metrics row per
//! round (plus a round-0 row before any training), then appends the
//! arithmetic mean across seeds as `seed = mean` rows. Byte and FLOP
//! columns are per-client averages; evaluation is never billed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fedsim::accounting::CostModelParams;
use fedsim::data::{self, Dataset, PartitionSpec};
use fedsim::model::{init_model, LayeredNet};
use fedsim::protocols::{
    fed_round, kd_round, split_round, ClientState, FedServer, KdServer, SplitServer,
};
use fedsim::{Error, Result};

use crate::config::{self, DataSource, Framework, SimConfig, KNOWN_KEYS, LIST_KEYS};

pub const METRICS_HEADER: &str =
    "round,seed,accuracy,up_bytes_per_client,down_bytes_per_client,client_flops,server_flops";

/// One metrics row. Counters are f64 so seed averages share the type;
/// integral values print without a fractional part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundRow {
    pub round: usize,
    pub accuracy: f64,
    pub up_bytes_per_client: f64,
    pub down_bytes_per_client: f64,
    pub client_flops: f64,
    pub server_flops: f64,
}

#[derive(Debug, Clone)]
pub struct SeedSeries {
    pub seed: u64,
    pub rows: Vec<RoundRow>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub per_seed: Vec<SeedSeries>,
    /// Arithmetic mean across seeds, row by row.
    pub mean: Vec<RoundRow>,
}

/// Column sums of a row series, used by summaries and rankings.
#[derive(Debug, Clone, Copy, Default)]
pub struct Totals {
    pub up_bytes_per_client: f64,
    pub down_bytes_per_client: f64,
    pub client_flops: f64,
    pub server_flops: f64,
}

impl Totals {
    pub fn comm_per_client(&self) -> f64 {
        self.up_bytes_per_client + self.down_bytes_per_client
    }
}

pub fn totals(rows: &[RoundRow]) -> Totals {
    let mut t = Totals::default();
    for r in rows {
        t.up_bytes_per_client += r.up_bytes_per_client;
        t.down_bytes_per_client += r.down_bytes_per_client;
        t.client_flops += r.client_flops;
        t.server_flops += r.server_flops;
    }
    t
}

/// Index of the greatest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows whose argmax logit matches the label. Runs the
/// model in eval mode (no dropout) and bills nothing.
pub fn evaluate(model: &LayeredNet, test: &Dataset) -> Result<f64> {
    if test.n() == 0 {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let layers = model.arch().layers();
    let (logits, _) = model.forward_range(test.x(), 0, layers, false, None)?;
    let correct = test
        .labels()
        .iter()
        .enumerate()
        .filter(|&(i, &label)| argmax(logits.row(i)) == label)
        .count();
    Ok(correct as f64 / test.n() as f64)
}

fn build_data(cfg: &SimConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match cfg.data_source {
        DataSource::Synthetic => data::synth_classification(
            cfg.data_n,
            cfg.data_features,
            cfg.data_classes,
            cfg.data_separation,
            seed,
        ),
        DataSource::Csv => {
            let path = cfg.csv_path.as_ref().expect("validated at build");
            let ds = data::load_csv(path)?;
            let arch = cfg.arch();
            if ds.features() != arch.d_in(1) {
                return Err(Error::Config(format!(
                    "data.csv_path: {} features do not match arch.dims[0] = {}",
                    ds.features(),
                    arch.d_in(1)
                )));
            }
            if ds.n_classes() != arch.n_classes() {
                return Err(Error::Config(format!(
                    "data.csv_path: {} classes do not match the last arch dim {}",
                    ds.n_classes(),
                    arch.n_classes()
                )));
            }
            data::holdout_split(&ds, seed)
        }
    }
}

enum Engine {
    Fed(FedServer),
    Kd(KdServer),
    Split(SplitServer),
}

impl Engine {
    fn global_model(&self) -> &LayeredNet {
        match self {
            Engine::Fed(s) => &s.model,
            Engine::Kd(s) => &s.model,
            Engine::Split(s) => &s.model,
        }
    }
}

fn run_seed(cfg: &SimConfig, seed: u64) -> Result<SeedSeries> {
    let (pool, test) = build_data(cfg, seed)?;
    // The public extraction happens for every framework so the private
    // pools (and hence shard contents) match across fed, kd, and split.
    let (public, private) = data::split_public(&pool, cfg.kd_public_size, seed)?;
    let shards = data::partition_clients(
        &private,
        &PartitionSpec {
            n_clients: cfg.n_clients,
            strategy: cfg.partition,
            seed,
        },
    )?;

    let arch = cfg.arch();
    let lora = cfg.lora_config();
    let model = init_model(&arch, &lora, seed)?;
    let price = CostModelParams {
        bytes_per_scalar: cfg.bytes_per_scalar,
    };

    let trainable_len = match cfg.framework {
        Framework::Fed | Framework::Kd => model.manifest().scalar_len(),
        Framework::Split => model.manifest_range(1, cfg.split_point).scalar_len(),
    };
    let mut clients: Vec<ClientState> = shards
        .into_iter()
        .enumerate()
        .map(|(id, shard)| ClientState::new(id, model.clone(), shard, trainable_len, seed))
        .collect();

    let mut engine = match cfg.framework {
        Framework::Fed => Engine::Fed(FedServer::new(model)),
        Framework::Kd => Engine::Kd(KdServer::new(model, public, seed)),
        Framework::Split => Engine::Split(SplitServer::new(model, cfg.split_point, seed)?),
    };

    let mut rows = Vec::with_capacity(cfg.rounds + 1);
    rows.push(RoundRow {
        round: 0,
        accuracy: evaluate(engine.global_model(), &test)?,
        up_bytes_per_client: 0.0,
        down_bytes_per_client: 0.0,
        client_flops: 0.0,
        server_flops: 0.0,
    });

    let kd_cfg = cfg.kd_config();
    let split_cfg = cfg.split_config();
    for round in 1..=cfg.rounds {
        let outcome = match &mut engine {
            Engine::Fed(server) => fed_round(
                server,
                &mut clients,
                cfg.local_epochs,
                cfg.batch_size,
                &cfg.optim,
                &price,
            )?,
            Engine::Kd(server) => kd_round(
                server,
                &mut clients,
                &kd_cfg,
                cfg.local_epochs,
                cfg.batch_size,
                &cfg.optim,
                &price,
            )?,
            Engine::Split(server) => {
                split_round(server, &mut clients, &split_cfg, &cfg.optim, &price)?
            }
        };
        let k = clients.len() as f64;
        let up: u64 = outcome.costs.clients.iter().map(|c| c.uplink_bytes).sum();
        let down: u64 = outcome.costs.clients.iter().map(|c| c.downlink_bytes).sum();
        let flops: u64 = outcome.costs.clients.iter().map(|c| c.flops).sum();
        rows.push(RoundRow {
            round,
            accuracy: evaluate(engine.global_model(), &test)?,
            up_bytes_per_client: up as f64 / k,
            down_bytes_per_client: down as f64 / k,
            client_flops: flops as f64 / k,
            server_flops: outcome.costs.server.flops as f64,
        });
    }
    Ok(SeedSeries { seed, rows })
}

fn mean_series(per_seed: &[SeedSeries]) -> Vec<RoundRow> {
    let n = per_seed.len() as f64;
    let rounds = per_seed[0].rows.len();
    (0..rounds)
        .map(|i| {
            let mut acc = RoundRow {
                round: per_seed[0].rows[i].round,
                accuracy: 0.0,
                up_bytes_per_client: 0.0,
                down_bytes_per_client: 0.0,
                client_flops: 0.0,
                server_flops: 0.0,
            };
            for s in per_seed {
                let r = &s.rows[i];
                acc.accuracy += r.accuracy;
                acc.up_bytes_per_client += r.up_bytes_per_client;
                acc.down_bytes_per_client += r.down_bytes_per_client;
                acc.client_flops += r.client_flops;
                acc.server_flops += r.server_flops;
            }
            acc.accuracy /= n;
            acc.up_bytes_per_client /= n;
            acc.down_bytes_per_client /= n;
            acc.client_flops /= n;
            acc.server_flops /= n;
            acc
        })
        .collect()
}

/// Executes every seed and averages the series.
pub fn run(cfg: &SimConfig) -> Result<RunReport> {
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        per_seed.push(run_seed(cfg, seed)?);
    }
    let mean = mean_series(&per_seed);
    Ok(RunReport { per_seed, mean })
}

/// Shortest-round-trip float formatting, with integral values printed
/// as plain integers so byte counters read naturally.
pub fn fmt_metric(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 9.007_199_254_740_992e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:?}")
    }
}

fn push_row(out: &mut String, row: &RoundRow, seed: &str) {
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{}",
        row.round,
        seed,
        fmt_metric(row.accuracy),
        fmt_metric(row.up_bytes_per_client),
        fmt_metric(row.down_bytes_per_client),
        fmt_metric(row.client_flops),
        fmt_metric(row.server_flops),
    );
}

pub fn metrics_csv(report: &RunReport) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for series in &report.per_seed {
        let seed = series.seed.to_string();
        for row in &series.rows {
            push_row(&mut out, row, &seed);
        }
    }
    for row in &report.mean {
        push_row(&mut out, row, "mean");
    }
    out
}

pub fn summary_text(cfg: &SimConfig, report: &RunReport) -> String {
    let t = totals(&report.mean);
    let final_acc = report.mean.last().expect("round-0 row always present").accuracy;
    let seeds: Vec<String> = cfg.seeds.iter().map(|s| s.to_string()).collect();
    let mut out = String::new();
    let _ = writeln!(out, "framework: {}", cfg.framework.name());
    let _ = writeln!(out, "rounds: {}", cfg.rounds);
    let _ = writeln!(out, "seeds: {}", seeds.join(","));
    let _ = writeln!(out, "clients: {}", cfg.n_clients);
    let _ = writeln!(
        out,
        "arch: {}",
        cfg.arch_dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
    );
    let _ = writeln!(out, "final mean accuracy: {}", fmt_metric(final_acc));
    let _ = writeln!(out, "total up bytes per client: {}", fmt_metric(t.up_bytes_per_client));
    let _ = writeln!(out, "total down bytes per client: {}", fmt_metric(t.down_bytes_per_client));
    let _ = writeln!(out, "total client flops: {}", fmt_metric(t.client_flops));
    let _ = writeln!(out, "total server flops: {}", fmt_metric(t.server_flops));
    out
}

/// Wraps an I/O error with the path it concerns.
pub fn pathed(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| pathed(path, e))
}

/// Writes `config.resolved`, `metrics.csv`, and `summary.txt`.
pub fn write_run(cfg: &SimConfig, report: &RunReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| pathed(out_dir, e))?;
    write_file(&out_dir.join("config.resolved"), &cfg.resolved_text())?;
    write_file(&out_dir.join("metrics.csv"), &metrics_csv(report))?;
    write_file(&out_dir.join("summary.txt"), &summary_text(cfg, report))?;
    Ok(())
}

/// Runs the base config once per value of `param`, each run in its own
/// `param=value` subdirectory, and writes a combined `sweep.csv`.
pub fn sweep(
    raw: &BTreeMap<String, String>,
    param: &str,
    values: &[String],
    out_root: &Path,
) -> Result<()> {
    if !KNOWN_KEYS.contains(&param) {
        return Err(Error::Config(format!("sweep parameter `{param}` is not a config key")));
    }
    if LIST_KEYS.contains(&param) {
        return Err(Error::Config(format!(
            "`{param}` holds a comma-separated list and cannot be swept"
        )));
    }
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }

    let mut combined = String::from(
        "value,final_accuracy,total_up_bytes_per_client,total_down_bytes_per_client,total_client_flops,total_server_flops\n",
    );
    for value in values {
        let mut map = raw.clone();
        map.insert(param.to_string(), value.clone());
        let cfg = config::build(&map)?;
        let report = run(&cfg)?;
        write_run(&cfg, &report, &out_root.join(format!("{param}={value}")))?;

        let t = totals(&report.mean);
        let final_acc = report.mean.last().expect("round-0 row").accuracy;
        let _ = writeln!(
            combined,
            "{},{},{},{},{},{}",
            value,
            fmt_metric(final_acc),
            fmt_metric(t.up_bytes_per_client),
            fmt_metric(t.down_bytes_per_client),
            fmt_metric(t.client_flops),
            fmt_metric(t.server_flops),
        );
    }
    write_file(&out_root.join("sweep.csv"), &combined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedsim::model::{Arch, LoraConfig};
    use fedsim::tensor::Matrix;

    #[test]
    fn argmax_prefers_the_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[-1.0, -3.0]), 0);
    }

    #[test]
    fn evaluate_ties_break_to_the_lowest_class() {
        // Zero inputs through a zero-bias stack give all-zero logits,
        // which must tie-break to class 0 for every row.
        let arch = Arch::new(vec![3, 5, 4]).unwrap();
        let lora = LoraConfig::all_layers(&arch, 2);
        let model = init_model(&arch, &lora, 0).unwrap();

        let ds = Dataset::new(Matrix::zeros(6, 3), vec![0; 6], 4).unwrap();
        assert_eq!(evaluate(&model, &ds).unwrap(), 1.0);

        let ds1 = Dataset::new(Matrix::zeros(6, 3), vec![1; 6], 4).unwrap();
        assert_eq!(evaluate(&model, &ds1).unwrap(), 0.0);
    }

    #[test]
    fn fresh_model_scores_near_chance_on_balanced_classes() {
        let cfg = config::parse_config(
            "framework = fed\nrounds = 0\ndata.n = 2000\nkd.public_size = 200\nseeds = 0\n",
        )
        .unwrap();
        let report = run(&cfg).unwrap();
        let acc = report.mean[0].accuracy;
        assert!((0.02..=0.25).contains(&acc), "round-0 accuracy {acc}");
    }

    #[test]
    fn mean_rows_average_the_seed_rows() {
        let mk = |seed, acc, up| SeedSeries {
            seed,
            rows: vec![RoundRow {
                round: 0,
                accuracy: acc,
                up_bytes_per_client: up,
                down_bytes_per_client: 2.0 * up,
                client_flops: 10.0,
                server_flops: 4.0,
            }],
        };
        let mean = mean_series(&[mk(0, 0.5, 8.0), mk(1, 0.7, 16.0)]);
        assert_eq!(mean.len(), 1);
        assert!((mean[0].accuracy - 0.6).abs() < 1e-15);
        assert_eq!(mean[0].up_bytes_per_client, 12.0);
        assert_eq!(mean[0].down_bytes_per_client, 24.0);
    }

    #[test]
    fn metric_formatting_keeps_integers_plain() {
        assert_eq!(fmt_metric(3545600.0), "3545600");
        assert_eq!(fmt_metric(0.0), "0");
        assert_eq!(fmt_metric(1.0 / 3.0), "0.3333333333333333");
        assert_eq!(fmt_metric(0.8736), "0.8736");
    }

    #[test]
    fn rounds_zero_yields_only_the_baseline_row() {
        let cfg = config::parse_config(
            "framework = split\nrounds = 0\ndata.n = 600\nkd.public_size = 100\nsplit.samples_per_round = 64\nseeds = 0,1\n",
        )
        .unwrap();
        let report = run(&cfg).unwrap();
        assert_eq!(report.per_seed.len(), 2);
        for s in &report.per_seed {
            assert_eq!(s.rows.len(), 1);
            assert_eq!(s.rows[0].round, 0);
            assert_eq!(s.rows[0].up_bytes_per_client, 0.0);
        }
        let csv = metrics_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 2 + 1);
        assert_eq!(lines[0], METRICS_HEADER);
        assert!(lines[1].starts_with("0,0,"));
        assert!(lines[2].starts_with("0,1,"));
        assert!(lines[3].starts_with("0,mean,"));
    }

    #[test]
    fn seed_mean_rows_match_recomputed_averages() {
        let cfg = config::parse_config(
            "framework = fed\nrounds = 2\ndata.n = 600\nkd.public_size = 100\nseeds = 0,1,42\narch.dims = 32,16,10\nlora.rank = 2\n",
        )
        .unwrap();
        let report = run(&cfg).unwrap();
        for (i, mean_row) in report.mean.iter().enumerate() {
            let n = report.per_seed.len() as f64;
            let acc: f64 = report.per_seed.iter().map(|s| s.rows[i].accuracy).sum::<f64>() / n;
            let up: f64 =
                report.per_seed.iter().map(|s| s.rows[i].up_bytes_per_client).sum::<f64>() / n;
            assert!((mean_row.accuracy - acc).abs() <= 1e-12);
            assert!((mean_row.up_bytes_per_client - up).abs() <= 1e-12);
        }
    }
}
