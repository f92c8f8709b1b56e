//! Cross-run comparison: loads finished run directories, prints a
//! plain-text summary with rankings, and optionally writes a combined
//! per-round CSV for external plotting.
//!
//! Run files that are missing or unreadable surface as I/O errors
//! naming the offending path, so a typo in a directory argument fails
//! loudly instead of ranking a partial set.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use fedsim::{Error, Result};

use crate::config;
use crate::runner::{self, fmt_metric, pathed, RoundRow, Totals, METRICS_HEADER};

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub name: String,
    pub framework: String,
    pub rounds: usize,
    pub n_seeds: usize,
    pub final_accuracy: f64,
    pub totals: Totals,
    /// Seed-averaged rows, one per round including round 0.
    pub mean_rows: Vec<RoundRow>,
}

fn corrupt(path: &Path, detail: impl std::fmt::Display) -> Error {
    Error::Io(io::Error::new(
        io::ErrorKind::InvalidData,
        format!("{}: {detail}", path.display()),
    ))
}

fn parse_field(path: &Path, line_no: usize, tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| corrupt(path, format!("line {line_no}: bad number `{tok}`")))
}

/// Reads one run directory written by `run` (or one sweep subdirectory).
pub fn load_run(dir: &Path) -> Result<RunSummary> {
    let cfg_path = dir.join("config.resolved");
    let cfg_text = fs::read_to_string(&cfg_path).map_err(|e| pathed(&cfg_path, e))?;
    let cfg = config::parse_config(&cfg_text).map_err(|e| corrupt(&cfg_path, e))?;

    let metrics_path = dir.join("metrics.csv");
    let csv = fs::read_to_string(&metrics_path).map_err(|e| pathed(&metrics_path, e))?;
    let mut lines = csv.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == METRICS_HEADER => {}
        other => {
            return Err(corrupt(
                &metrics_path,
                format!("unexpected header `{}`", other.map(|(_, h)| h).unwrap_or("")),
            ))
        }
    }

    let mut mean_rows = Vec::new();
    let mut seeds = std::collections::BTreeSet::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(corrupt(
                &metrics_path,
                format!("line {line_no}: expected 7 fields, got {}", f.len()),
            ));
        }
        let row = RoundRow {
            round: f[0]
                .parse()
                .map_err(|_| corrupt(&metrics_path, format!("line {line_no}: bad round `{}`", f[0])))?,
            accuracy: parse_field(&metrics_path, line_no, f[2])?,
            up_bytes_per_client: parse_field(&metrics_path, line_no, f[3])?,
            down_bytes_per_client: parse_field(&metrics_path, line_no, f[4])?,
            client_flops: parse_field(&metrics_path, line_no, f[5])?,
            server_flops: parse_field(&metrics_path, line_no, f[6])?,
        };
        if f[1] == "mean" {
            mean_rows.push(row);
        } else {
            seeds.insert(f[1].to_string());
        }
    }
    if mean_rows.is_empty() {
        return Err(corrupt(&metrics_path, "no mean rows"));
    }

    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunSummary {
        name,
        framework: cfg.framework.name().to_string(),
        rounds: mean_rows.last().expect("nonempty").round,
        n_seeds: seeds.len(),
        final_accuracy: mean_rows.last().expect("nonempty").accuracy,
        totals: runner::totals(&mean_rows),
        mean_rows,
    })
}

fn ranking(out: &mut String, title: &str, runs: &[RunSummary], key: impl Fn(&RunSummary) -> f64) {
    let mut order: Vec<&RunSummary> = runs.iter().collect();
    order.sort_by(|a, b| key(b).partial_cmp(&key(a)).expect("metrics are finite"));
    let _ = writeln!(out, "{title} (highest first):");
    for (i, r) in order.iter().enumerate() {
        let _ = writeln!(out, "  {}. {} ({}): {}", i + 1, r.name, r.framework, fmt_metric(key(r)));
    }
}

/// Renders the comparison text: one block per run, plus rankings when
/// more than one run is present.
pub fn render_text(runs: &[RunSummary]) -> String {
    let mut out = String::new();
    for r in runs {
        let _ = writeln!(out, "run {}:", r.name);
        let _ = writeln!(out, "  framework: {}", r.framework);
        let _ = writeln!(out, "  rounds: {}", r.rounds);
        let _ = writeln!(out, "  seeds: {}", r.n_seeds);
        let _ = writeln!(out, "  final mean accuracy: {}", fmt_metric(r.final_accuracy));
        let _ = writeln!(
            out,
            "  total communication per client: {} bytes (up {}, down {})",
            fmt_metric(r.totals.comm_per_client()),
            fmt_metric(r.totals.up_bytes_per_client),
            fmt_metric(r.totals.down_bytes_per_client),
        );
        let _ = writeln!(out, "  total client flops: {}", fmt_metric(r.totals.client_flops));
        let _ = writeln!(out, "  total server flops: {}", fmt_metric(r.totals.server_flops));
        let _ = writeln!(out);
    }
    if runs.len() > 1 {
        ranking(&mut out, "ranking by final accuracy", runs, |r| r.final_accuracy);
        ranking(&mut out, "ranking by total communication per client", runs, |r| {
            r.totals.comm_per_client()
        });
        ranking(&mut out, "ranking by total client flops", runs, |r| r.totals.client_flops);
    }
    out
}

/// Combined per-round mean series, one block per run, for plotting.
pub fn combined_csv(runs: &[RunSummary]) -> String {
    let mut out = String::from(
        "run,framework,round,accuracy,up_bytes_per_client,down_bytes_per_client,client_flops,server_flops\n",
    );
    for r in runs {
        for row in &r.mean_rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.name,
                r.framework,
                row.round,
                fmt_metric(row.accuracy),
                fmt_metric(row.up_bytes_per_client),
                fmt_metric(row.down_bytes_per_client),
                fmt_metric(row.client_flops),
                fmt_metric(row.server_flops),
            );
        }
    }
    out
}

/// Loads every directory, writes the optional CSV, and returns the text
/// summary for stdout.
pub fn report(dirs: &[impl AsRef<Path>], csv_out: Option<&Path>) -> Result<String> {
    if dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut runs = Vec::with_capacity(dirs.len());
    for dir in dirs {
        runs.push(load_run(dir.as_ref())?);
    }
    if let Some(path) = csv_out {
        fs::write(path, combined_csv(&runs)).map_err(|e| pathed(path, e))?;
    }
    Ok(render_text(&runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::{run, write_run};

    fn tiny_run(framework: &str, dir: &Path) {
        let text = format!(
            "framework = {framework}\nrounds = 1\ndata.n = 600\nkd.public_size = 100\nsplit.samples_per_round = 64\nseeds = 0\narch.dims = 32,16,10\nlora.rank = 2\n"
        );
        let cfg = config::parse_config(&text).unwrap();
        let report = run(&cfg).unwrap();
        write_run(&cfg, &report, dir).unwrap();
    }

    #[test]
    fn report_roundtrips_run_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("fed-tiny");
        tiny_run("fed", &dir);

        let summary = load_run(&dir).unwrap();
        assert_eq!(summary.framework, "fed");
        assert_eq!(summary.rounds, 1);
        assert_eq!(summary.n_seeds, 1);
        assert_eq!(summary.mean_rows.len(), 2);

        let text = report(&[&dir], None).unwrap();
        assert!(text.contains("run fed-tiny:"), "{text}");
        assert!(!text.contains("ranking"), "single run must not rank:\n{text}");
    }

    #[test]
    fn rankings_follow_the_metrics() {
        let tmp = tempfile::tempdir().unwrap();
        let fed = tmp.path().join("fed");
        let kd = tmp.path().join("kd");
        let split = tmp.path().join("split");
        tiny_run("fed", &fed);
        tiny_run("kd", &kd);
        tiny_run("split", &split);

        let runs: Vec<RunSummary> =
            [&fed, &kd, &split].iter().map(|d| load_run(d).unwrap()).collect();
        let text = render_text(&runs);

        let comm_at = |name: &str| {
            runs.iter().find(|r| r.name == name).unwrap().totals.comm_per_client()
        };
        assert!(comm_at("split") > comm_at("kd"));
        assert!(comm_at("kd") > comm_at("fed"));

        let comm_section = text
            .split("ranking by total communication per client")
            .nth(1)
            .expect("comm ranking present");
        let first = comm_section.lines().nth(1).unwrap();
        assert!(first.contains("split"), "expected split first, got {first}");

        let flops_section = text.split("ranking by total client flops").nth(1).unwrap();
        let first = flops_section.lines().nth(1).unwrap();
        assert!(first.contains("kd"), "expected kd first, got {first}");
    }

    #[test]
    fn missing_files_name_the_path() {
        let tmp = tempfile::tempdir().unwrap();
        let ghost = tmp.path().join("no-such-run");
        let err = report(&[&ghost], None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("no-such-run"), "{msg}");
        assert!(matches!(err, Error::Io(_)), "{err:?}");
    }

    #[test]
    fn corrupt_metrics_are_io_errors_naming_the_path() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("bad");
        tiny_run("fed", &dir);
        fs::write(dir.join("metrics.csv"), "round,seed\n0,0\n").unwrap();
        let err = load_run(&dir).unwrap_err();
        assert!(matches!(err, Error::Io(_)), "{err:?}");
        assert!(err.to_string().contains("metrics.csv"), "{err}");
    }

    #[test]
    fn combined_csv_carries_one_block_per_run() {
        let tmp = tempfile::tempdir().unwrap();
        let fed = tmp.path().join("fed");
        let kd = tmp.path().join("kd");
        tiny_run("fed", &fed);
        tiny_run("kd", &kd);
        let csv_path = tmp.path().join("series.csv");
        report(&[&fed, &kd], Some(&csv_path)).unwrap();
        let text = fs::read_to_string(&csv_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // header + 2 runs x (round 0 + round 1)
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("fed,fed,0,"));
        assert!(lines[3].starts_with("kd,kd,0,"));
    }

    #[test]
    fn kd_flops_exceed_fed_exceed_split_in_tiny_runs() {
        let tmp = tempfile::tempdir().unwrap();
        let fed = tmp.path().join("fed");
        let kd = tmp.path().join("kd");
        let split = tmp.path().join("split");
        tiny_run("fed", &fed);
        tiny_run("kd", &kd);
        tiny_run("split", &split);
        let runs: Vec<RunSummary> =
            [&fed, &kd, &split].iter().map(|d| load_run(d).unwrap()).collect();
        let flops_at =
            |name: &str| runs.iter().find(|r| r.name == name).unwrap().totals.client_flops;
        assert!(flops_at("kd") > flops_at("fed"));
        assert!(flops_at("fed") > flops_at("split"));
    }
}
