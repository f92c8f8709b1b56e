//! Flat `key = value` configuration with dotted section prefixes.
//!
//! Every key has a default except `framework`; unknown or duplicate
//! keys are errors so typos surface instead of silently running the
//! default. `#` starts a comment anywhere on a line. Validation names
//! the offending key and happens entirely before any simulation work.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use fedsim::data::PartitionStrategy;
use fedsim::model::{Arch, LoraConfig};
use fedsim::optim::AdamParams;
use fedsim::protocols::{KdConfig, SplitConfig};
use fedsim::{Error, Result};

pub const KNOWN_KEYS: &[&str] = &[
    "framework",
    "rounds",
    "local_epochs",
    "batch_size",
    "n_clients",
    "seeds",
    "arch.dims",
    "lora.rank",
    "lora.alpha",
    "lora.dropout",
    "lora.adapted_layers",
    "optim.lr",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "data.source",
    "data.n",
    "data.features",
    "data.classes",
    "data.separation",
    "data.csv_path",
    "partition.strategy",
    "partition.beta",
    "kd.public_size",
    "kd.temperature",
    "kd.lambda",
    "kd.server_epochs",
    "kd.client_epochs",
    "split.point",
    "split.samples_per_round",
    "cost.bytes_per_scalar",
];

/// Keys whose values are comma-separated lists. A sweep assigns one
/// comma-separated token per run, so these cannot be swept.
pub const LIST_KEYS: &[&str] = &["seeds", "arch.dims", "lora.adapted_layers"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Framework {
    Fed,
    Kd,
    Split,
}

impl Framework {
    pub fn name(self) -> &'static str {
        match self {
            Framework::Fed => "fed",
            Framework::Kd => "kd",
            Framework::Split => "split",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Csv,
}

/// Fully resolved simulation settings.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub framework: Framework,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub n_clients: usize,
    pub seeds: Vec<u64>,
    pub arch_dims: Vec<usize>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    /// `None` means every layer carries an adapter.
    pub adapted_layers: Option<Vec<usize>>,
    pub optim: AdamParams,
    pub data_source: DataSource,
    pub data_n: usize,
    pub data_features: usize,
    pub data_classes: usize,
    pub data_separation: f64,
    pub csv_path: Option<PathBuf>,
    pub partition: PartitionStrategy,
    pub kd_public_size: usize,
    pub kd_temperature: f64,
    pub kd_lambda: f64,
    pub kd_server_epochs: usize,
    pub kd_client_epochs: usize,
    pub split_point: usize,
    pub split_samples_per_round: usize,
    pub bytes_per_scalar: u64,
}

/// Splits config text into a key/value map, rejecting malformed lines,
/// unknown keys, and duplicates. Values keep their raw string form.
pub fn parse_raw(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {lineno}: expected `key = value`, got `{line}`"
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("line {lineno}: unknown key `{key}`")));
        }
        if value.is_empty() {
            return Err(Error::Config(format!("line {lineno}: `{key}` has an empty value")));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Config(format!("line {lineno}: duplicate key `{key}`")));
        }
    }
    Ok(map)
}

fn parse_as<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}` as {what}")))
}

fn scalar<T: FromStr>(map: &BTreeMap<String, String>, key: &str, default: T, what: &str) -> Result<T> {
    match map.get(key) {
        Some(v) => parse_as(key, v, what),
        None => Ok(default),
    }
}

fn int_list<T: FromStr>(key: &str, value: &str, what: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|tok| parse_as(key, tok.trim(), what))
        .collect()
}

/// Resolves a raw map into a validated [`SimConfig`].
pub fn build(map: &BTreeMap<String, String>) -> Result<SimConfig> {
    let framework = match map.get("framework").map(String::as_str) {
        Some("fed") => Framework::Fed,
        Some("kd") => Framework::Kd,
        Some("split") => Framework::Split,
        Some(other) => {
            return Err(Error::Config(format!(
                "framework: expected fed, kd, or split, got `{other}`"
            )))
        }
        None => return Err(Error::Config("framework: missing (fed, kd, or split)".into())),
    };

    let seeds: Vec<u64> = match map.get("seeds") {
        Some(v) => int_list("seeds", v, "an integer seed")?,
        None => vec![0, 1, 42],
    };
    if seeds.is_empty() {
        return Err(Error::Config("seeds: need at least one".into()));
    }
    for (i, s) in seeds.iter().enumerate() {
        if seeds[..i].contains(s) {
            return Err(Error::Config(format!("seeds: {s} appears more than once")));
        }
    }

    let arch_dims: Vec<usize> = match map.get("arch.dims") {
        Some(v) => int_list("arch.dims", v, "a layer width")?,
        None => vec![32, 256, 10],
    };
    let arch = Arch::new(arch_dims.clone()).map_err(|e| Error::Config(format!("arch.dims: {e}")))?;

    let adapted_layers = match map.get("lora.adapted_layers").map(String::as_str) {
        None | Some("all") => None,
        Some(v) => Some(int_list::<usize>("lora.adapted_layers", v, "a layer index")?),
    };

    let cfg = SimConfig {
        framework,
        rounds: scalar(map, "rounds", 100, "a round count")?,
        local_epochs: scalar(map, "local_epochs", 1, "an epoch count")?,
        batch_size: scalar(map, "batch_size", 32, "a batch size")?,
        n_clients: scalar(map, "n_clients", 3, "a client count")?,
        seeds,
        arch_dims,
        lora_rank: scalar(map, "lora.rank", 8, "a rank")?,
        lora_alpha: scalar(map, "lora.alpha", 32.0, "a number")?,
        lora_dropout: scalar(map, "lora.dropout", 0.1, "a number")?,
        adapted_layers,
        optim: AdamParams {
            lr: scalar(map, "optim.lr", 1e-3, "a number")?,
            beta1: scalar(map, "optim.beta1", 0.9, "a number")?,
            beta2: scalar(map, "optim.beta2", 0.999, "a number")?,
            eps: scalar(map, "optim.eps", 1e-8, "a number")?,
        },
        data_source: match map.get("data.source").map(String::as_str) {
            None | Some("synthetic") => DataSource::Synthetic,
            Some("csv") => DataSource::Csv,
            Some(other) => {
                return Err(Error::Config(format!(
                    "data.source: expected synthetic or csv, got `{other}`"
                )))
            }
        },
        data_n: scalar(map, "data.n", 12504, "a sample count")?,
        data_features: scalar(map, "data.features", 32, "a feature count")?,
        data_classes: scalar(map, "data.classes", 10, "a class count")?,
        data_separation: scalar(map, "data.separation", 4.0, "a number")?,
        csv_path: map.get("data.csv_path").map(PathBuf::from),
        partition: match map.get("partition.strategy").map(String::as_str) {
            None | Some("iid") => PartitionStrategy::Iid,
            Some("dirichlet") => PartitionStrategy::Dirichlet {
                beta: scalar(map, "partition.beta", 0.5, "a number")?,
            },
            Some(other) => {
                return Err(Error::Config(format!(
                    "partition.strategy: expected iid or dirichlet, got `{other}`"
                )))
            }
        },
        kd_public_size: scalar(map, "kd.public_size", 5002, "a sample count")?,
        kd_temperature: scalar(map, "kd.temperature", 1.0, "a number")?,
        kd_lambda: scalar(map, "kd.lambda", 0.5, "a number")?,
        kd_server_epochs: scalar(map, "kd.server_epochs", 1, "an epoch count")?,
        kd_client_epochs: scalar(map, "kd.client_epochs", 1, "an epoch count")?,
        split_point: scalar(map, "split.point", 1, "a layer index")?,
        split_samples_per_round: scalar(map, "split.samples_per_round", 1667, "a sample count")?,
        bytes_per_scalar: scalar(map, "cost.bytes_per_scalar", 4, "2, 4, or 8")?,
    };
    validate(&cfg, &arch)?;
    Ok(cfg)
}

fn validate(cfg: &SimConfig, arch: &Arch) -> Result<()> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size: must be at least 1".into()));
    }
    if cfg.n_clients == 0 {
        return Err(Error::Config("n_clients: must be at least 1".into()));
    }

    cfg.lora_config()
        .validate(arch)
        .map_err(|e| Error::Config(format!("lora: {e}")))?;
    cfg.optim
        .validate()
        .map_err(|e| Error::Config(format!("optim: {e}")))?;
    if ![2, 4, 8].contains(&cfg.bytes_per_scalar) {
        return Err(Error::Config(format!(
            "cost.bytes_per_scalar: expected 2, 4, or 8, got {}",
            cfg.bytes_per_scalar
        )));
    }

    match cfg.data_source {
        DataSource::Synthetic => {
            if cfg.data_features != arch.d_in(1) {
                return Err(Error::Config(format!(
                    "data.features: {} does not match arch.dims[0] = {}",
                    cfg.data_features,
                    arch.d_in(1)
                )));
            }
            if cfg.data_classes != arch.n_classes() {
                return Err(Error::Config(format!(
                    "data.classes: {} does not match the last arch dim {}",
                    cfg.data_classes,
                    arch.n_classes()
                )));
            }
            if cfg.data_classes < 2 {
                return Err(Error::Config("data.classes: need at least 2".into()));
            }
            if !(cfg.data_separation >= 0.0 && cfg.data_separation.is_finite()) {
                return Err(Error::Config(format!(
                    "data.separation: must be finite and >= 0, got {}",
                    cfg.data_separation
                )));
            }
            if cfg.data_n < 5 {
                return Err(Error::Config(format!(
                    "data.n: {} is too small for a train/test split",
                    cfg.data_n
                )));
            }
        }
        DataSource::Csv => {
            if cfg.csv_path.is_none() {
                return Err(Error::Config("data.csv_path: required when data.source = csv".into()));
            }
        }
    }

    if let PartitionStrategy::Dirichlet { beta } = cfg.partition {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!(
                "partition.beta: must be positive and finite, got {beta}"
            )));
        }
    }

    if cfg.kd_public_size == 0 {
        return Err(Error::Config("kd.public_size: must be at least 1".into()));
    }
    cfg.kd_config()
        .validate()
        .map_err(|e| Error::Config(format!("kd: {e}")))?;

    if cfg.split_point == 0 || cfg.split_point >= arch.layers() {
        return Err(Error::Config(format!(
            "split.point: {} outside [1, {}]",
            cfg.split_point,
            arch.layers() - 1
        )));
    }
    if cfg.split_samples_per_round == 0 {
        return Err(Error::Config("split.samples_per_round: must be at least 1".into()));
    }
    Ok(())
}

/// Parses and validates config text in one step.
pub fn parse_config(text: &str) -> Result<SimConfig> {
    build(&parse_raw(text)?)
}

impl SimConfig {
    pub fn arch(&self) -> Arch {
        Arch::new(self.arch_dims.clone()).expect("validated at build")
    }

    pub fn lora_config(&self) -> LoraConfig {
        let layers = self.arch_dims.len() - 1;
        let adapted = match &self.adapted_layers {
            None => (1..=layers).collect(),
            Some(list) => list.iter().copied().collect(),
        };
        LoraConfig {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
            dropout: self.lora_dropout,
            adapted_layers: adapted,
        }
    }

    pub fn kd_config(&self) -> KdConfig {
        KdConfig {
            temperature: self.kd_temperature,
            lambda: self.kd_lambda,
            server_epochs: self.kd_server_epochs,
            client_epochs: self.kd_client_epochs,
        }
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            split_point: self.split_point,
            samples_per_round: self.split_samples_per_round,
            batch: self.batch_size,
        }
    }

    /// Canonical echo of the effective configuration. Parsing this text
    /// back yields an identical config.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        let kv = |out: &mut String, k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv(&mut out, "framework", self.framework.name().to_string());
        kv(&mut out, "rounds", self.rounds.to_string());
        kv(&mut out, "local_epochs", self.local_epochs.to_string());
        kv(&mut out, "batch_size", self.batch_size.to_string());
        kv(&mut out, "n_clients", self.n_clients.to_string());
        kv(&mut out, "seeds", join(&self.seeds));
        kv(&mut out, "arch.dims", join(&self.arch_dims));
        kv(&mut out, "lora.rank", self.lora_rank.to_string());
        kv(&mut out, "lora.alpha", format!("{:?}", self.lora_alpha));
        kv(&mut out, "lora.dropout", format!("{:?}", self.lora_dropout));
        kv(
            &mut out,
            "lora.adapted_layers",
            match &self.adapted_layers {
                None => "all".to_string(),
                Some(list) => join(list),
            },
        );
        kv(&mut out, "optim.lr", format!("{:?}", self.optim.lr));
        kv(&mut out, "optim.beta1", format!("{:?}", self.optim.beta1));
        kv(&mut out, "optim.beta2", format!("{:?}", self.optim.beta2));
        kv(&mut out, "optim.eps", format!("{:?}", self.optim.eps));
        kv(
            &mut out,
            "data.source",
            match self.data_source {
                DataSource::Synthetic => "synthetic".to_string(),
                DataSource::Csv => "csv".to_string(),
            },
        );
        kv(&mut out, "data.n", self.data_n.to_string());
        kv(&mut out, "data.features", self.data_features.to_string());
        kv(&mut out, "data.classes", self.data_classes.to_string());
        kv(&mut out, "data.separation", format!("{:?}", self.data_separation));
        if let Some(path) = &self.csv_path {
            kv(&mut out, "data.csv_path", path.display().to_string());
        }
        match self.partition {
            PartitionStrategy::Iid => kv(&mut out, "partition.strategy", "iid".to_string()),
            PartitionStrategy::Dirichlet { beta } => {
                kv(&mut out, "partition.strategy", "dirichlet".to_string());
                kv(&mut out, "partition.beta", format!("{beta:?}"));
            }
        }
        kv(&mut out, "kd.public_size", self.kd_public_size.to_string());
        kv(&mut out, "kd.temperature", format!("{:?}", self.kd_temperature));
        kv(&mut out, "kd.lambda", format!("{:?}", self.kd_lambda));
        kv(&mut out, "kd.server_epochs", self.kd_server_epochs.to_string());
        kv(&mut out, "kd.client_epochs", self.kd_client_epochs.to_string());
        kv(&mut out, "split.point", self.split_point.to_string());
        kv(
            &mut out,
            "split.samples_per_round",
            self.split_samples_per_round.to_string(),
        );
        kv(&mut out, "cost.bytes_per_scalar", self.bytes_per_scalar.to_string());
        out
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}
