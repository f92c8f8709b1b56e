//! Dataset construction: synthetic Gaussian clusters, CSV ingestion,
//! public-set extraction, and client partitioning.
//!
//! Everything here is a pure function of its inputs and a seed. Datasets
//! are immutable once built.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Matrix;

/// Labeled feature matrix. `n == 0` is permitted so that an empty public
/// set can flow through protocols that ignore it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Matrix,
    y: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>, n_classes: usize) -> Result<Self> {
        if y.len() != x.rows() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} rows", x.rows()),
                format!("{} labels", y.len()),
            ));
        }
        if n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {n_classes}")));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Config(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(Dataset { x, y, n_classes })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn features(&self) -> usize {
        self.x.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    /// New dataset holding the given rows, in order. Duplicate indices
    /// are allowed; out-of-range indices are an error.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let d = self.features();
        let mut values = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.n() {
                return Err(Error::shape(
                    "Dataset::subset",
                    format!("index {i}"),
                    format!("{} rows", self.n()),
                ));
            }
            values.extend_from_slice(self.x.row(i));
            labels.push(self.y[i]);
        }
        Ok(Dataset {
            x: Matrix::new(idx.len(), d, values)?,
            y: labels,
            n_classes: self.n_classes,
        })
    }

    /// Count of samples per class.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.n_classes];
        for &l in &self.y {
            h[l] += 1;
        }
        h
    }
}

/// How samples are spread across clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionStrategy {
    /// Seeded shuffle, near-equal contiguous shards.
    Iid,
    /// Per class, client shares drawn from a symmetric Dirichlet with
    /// concentration `beta`. Small beta concentrates classes on few
    /// clients.
    Dirichlet { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub n_clients: usize,
    pub strategy: PartitionStrategy,
    pub seed: u64,
}

/// Gaussian class clusters: class means drawn once and scaled by
/// `separation`, unit-variance noise around them, labels balanced up to
/// rounding. Returns an 80/20 train/test split of the shuffled pool.
pub fn synth_classification(
    n: usize,
    d: usize,
    n_classes: usize,
    separation: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {n_classes}")));
    }
    if n < n_classes {
        return Err(Error::Config(format!("{n} samples cannot cover {n_classes} classes")));
    }
    if n < 5 {
        return Err(Error::Config(format!("need at least 5 samples for an 80/20 split, got {n}")));
    }
    if d < 2 {
        return Err(Error::Config(format!("need at least 2 features, got {d}")));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("separation must be finite and >= 0, got {separation}")));
    }

    let mut stream = rng::stream(seed, streams::DATA);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut means = vec![0.0f64; n_classes * d];
    for m in means.iter_mut() {
        *m = separation * unit.sample(&mut stream);
    }

    let mut values = vec![0.0f64; n * d];
    let mut labels = vec![0usize; n];
    for i in 0..n {
        let c = i % n_classes;
        labels[i] = c;
        let row = &mut values[i * d..(i + 1) * d];
        let mean = &means[c * d..(c + 1) * d];
        for (v, mu) in row.iter_mut().zip(mean) {
            *v = mu + unit.sample(&mut stream);
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream);

    let pool = Dataset {
        x: Matrix::new(n, d, values)?,
        y: labels,
        n_classes,
    };
    let n_train = n * 4 / 5;
    let train = pool.subset(&order[..n_train])?;
    let test = pool.subset(&order[n_train..])?;
    Ok((train, test))
}

/// Extracts a seeded public subset; the remainder stays private. The
/// two parts are disjoint by construction.
pub fn split_public(ds: &Dataset, n_public: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_public >= ds.n() {
        return Err(Error::Config(format!(
            "public size {n_public} must be smaller than the dataset ({} samples)",
            ds.n()
        )));
    }
    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.shuffle(&mut rng::stream(seed, streams::PUBLIC_SPLIT));
    let public = ds.subset(&order[..n_public])?;
    let remainder = ds.subset(&order[n_public..])?;
    Ok((public, remainder))
}

/// Seeded 80/20 train/test split for externally loaded datasets.
/// Synthetic data is already split by [`synth_classification`].
pub fn holdout_split(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.n() < 5 {
        return Err(Error::Config(format!(
            "need at least 5 samples for an 80/20 split, got {}",
            ds.n()
        )));
    }
    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.shuffle(&mut rng::stream(seed, streams::HOLDOUT));
    let n_train = ds.n() * 4 / 5;
    let train = ds.subset(&order[..n_train])?;
    let test = ds.subset(&order[n_train..])?;
    Ok((train, test))
}

/// Splits `ds` into `spec.n_clients` disjoint shards that cover it.
pub fn partition_clients(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    if spec.n_clients == 0 {
        return Err(Error::Config("n_clients must be at least 1".into()));
    }
    if ds.n() < spec.n_clients {
        return Err(Error::Partition(format!(
            "{} samples cannot fill {} clients",
            ds.n(),
            spec.n_clients
        )));
    }
    let mut stream = rng::stream(spec.seed, streams::PARTITION);
    match spec.strategy {
        PartitionStrategy::Iid => {
            let mut order: Vec<usize> = (0..ds.n()).collect();
            order.shuffle(&mut stream);
            // First n % k shards take one extra sample.
            let base = ds.n() / spec.n_clients;
            let extra = ds.n() % spec.n_clients;
            let mut shards = Vec::with_capacity(spec.n_clients);
            let mut at = 0;
            for c in 0..spec.n_clients {
                let take = base + usize::from(c < extra);
                shards.push(ds.subset(&order[at..at + take])?);
                at += take;
            }
            Ok(shards)
        }
        PartitionStrategy::Dirichlet { beta } => {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::Config(format!("dirichlet beta must be positive, got {beta}")));
            }
            partition_dirichlet(ds, spec.n_clients, beta, &mut stream)
        }
    }
}

/// Per class: shuffle that class's samples, draw client shares from
/// Dirichlet(beta), and deal samples out by largest remainder. Retries
/// the whole draw until every client is nonempty.
fn partition_dirichlet(
    ds: &Dataset,
    n_clients: usize,
    beta: f64,
    stream: &mut rng::Stream,
) -> Result<Vec<Dataset>> {
    const MAX_TRIES: usize = 100;
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::Config(format!("dirichlet beta {beta}: {e}")))?;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }

    for _ in 0..MAX_TRIES {
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for class_idx in &by_class {
            if class_idx.is_empty() {
                continue;
            }
            let mut idx = class_idx.clone();
            idx.shuffle(stream);

            // Normalized gamma draws form the Dirichlet sample.
            let mut shares: Vec<f64> = (0..n_clients).map(|_| gamma.sample(stream)).collect();
            let total: f64 = shares.iter().sum();
            if total <= 0.0 {
                // All-zero draw (possible underflow at tiny beta): give
                // everything to one seeded client.
                let lucky = stream.random_range(0..n_clients);
                shares = vec![0.0; n_clients];
                shares[lucky] = 1.0;
            } else {
                for s in shares.iter_mut() {
                    *s /= total;
                }
            }

            // Largest-remainder apportionment of this class's samples.
            let n_c = idx.len();
            let mut counts: Vec<usize> = shares.iter().map(|&s| (s * n_c as f64).floor() as usize).collect();
            let mut remainders: Vec<(f64, usize)> = shares
                .iter()
                .enumerate()
                .map(|(c, &s)| (s * n_c as f64 - counts[c] as f64, c))
                .collect();
            remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut leftover = n_c - counts.iter().sum::<usize>();
            for &(_, c) in &remainders {
                if leftover == 0 {
                    break;
                }
                counts[c] += 1;
                leftover -= 1;
            }

            let mut at = 0;
            for (c, &take) in counts.iter().enumerate() {
                assigned[c].extend_from_slice(&idx[at..at + take]);
                at += take;
            }
        }
        if assigned.iter().all(|a| !a.is_empty()) {
            return assigned.iter().map(|a| ds.subset(a)).collect();
        }
    }
    Err(Error::Partition(format!(
        "could not produce {n_clients} nonempty shards after {MAX_TRIES} Dirichlet draws"
    )))
}

/// Reads a dataset from CSV with header `f0,...,f{d-1},label`. The class
/// count is `max(label) + 1`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();

    let header = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("{}: missing header", path.display()),
        })??;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 2 || cols[cols.len() - 1] != "label" {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must be f0,...,f{{d-1}},label; got `{header}`"),
        });
    }
    let d = cols.len() - 1;
    for (j, name) in cols[..d].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column `f{j}`, got `{name}`"),
            });
        }
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut max_label = 0usize;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} fields, got {}", d + 1, fields.len()),
            });
        }
        for f in &fields[..d] {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad feature value `{f}`"),
            })?;
            values.push(v);
        }
        let l: usize = fields[d].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad label `{}`", fields[d]),
        })?;
        max_label = max_label.max(l);
        labels.push(l);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    Dataset::new(Matrix::new(labels.len(), d, values)?, labels, (max_label + 1).max(2))
}

/// Writes the CSV form read by [`load_csv`]. Features use 17 significant
/// digits, enough to round-trip every finite `f64` exactly.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for j in 0..ds.features() {
        let _ = write!(out, "f{j},");
    }
    out.push_str("label\n");
    for i in 0..ds.n() {
        for v in ds.x.row(i) {
            let _ = write!(out, "{v:.16e},");
        }
        let _ = writeln!(out, "{}", ds.y[i]);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// True when the shards are pairwise disjoint by row content and their
/// sizes sum to the pool's. Used by tests; kept here so the row-identity
/// convention lives next to the partitioners.
pub fn shards_cover(pool: &Dataset, shards: &[Dataset]) -> bool {
    let total: usize = shards.iter().map(|s| s.n()).sum();
    if total != pool.n() {
        return false;
    }
    // Row multiset equality via sorted fingerprints of the raw bits.
    let fp = |ds: &Dataset| -> Vec<Vec<u64>> {
        (0..ds.n())
            .map(|i| {
                let mut row: Vec<u64> = ds.x.row(i).iter().map(|v| v.to_bits()).collect();
                row.push(ds.labels()[i] as u64);
                row
            })
            .collect()
    };
    let mut pool_rows = fp(pool);
    pool_rows.sort();
    let mut shard_rows: Vec<Vec<u64>> = shards.iter().flat_map(fp).collect();
    shard_rows.sort();
    pool_rows == shard_rows
}
