//! Frozen dense classifier with low-rank adapters.
//!
//! The base network never trains. Each adapted layer carries a pair of
//! low-rank factors (A, B) whose product, scaled by `alpha / rank`, is
//! added to the frozen layer output. Forward and backward run over any
//! contiguous layer range, which is what lets one network be cut into a
//! client prefix and a server suffix.
//!
//! Layer l maps width `dims[l-1]` to `dims[l]`:
//!
//! ```text
//! z_l = h W_lᵀ + b_l + (alpha/r) · drop(h) A_lᵀ B_lᵀ
//! h_l = relu(z_l)        except at the last layer, which is linear
//! ```
//!
//! with batches as rows. Dropout acts on the adapter input path only
//! and only in train mode.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, streams, Stream};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Matrix};

/// Layer widths `[d0, d1, ..., dL]`: `d0` input features, `dL` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    dims: Vec<usize>,
}

impl Arch {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 3 {
            return Err(Error::Config(format!(
                "need at least 2 layers (3 widths), got {:?}",
                dims
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!("layer widths must be positive, got {dims:?}")));
        }
        if dims[dims.len() - 1] < 2 {
            return Err(Error::Config(format!(
                "output width must be at least 2 classes, got {}",
                dims[dims.len() - 1]
            )));
        }
        Ok(Arch { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of layers L.
    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Input width of layer `l` (1-based).
    pub fn d_in(&self, l: usize) -> usize {
        self.dims[l - 1]
    }

    /// Output width of layer `l` (1-based).
    pub fn d_out(&self, l: usize) -> usize {
        self.dims[l]
    }

    pub fn n_classes(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }
}

/// Adapter hyperparameters shared by every adapted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub adapted_layers: BTreeSet<usize>,
}

impl LoraConfig {
    /// All layers adapted at the given rank, alpha 32, dropout 0.1.
    pub fn all_layers(arch: &Arch, rank: usize) -> Self {
        LoraConfig {
            rank,
            alpha: 32.0,
            dropout: 0.1,
            adapted_layers: (1..=arch.layers()).collect(),
        }
    }

    /// Effective adapter scale alpha / rank.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, arch: &Arch) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.adapted_layers.is_empty() {
            return Err(Error::Config("at least one layer must be adapted".into()));
        }
        for &l in &self.adapted_layers {
            if l == 0 || l > arch.layers() {
                return Err(Error::Config(format!(
                    "adapted layer {l} outside [1, {}]",
                    arch.layers()
                )));
            }
            let cap = arch.d_in(l).min(arch.d_out(l));
            if self.rank > cap {
                return Err(Error::Config(format!(
                    "rank {} exceeds min(d_in, d_out) = {cap} at layer {l}",
                    self.rank
                )));
            }
        }
        Ok(())
    }
}

/// Low-rank factors for one layer: `A` is rank x d_in, `B` is
/// d_out x rank. `B` starts at zero so a fresh adapter is inert.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub layer: usize,
    pub a: Matrix,
    pub b: Matrix,
}

/// Shape directory for a flat adapter payload: which layers, in
/// ascending order, and their factor shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterManifest {
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub layer: usize,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl AdapterManifest {
    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// Total scalars in a payload with this shape:
    /// sum of rank * (d_in + d_out) over entries.
    pub fn scalar_len(&self) -> usize {
        self.entries.iter().map(|e| e.rank * (e.d_in + e.d_out)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Inputs and pre-activations recorded by a ranged forward pass;
/// everything the matching backward pass needs.
#[derive(Debug)]
pub struct Tape {
    from: usize,
    to: usize,
    n: usize,
    layers: Vec<TapeLayer>,
}

#[derive(Debug)]
struct TapeLayer {
    input: Matrix,
    preact: Matrix,
    adapter: Option<AdapterTape>,
}

#[derive(Debug)]
struct AdapterTape {
    /// Adapter-path input after dropout; `None` when it equals the
    /// layer input (dropout inactive).
    dropped: Option<Matrix>,
    /// Dropout multipliers (0 or 1/(1-p)); `None` when inactive.
    mask: Option<Matrix>,
    /// Low-rank intermediate `drop(h) Aᵀ`, batch x rank.
    mid: Matrix,
}

/// Adapter gradients keyed by layer.
#[derive(Debug, Clone, Default)]
pub struct AdapterGrads {
    pub by_layer: BTreeMap<usize, (Matrix, Matrix)>,
}

impl AdapterGrads {
    /// Flattens in manifest order (ascending layer, A then B). The
    /// gradient set must cover exactly the manifest's layers.
    pub fn flatten(&self, manifest: &AdapterManifest) -> Result<Vec<f64>> {
        if self.by_layer.len() != manifest.entries.len() {
            return Err(Error::Codec(format!(
                "gradients cover {} layers, manifest has {}",
                self.by_layer.len(),
                manifest.entries.len()
            )));
        }
        let mut out = Vec::with_capacity(manifest.scalar_len());
        for e in &manifest.entries {
            let (ga, gb) = self
                .by_layer
                .get(&e.layer)
                .ok_or_else(|| Error::Codec(format!("no gradient for layer {}", e.layer)))?;
            out.extend_from_slice(ga.values());
            out.extend_from_slice(gb.values());
        }
        Ok(out)
    }
}

/// The frozen network plus its adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredNet {
    arch: Arch,
    lora: LoraConfig,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    adapters: BTreeMap<usize, AdapterPair>,
}

/// Builds a network from one seed: frozen weights Gaussian with std
/// 1/sqrt(fan-in), biases zero, adapter A factors Gaussian std 0.02,
/// B factors zero. Same inputs give a bit-identical model.
pub fn init_model(arch: &Arch, lora: &LoraConfig, seed: u64) -> Result<LayeredNet> {
    lora.validate(arch)?;
    let mut stream = rng::stream(seed, streams::MODEL_INIT);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut weights = Vec::with_capacity(arch.layers());
    let mut biases = Vec::with_capacity(arch.layers());
    for l in 1..=arch.layers() {
        let (d_in, d_out) = (arch.d_in(l), arch.d_out(l));
        let std = 1.0 / (d_in as f64).sqrt();
        let mut w = vec![0.0f64; d_out * d_in];
        for v in w.iter_mut() {
            *v = std * unit.sample(&mut stream);
        }
        weights.push(Matrix::new(d_out, d_in, w)?);
        biases.push(vec![0.0; d_out]);
    }

    let mut adapters = BTreeMap::new();
    for &l in &lora.adapted_layers {
        let (d_in, d_out) = (arch.d_in(l), arch.d_out(l));
        let mut a = vec![0.0f64; lora.rank * d_in];
        for v in a.iter_mut() {
            *v = 0.02 * unit.sample(&mut stream);
        }
        adapters.insert(
            l,
            AdapterPair {
                layer: l,
                a: Matrix::new(lora.rank, d_in, a)?,
                b: Matrix::zeros(d_out, lora.rank),
            },
        );
    }

    Ok(LayeredNet {
        arch: arch.clone(),
        lora: lora.clone(),
        weights,
        biases,
        adapters,
    })
}

impl LayeredNet {
    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn lora(&self) -> &LoraConfig {
        &self.lora
    }

    /// Frozen weight of layer `l` (1-based).
    pub fn weight(&self, l: usize) -> &Matrix {
        &self.weights[l - 1]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        &self.biases[l - 1]
    }

    pub fn adapter(&self, l: usize) -> Option<&AdapterPair> {
        self.adapters.get(&l)
    }

    /// Forward through layers `from+1 ..= to`. `x` is batch x d_from.
    /// In train mode with dropout active, `stream` supplies the masks.
    pub fn forward_range(
        &self,
        x: &Matrix,
        from: usize,
        to: usize,
        train: bool,
        mut stream: Option<&mut Stream>,
    ) -> Result<(Matrix, Tape)> {
        if from >= to || to > self.arch.layers() {
            return Err(Error::shape(
                "forward_range",
                format!("range ({from}, {to}]"),
                format!("0 <= from < to <= {}", self.arch.layers()),
            ));
        }
        if x.cols() != self.arch.dims()[from] {
            return Err(Error::shape(
                "forward_range",
                format!("input width {}", x.cols()),
                format!("layer {from} width {}", self.arch.dims()[from]),
            ));
        }
        let dropout_active = train && self.lora.dropout > 0.0;
        let p = self.lora.dropout;
        let keep_scale = 1.0 / (1.0 - p);

        let mut h = x.clone();
        let mut layers = Vec::with_capacity(to - from);
        for l in from + 1..=to {
            let mut z = gemm_nt(&h, self.weight(l))?;
            z.add_row_bias(self.bias(l))?;

            let adapter_tape = if let Some(pair) = self.adapters.get(&l) {
                let (dropped, mask) = if dropout_active {
                    let s = stream.as_mut().ok_or_else(|| {
                        Error::Config("train-mode forward with dropout needs an rng stream".into())
                    })?;
                    let mut mask = Matrix::zeros(h.rows(), h.cols());
                    for v in mask.values_mut() {
                        *v = if s.random::<f64>() < p { 0.0 } else { keep_scale };
                    }
                    let mut dropped = h.clone();
                    dropped.hadamard_in_place(&mask)?;
                    (Some(dropped), Some(mask))
                } else {
                    (None, None)
                };
                let mid = gemm_nt(dropped.as_ref().unwrap_or(&h), &pair.a)?;
                let low_rank = gemm_nt(&mid, &pair.b)?;
                z.add_scaled(&low_rank, self.lora.scale())?;
                Some(AdapterTape { dropped, mask, mid })
            } else {
                None
            };

            let mut out = z.clone();
            if l < self.arch.layers() {
                out.relu_in_place();
            }
            layers.push(TapeLayer {
                input: h,
                preact: z,
                adapter: adapter_tape,
            });
            h = out;
        }

        Ok((
            h,
            Tape {
                from,
                to,
                n: x.rows(),
                layers,
            },
        ))
    }

    /// Gradients for the range recorded on `tape`, given the loss
    /// gradient at the range output. Returns adapter gradients for
    /// adapted layers in range and the gradient at the range input.
    /// Frozen weights receive no gradient by construction.
    pub fn backward_range(&self, tape: &Tape, upstream: &Matrix) -> Result<(AdapterGrads, Matrix)> {
        let d_to = self.arch.dims()[tape.to];
        if upstream.rows() != tape.n || upstream.cols() != d_to {
            return Err(Error::shape(
                "backward_range",
                format!("upstream {}x{}", upstream.rows(), upstream.cols()),
                format!("{}x{}", tape.n, d_to),
            ));
        }
        let scale = self.lora.scale();
        let mut grads = AdapterGrads::default();
        let mut g = upstream.clone();

        for (offset, rec) in tape.layers.iter().enumerate().rev() {
            let l = tape.from + offset + 1;
            // The last network layer is linear; every other layer gates
            // its gradient through the ReLU at its pre-activation.
            if l < self.arch.layers() {
                g.mask_nonpositive(&rec.preact)?;
            }

            let mut g_input = gemm(&g, self.weight(l))?;

            if let Some(pair) = self.adapters.get(&l) {
                let at = rec
                    .adapter
                    .as_ref()
                    .ok_or_else(|| Error::shape("backward_range", "tape without adapter record", format!("layer {l}")))?;
                let grad_b = {
                    let mut gb = gemm_tn(&g, &at.mid)?;
                    gb.scale(scale);
                    gb
                };
                // Gradient into the low-rank intermediate, with the
                // adapter scale folded in once.
                let mut g_mid = gemm(&g, &pair.b)?;
                g_mid.scale(scale);
                let dropped = at.dropped.as_ref().unwrap_or(&rec.input);
                let grad_a = gemm_tn(&g_mid, dropped)?;

                let mut g_adapter_in = gemm(&g_mid, &pair.a)?;
                if let Some(mask) = &at.mask {
                    g_adapter_in.hadamard_in_place(mask)?;
                }
                g_input.add_in_place(&g_adapter_in)?;
                grads.by_layer.insert(l, (grad_a, grad_b));
            }

            g = g_input;
        }
        Ok((grads, g))
    }

    /// Manifest for adapted layers with index in `[lo, hi]`.
    pub fn manifest_range(&self, lo: usize, hi: usize) -> AdapterManifest {
        let entries = self
            .adapters
            .values()
            .filter(|p| (lo..=hi).contains(&p.layer))
            .map(|p| ManifestEntry {
                layer: p.layer,
                rank: p.a.rows(),
                d_in: p.a.cols(),
                d_out: p.b.rows(),
            })
            .collect();
        AdapterManifest { entries }
    }

    /// Manifest covering every adapted layer.
    pub fn manifest(&self) -> AdapterManifest {
        self.manifest_range(1, self.arch.layers())
    }

    /// Flat adapter values in manifest order: ascending layer, each as
    /// A row-major then B row-major.
    pub fn export_adapters(&self) -> (Vec<f64>, AdapterManifest) {
        self.export_range(1, self.arch.layers())
    }

    /// Flat values for adapted layers in `[lo, hi]`.
    pub fn export_range(&self, lo: usize, hi: usize) -> (Vec<f64>, AdapterManifest) {
        let manifest = self.manifest_range(lo, hi);
        let mut values = Vec::with_capacity(manifest.scalar_len());
        for e in &manifest.entries {
            let pair = &self.adapters[&e.layer];
            values.extend_from_slice(pair.a.values());
            values.extend_from_slice(pair.b.values());
        }
        (values, manifest)
    }

    /// Replaces the adapters named by `manifest` with `values`. The
    /// manifest must match this model's configuration for those layers;
    /// frozen weights are untouched.
    pub fn import_adapters(&mut self, values: &[f64], manifest: &AdapterManifest) -> Result<()> {
        if values.len() != manifest.scalar_len() {
            return Err(Error::Codec(format!(
                "payload of {} scalars does not match manifest length {}",
                values.len(),
                manifest.scalar_len()
            )));
        }
        // Validate every entry before mutating anything.
        for e in &manifest.entries {
            let pair = self.adapters.get(&e.layer).ok_or_else(|| {
                Error::Codec(format!("manifest names layer {}, which is not adapted", e.layer))
            })?;
            if pair.a.rows() != e.rank || pair.a.cols() != e.d_in || pair.b.rows() != e.d_out {
                return Err(Error::Codec(format!(
                    "manifest entry for layer {} has shape r={} {}x{}, model expects r={} {}x{}",
                    e.layer,
                    e.rank,
                    e.d_in,
                    e.d_out,
                    pair.a.rows(),
                    pair.a.cols(),
                    pair.b.rows()
                )));
            }
        }
        let mut at = 0;
        for e in &manifest.entries {
            let pair = self.adapters.get_mut(&e.layer).expect("validated above");
            let a_len = e.rank * e.d_in;
            let b_len = e.d_out * e.rank;
            pair.a.values_mut().copy_from_slice(&values[at..at + a_len]);
            at += a_len;
            pair.b.values_mut().copy_from_slice(&values[at..at + b_len]);
            at += b_len;
        }
        Ok(())
    }
}
