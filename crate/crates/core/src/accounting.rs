//! Exact cost model: payload bytes and model FLOPs.
//!
//! Two routes produce every number. Protocol code accumulates counters
//! from the actual messages it moves and the actual batches it trains
//! on; the closed forms here predict the same values from configuration
//! alone. The test suite holds the two routes to exact integer
//! equality.
//!
//! Conventions, fixed so comparisons are stable:
//! * only payload scalars are priced; headers and framing are not;
//! * a forward pass through layer l costs `2 n d_in d_out`, plus
//!   `2 n r (d_in + d_out)` when the layer is adapted;
//! * a training pass costs 3x the forward pass (backward billed at 2x);
//! * aggregation arithmetic and accuracy evaluation are not billed.

use crate::error::{Error, Result};
use crate::model::{Arch, LoraConfig};

/// Serialization pricing. Payloads model a 32-bit deployment by
/// default even though the simulator computes in f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModelParams {
    pub bytes_per_scalar: u64,
}

impl Default for CostModelParams {
    fn default() -> Self {
        CostModelParams { bytes_per_scalar: 4 }
    }
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.bytes_per_scalar) {
            return Err(Error::Config(format!(
                "bytes_per_scalar must be 2, 4, or 8, got {}",
                self.bytes_per_scalar
            )));
        }
        Ok(())
    }
}

/// Whether a pass is forward-only or forward plus backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Eval,
    Train,
}

/// Byte and FLOP counters for one party in one round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PartyCosts {
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub flops: u64,
}

impl PartyCosts {
    pub fn total_bytes(&self) -> u64 {
        self.uplink_bytes + self.downlink_bytes
    }
}

/// All parties' counters for one round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundCosts {
    pub clients: Vec<PartyCosts>,
    pub server: PartyCosts,
}

/// Per-round cost history for a run.
#[derive(Debug, Clone, Default)]
pub struct CostLedger {
    rounds: Vec<RoundCosts>,
}

impl CostLedger {
    pub fn new() -> Self {
        CostLedger::default()
    }

    pub fn push(&mut self, round: RoundCosts) {
        self.rounds.push(round);
    }

    pub fn rounds(&self) -> &[RoundCosts] {
        &self.rounds
    }

    /// Cumulative counters for one client over all recorded rounds.
    pub fn client_totals(&self, client: usize) -> PartyCosts {
        let mut t = PartyCosts::default();
        for r in &self.rounds {
            if let Some(c) = r.clients.get(client) {
                t.uplink_bytes += c.uplink_bytes;
                t.downlink_bytes += c.downlink_bytes;
                t.flops += c.flops;
            }
        }
        t
    }

    pub fn server_totals(&self) -> PartyCosts {
        let mut t = PartyCosts::default();
        for r in &self.rounds {
            t.uplink_bytes += r.server.uplink_bytes;
            t.downlink_bytes += r.server.downlink_bytes;
            t.flops += r.server.flops;
        }
        t
    }
}

/// Bytes of one full adapter payload under `lora`:
/// `bytes_per_scalar * sum over adapted layers of r (d_in + d_out)`.
pub fn adapter_payload_bytes(lora: &LoraConfig, arch: &Arch, p: &CostModelParams) -> Result<u64> {
    let mut scalars = 0u64;
    for &l in &lora.adapted_layers {
        if l == 0 || l > arch.layers() {
            return Err(Error::Config(format!(
                "adapted layer {l} outside [1, {}]",
                arch.layers()
            )));
        }
        scalars += (lora.rank as u64) * (arch.d_in(l) as u64 + arch.d_out(l) as u64);
    }
    Ok(scalars * p.bytes_per_scalar)
}

/// Bytes of a logit matrix for `n` samples and `n_classes` classes.
pub fn logits_payload_bytes(n: u64, n_classes: u64, p: &CostModelParams) -> u64 {
    n * n_classes * p.bytes_per_scalar
}

/// Bytes moved through a split boundary of width `d_k` for `n` samples:
/// activations plus one label scalar each go up, gradients come down.
pub fn split_traffic_bytes(n: u64, d_k: u64, p: &CostModelParams) -> (u64, u64) {
    (n * (d_k + 1) * p.bytes_per_scalar, n * d_k * p.bytes_per_scalar)
}

/// FLOPs for a batch of `n` crossing layers `from+1 ..= to`.
pub fn flops_model(
    arch: &Arch,
    lora: &LoraConfig,
    n: u64,
    from: usize,
    to: usize,
    phase: Phase,
) -> Result<u64> {
    if from >= to || to > arch.layers() {
        return Err(Error::shape(
            "flops_model",
            format!("range ({from}, {to}]"),
            format!("0 <= from < to <= {}", arch.layers()),
        ));
    }
    let mut forward = 0u64;
    for l in from + 1..=to {
        let (d_in, d_out) = (arch.d_in(l) as u64, arch.d_out(l) as u64);
        forward += 2 * n * d_in * d_out;
        if lora.adapted_layers.contains(&l) {
            forward += 2 * n * (lora.rank as u64) * (d_in + d_out);
        }
    }
    Ok(match phase {
        Phase::Eval => forward,
        Phase::Train => 3 * forward,
    })
}
