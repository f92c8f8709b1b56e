//! Seeded random streams.
//!
//! All randomness flows through ChaCha8 generators addressed by
//! `(seed, stream)`. Distinct stream ids yield statistically independent
//! sequences from the same seed, so consumers never share generator
//! state and the draw order of one component cannot perturb another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for one `(seed, stream)` pair.
pub type Stream = ChaCha8Rng;

/// Stream ids per consumer. Values are arbitrary but frozen: changing
/// them changes every simulated trajectory.
pub mod streams {
    /// Synthetic data generation (class means, then sample noise).
    pub const DATA: u64 = 0x01;
    /// Public/private split of the training pool.
    pub const PUBLIC_SPLIT: u64 = 0x02;
    /// Client partitioning (shuffles and Dirichlet draws).
    pub const PARTITION: u64 = 0x03;
    /// Model weight and adapter initialization.
    pub const MODEL_INIT: u64 = 0x04;
    /// Server-side batching and dropout.
    pub const SERVER: u64 = 0x05;
    /// Train/test split of an externally loaded dataset.
    pub const HOLDOUT: u64 = 0x06;
    /// Per-client private stream: `CLIENT_BASE + client id`.
    pub const CLIENT_BASE: u64 = 0x100;
}

/// Generator for the given seed and stream id.
pub fn stream(seed: u64, stream: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Private stream for one client.
pub fn client_stream(seed: u64, client_id: usize) -> Stream {
    stream(seed, streams::CLIENT_BASE + client_id as u64)
}
