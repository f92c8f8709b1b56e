//! Deterministic simulator for federated fine-tuning of a frozen dense
//! network with low-rank adapters.
//!
//! Three exchange protocols are implemented on top of one model core:
//!
//! * [`protocols::fed_round`]: clients train adapters locally and upload
//!   them for weighted aggregation.
//! * [`protocols::kd_round`]: clients exchange logits on a shared public
//!   set and the server distills them into a global model.
//! * [`protocols::split_round`]: the network is cut at a boundary layer;
//!   activations flow up, gradients flow back, and client-side adapters
//!   are aggregated once per round.
//!
//! Every source of randomness is a counter-based stream derived from an
//! explicit seed, so repeated runs are bit-identical. The [`accounting`]
//! module prices each exchanged message in bytes and each pass through
//! the model in FLOPs; protocol code reports costs from the actual
//! payloads it moved, which the test suite cross-checks against the
//! closed-form predictors.

pub mod accounting;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod protocols;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
