//! Synthetic tabular data with a masked transformer.
//!
//! Tables are tokenized field by field ([`codec`]), a bidirectional encoder is
//! trained to recover randomly masked cells ([`masking`]), and new rows are
//! produced by unmasking fields in random order ([`generation`]).

pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod error;
pub mod flowcheck;
pub mod generation;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod privacy;
pub mod schema;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate's RNG. All randomness flows from explicit seeds.
pub type Rng64 = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
