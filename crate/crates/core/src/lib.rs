//! Risk-sensitive reinforcement learning with expectile Bellman operators.
//!
//! The crate provides exact tabular operators and solvers, a sample-based
//! multi-step expectile advantage estimator, a small neural-network stack,
//! the risk-sensitive PPO learner, two built-in environments and
//! population-based self-play with ELO-driven exploit/explore over risk
//! levels.

pub mod advantage;
pub mod checkpoint;
pub mod envs;
pub mod error;
pub mod expectile;
pub mod model;
pub mod neural;
pub mod population;
pub mod rppo;
pub mod toy;
pub mod verify;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for the random stream `stream` of a run seeded
/// with `seed`. Distinct streams are independent.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One compact JSON record, as written to line-delimited metric streams.
pub fn json_line<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("metric records serialize")
}
