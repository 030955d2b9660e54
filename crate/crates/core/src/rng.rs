//! Seeded random streams.
//!
//! Every consumer draws from its own ChaCha stream derived from one seed, so
//! switching a noise source on or off never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream used for meals, covariates and insulin boluses.
pub const STREAM_EVENTS: u64 = 0;
/// Stream used for relative observation noise.
pub const STREAM_OBSERVATION_NOISE: u64 = 1;
/// Stream used for meal-time recording noise.
pub const STREAM_MEAL_TIME_NOISE: u64 = 2;
/// Stream used for minibatch sampling during training.
pub const STREAM_MINIBATCH: u64 = 3;
/// Stream used for network initialization.
pub const STREAM_INIT: u64 = 4;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
