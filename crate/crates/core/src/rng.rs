//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream so that
//! changing, say, the number of noise draws never perturbs the sampled
//! training sets for the same seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    NetworkInit = 1,
    InverseInit = 2,
    Sampling = 3,
    Noise = 4,
    Test = 99,
}

pub fn seeded(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
