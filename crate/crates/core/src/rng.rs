//! Named, independently seeded random streams for one run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose of a random stream. Each purpose draws from its own ChaCha stream
/// so that, e.g., toggling augmentation never shifts buffer decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Buffer = 4,
    Ema = 5,
    Data = 6,
    Projection = 7,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
