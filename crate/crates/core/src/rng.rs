//! Seeded random streams. One run seed fans out into independent per-purpose
//! ChaCha streams so that, e.g., split assignment never shifts batch draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Split = 1,
    OuterBatch = 2,
    InnerBatch = 3,
    Ucb = 4,
    Adaptation = 5,
}

pub fn substream(seed: u64, stream: Stream) -> RunRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
