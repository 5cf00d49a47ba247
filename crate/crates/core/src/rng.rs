//! Seeding: one root seed fans out into independent named streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named sub-streams of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Env = 2,
    Explore = 3,
    Sampling = 4,
    Eval = 5,
    Verify = 6,
}

/// Deterministic generator for one sub-stream of `root`.
pub fn stream(root: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(which as u64);
    rng
}
