//! Seeded, splittable randomness.
//!
//! Every stochastic stage draws from its own substream of the run seed, so
//! changing how one stage consumes randomness does not perturb the others.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

/// Named consumers of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Class split into disjoint vs blurry.
    Partition,
    /// Class-to-task home assignment.
    Assignment,
    /// Pooling and redistribution of blurry samples.
    Leakage,
    /// Within-task entry shuffle.
    Shuffle,
    /// Parameter initialization (head, keys, prompts, backbone weights).
    Init,
    /// Reservoir slot replacement.
    Reservoir,
    /// Memory batch sampling.
    Replay,
}

impl Stage {
    fn stream_id(self) -> u64 {
        match self {
            Stage::Partition => 1,
            Stage::Assignment => 2,
            Stage::Leakage => 3,
            Stage::Shuffle => 4,
            Stage::Init => 5,
            Stage::Reservoir => 6,
            Stage::Replay => 7,
        }
    }
}

/// Independent generator for `stage`, derived from `seed`.
pub fn substream(seed: u64, stage: Stage) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stage.stream_id());
    rng
}
