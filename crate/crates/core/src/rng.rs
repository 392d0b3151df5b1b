//! Deterministic per-stage random streams derived from one top-level seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pipeline stages that consume randomness. Each gets its own ChaCha stream,
/// so adding draws to one stage never shifts another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    SynthCenters = 1,
    SynthTrain = 2,
    SynthHeldout = 3,
    SynthGeneral = 4,
    SynthShift = 5,
    AdapterInit = 10,
    AdapterSampling = 11,
    Predictor = 20,
    Ablation = 30,
}

pub fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}
