//! Deterministic counter-based RNG with named stream splitting.
//!
//! Every random draw in the pipeline comes from a ChaCha stream identified by
//! `(seed, purpose, index)`. Parallel and serial runs agree because each unit
//! of work (ensemble member, training step, arm) owns its own stream.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Purpose tag for a random stream. The numeric value is part of the on-disk
/// reproducibility contract: do not reorder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum StreamKind {
    /// Initial field of a toy simulation.
    ToyInit = 1,
    /// Stochastic forcing of the toy dynamics, indexed by step.
    Forcing = 2,
    /// Parameter initialization.
    ParamInit = 3,
    /// Batch index sampling during training, indexed by step.
    BatchSampling = 4,
    /// Noise and timestep draws of the denoising loss, indexed by step.
    FlowTraining = 5,
    /// Initial noise of the residual sampler, indexed by (member, lead).
    SamplerNoise = 6,
    /// Rank-histogram tie breaking.
    TieBreak = 7,
    /// Per-member derivation in ensembles.
    Member = 8,
    /// Oracle noise in tests and acceptance checks.
    Oracle = 9,
}

/// RNG for stream `(seed, kind, index)`.
pub fn stream(seed: u64, kind: StreamKind, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(((kind as u64) << 48) ^ index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream(7, StreamKind::Forcing, 3);
        let mut b = stream(7, StreamKind::Forcing, 3);
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn streams_differ_by_kind_and_index() {
        let mut a = stream(7, StreamKind::Forcing, 3);
        let mut b = stream(7, StreamKind::Forcing, 4);
        let mut c = stream(7, StreamKind::ToyInit, 3);
        let x = a.next_u64();
        assert_ne!(x, b.next_u64());
        assert_ne!(x, c.next_u64());
    }
}
