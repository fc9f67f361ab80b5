//! Deterministic random-stream derivation.
//!
//! A single master seed fans out into independent ChaCha substreams addressed
//! by integer label paths, e.g. master -> pass j -> transition k -> particle i.
//! A stream's output depends only on its label path, never on how many draws
//! other streams made, so results are bit-reproducible no matter how the
//! per-particle loops are scheduled.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Labels for the purpose component of a stream path, kept distinct so that
/// derived streams never collide across subsystems.
pub mod labels {
    /// Initial-ensemble position draws.
    pub const INIT: u64 = 1;
    /// Per-particle MCMC draws (momenta and accept uniforms).
    pub const MCMC: u64 = 2;
    /// Resampling uniforms for one transition.
    pub const RESAMPLE: u64 = 3;
    /// One whole proposal run inside the outer particle-MCMC chain.
    pub const PROPOSAL: u64 = 4;
    /// Accept/reject uniforms of the outer particle-MCMC chain.
    pub const CHAIN_ACCEPT: u64 = 5;
    /// One training pass.
    pub const PASS: u64 = 6;
    /// Held-out / validation ensembles that shadow a training ensemble.
    pub const VALIDATION: u64 = 7;
    /// Test ensembles (reported estimates).
    pub const TEST: u64 = 8;
    /// Parameter initialization of conditioner networks.
    pub const PARAM_INIT: u64 = 9;
    /// Per-transition namespace inside one sampler run.
    pub const TRANSITION: u64 = 10;
}

const GAMMA: u64 = 0x9e3779b97f4a7c15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A point in the stream tree. Copyable; deriving children never mutates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngKey(u64);

impl RngKey {
    pub fn new(seed: u64) -> Self {
        RngKey(splitmix(seed))
    }

    /// Child key for an integer label. Distinct (key, label) pairs map to
    /// distinct children except for negligible 64-bit collisions.
    pub fn child(self, label: u64) -> Self {
        RngKey(splitmix(self.0 ^ splitmix(label.wrapping_mul(GAMMA) ^ 0x5851f42d4c957f2d)))
    }

    /// Materializes the stream for this key.
    pub fn rng(self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let mut s = self.0;
        for chunk in seed.chunks_exact_mut(8) {
            s = splitmix(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}
