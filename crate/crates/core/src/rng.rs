//! Reproducible random streams.
//!
//! Every consumer of randomness owns an [`RngStream`] derived from a root
//! 64-bit seed plus a `(run, lane)` pair. The stream id is fed to ChaCha's
//! stream counter, so distinct pairs never overlap and identical triples
//! replay bit-identical draws.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Lane reserved for environment transitions and initial states.
pub const ENV_LANE: u32 = 0xFFFF;
/// Lane reserved for Monte-Carlo policy evaluation.
pub const EVAL_LANE: u32 = 0xFFFE;
/// Lane reserved for instance generation.
pub const GEN_LANE: u32 = 0xFFFD;

#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    /// Derives the stream for `(run, lane)` from `root`. `lane` is usually an
    /// agent index or one of the reserved lane constants.
    pub fn derive(root: u64, run: u64, lane: u32) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(root);
        inner.set_stream((run << 16) ^ u64::from(lane));
        Self { inner }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Inverse-CDF draw over `probs` in index order. Never returns an index
    /// with zero mass, even when rounding leaves the cumulative sum short of 1.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut cum = 0.0;
        let mut last_positive = 0;
        for (j, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                cum += p;
                last_positive = j;
                if u < cum {
                    return j;
                }
            }
        }
        last_positive
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
