//! Seeded, counter-addressed random streams.
//!
//! A branch owns one [`SeededStream`]. Each agent decision draws from its own
//! substream addressed by `(tick, agent_id)`, so decisions do not depend on
//! evaluation order and a fork replays the parent's draws exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fixed::Fixed;
use crate::model::{AgentId, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeededStream {
    seed: u64,
}

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        SeededStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self, tick: Tick, agent: &AgentId) -> Substream {
        let mut hasher = Sha256::new();
        hasher.update(b"timefork/substream/v1");
        hasher.update(self.seed.to_le_bytes());
        hasher.update(tick.0.to_le_bytes());
        hasher.update(agent.as_str().as_bytes());
        Substream(ChaCha8Rng::from_seed(hasher.finalize().into()))
    }
}

/// Random source for a single `(tick, agent)` decision.
#[derive(Debug, Clone)]
pub struct Substream(ChaCha8Rng);

impl Substream {
    /// Bernoulli draw with a fixed-point probability (resolution 1e-4).
    pub fn chance(&mut self, probability: Fixed) -> bool {
        let threshold = probability.clamp(Fixed::ZERO, Fixed::one()).to_decimal() * rust_decimal::Decimal::from(10_000);
        let threshold: u32 = threshold.trunc().try_into().unwrap_or(0);
        self.0.gen_range(0..10_000u32) < threshold
    }

    /// Uniform index in `0..n`. `n` must be nonzero.
    pub fn pick(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n as u64) as usize
    }
}
