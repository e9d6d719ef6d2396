//! Seed-keyed Gaussian streams with exact state capture and restore.
//!
//! A stream is a ChaCha8 generator whose full state is `(seed, word_pos)`.
//! Normal draws use the ziggurat sampler, which keeps no cached spare value,
//! so a captured position replays the identical sequence of directions.

use std::collections::{HashMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{snap_to, Z_QUANTUM};

/// Serializable position in a seeded stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    /// Start of the stream for `seed`.
    pub fn fresh(seed: u64) -> Self {
        RngState { seed, word_pos: 0 }
    }
}

/// Source of perturbation directions `z ~ N(0, 1)`, quantized to [`Z_QUANTUM`].
pub struct GaussianStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        GaussianStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut s = Self::new(state.seed);
        s.rng.set_word_pos(state.word_pos);
        s
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(&mut self, state: RngState) {
        *self = Self::from_state(state);
    }

    #[inline]
    pub fn next_z(&mut self) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        snap_to(z, Z_QUANTUM)
    }

    /// Standard normal draw without quantization (used for initialization).
    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        rand::RngCore::next_u64(&mut self.rng)
    }
}

/// SplitMix64 finalizer; derives independent per-iteration seeds.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed used for iteration `iter` (1-based) of a run started from `base`.
pub fn iteration_seed(base: u64, iter: u64) -> u64 {
    mix_seed(base, iter)
}

/// Bookkeeping for lazy (one-iteration deferred) parameter updates.
///
/// Holds the per-seed state store (`GetRngState`/`SetRngState`), the FIFO
/// buffer of iteration start states and the last iteration's state.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RngStateManager {
    seed: Option<u64>,
    states: HashMap<u64, RngState>,
    rsb: VecDeque<RngState>,
    lrs: Option<RngState>,
    iterations: u64,
    max_depth: usize,
}

impl RngStateManager {
    pub fn new() -> Self {
        Self::default()
    }

    /// Current iteration's seed.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn set_state(&mut self, seed: u64, state: RngState) {
        self.states.insert(seed, state);
    }

    /// Stored state for `seed`, or the start of its stream.
    pub fn get_state(&self, seed: u64) -> RngState {
        self.states
            .get(&seed)
            .copied()
            .unwrap_or_else(|| RngState::fresh(seed))
    }

    /// Opens iteration `j`: pushes this seed's start state into `rsb` and,
    /// from the second iteration on, pops last iteration's state into `lrs`.
    /// Returns `(rs, lrs)`.
    pub fn begin_iteration(&mut self, seed: u64) -> (RngState, Option<RngState>) {
        let rs = RngState::fresh(seed);
        self.states.insert(seed, rs);
        self.rsb.push_back(rs);
        self.max_depth = self.max_depth.max(self.rsb.len());
        self.iterations += 1;
        // A state left over from an unflushed iteration becomes `lrs`.
        self.lrs = if self.rsb.len() > 1 {
            self.rsb.pop_front()
        } else {
            None
        };
        if let Some(prev) = self.seed.replace(seed) {
            if prev != seed {
                self.states.remove(&prev);
            }
        }
        (rs, self.lrs)
    }

    /// State the deferred update must replay from, consumed by a flush.
    pub fn take_pending_state(&mut self) -> Result<RngState> {
        self.lrs = None;
        self.rsb
            .pop_front()
            .ok_or_else(|| Error::Protocol("no pending iteration state to flush".into()))
    }

    pub fn lrs(&self) -> Option<RngState> {
        self.lrs
    }

    pub fn rsb_len(&self) -> usize {
        self.rsb.len()
    }

    /// High-water mark of the `rsb` FIFO.
    pub fn max_rsb_depth(&self) -> usize {
        self.max_depth
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }
}
