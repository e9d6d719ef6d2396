//! Lazy parameter updates for block-wise execution.
//!
//! Each block pass first applies the previous iteration's update (replaying
//! last iteration's directions from `lrs`), then runs the perturbed forward
//! passes from `rs`. The update of iteration `j` is therefore applied during
//! iteration `j + 1`, or by an explicit flush.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_block, loss, Activation, Batch, ModelConfig, ParamBlock, ParamStore};
use crate::real::Real;
use crate::rng::{GaussianStream, RngState, RngStateManager};
use crate::zo::{perturb_block, update_block, ZoHyper, ZoStep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Pos,
    Neg,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Pos => 1.0,
            Direction::Neg => -1.0,
        }
    }
}

/// Which perturbed forwards a pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Directions {
    Both,
    Only(Direction),
}

impl Directions {
    pub fn includes(self, d: Direction) -> bool {
        match self {
            Directions::Both => true,
            Directions::Only(x) => x == d,
        }
    }
}

pub struct PassInputs<'a, T> {
    pub pos: Option<&'a Activation<T>>,
    pub neg: Option<&'a Activation<T>>,
}

#[derive(Debug, Clone)]
pub struct PassOutputs<T> {
    pub pos: Option<Activation<T>>,
    pub neg: Option<Activation<T>>,
}

impl<T> PassOutputs<T> {
    pub fn inputs(&self) -> PassInputs<'_, T> {
        PassInputs {
            pos: self.pos.as_ref(),
            neg: self.neg.as_ref(),
        }
    }
}

/// Generator positions after a block pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPass {
    pub rs: RngState,
    pub lrs: Option<RngState>,
}

/// One block of a lazy ZO iteration.
///
/// `pending` is last iteration's projected gradient, `None` on the first
/// iteration after a start or a flush. A legitimately zero gradient is
/// `Some(0.0)` and still consumes `lrs`.
#[allow(clippy::too_many_arguments)]
pub fn block_pass<T: Real>(
    config: &ModelConfig,
    block: &mut ParamBlock<T>,
    hyper: &ZoHyper,
    rs: RngState,
    lrs: Option<RngState>,
    pending: Option<f64>,
    inputs: PassInputs<'_, T>,
) -> Result<(PassOutputs<T>, BlockPass)> {
    let lrs = match (pending, lrs) {
        (Some(g), Some(state)) => {
            let mut s = GaussianStream::from_state(state);
            update_block(block, g, hyper.lr, &mut s);
            Some(s.state())
        }
        (Some(_), None) => {
            return Err(Error::Protocol(format!(
                "block {}: deferred update pending but no last-iteration rng state",
                block.id
            )))
        }
        (None, Some(_)) => {
            return Err(Error::Protocol(format!(
                "block {}: last-iteration rng state present without a pending gradient",
                block.id
            )))
        }
        (None, None) => None,
    };

    let eps = hyper.epsilon;
    let mut out = PassOutputs { pos: None, neg: None };
    let mut first_err = None;
    let mut run = |block: &ParamBlock<T>, input: &Activation<T>| match forward_block(config, block, input) {
        Ok(a) => Some(a),
        Err(e) => {
            first_err.get_or_insert(e);
            None
        }
    };

    let after = match (inputs.pos, inputs.neg) {
        (Some(ip), Some(ineg)) => {
            perturb_block(block, eps, &mut GaussianStream::from_state(rs));
            out.pos = run(block, ip);
            perturb_block(block, -2.0 * eps, &mut GaussianStream::from_state(rs));
            out.neg = run(block, ineg);
            let mut s = GaussianStream::from_state(rs);
            perturb_block(block, eps, &mut s);
            s.state()
        }
        (Some(ip), None) => {
            perturb_block(block, eps, &mut GaussianStream::from_state(rs));
            out.pos = run(block, ip);
            let mut s = GaussianStream::from_state(rs);
            perturb_block(block, -eps, &mut s);
            s.state()
        }
        (None, Some(ineg)) => {
            perturb_block(block, -eps, &mut GaussianStream::from_state(rs));
            out.neg = run(block, ineg);
            let mut s = GaussianStream::from_state(rs);
            perturb_block(block, eps, &mut s);
            s.state()
        }
        (None, None) => return Err(Error::Protocol("block pass without any input".into())),
    };
    if let Some(e) = first_err {
        return Err(e);
    }
    Ok((out, BlockPass { rs: after, lrs }))
}

/// Both perturbed forwards of one block (see [`block_pass`]).
#[allow(clippy::too_many_arguments)]
pub fn dual_forward<T: Real>(
    config: &ModelConfig,
    block: &mut ParamBlock<T>,
    hyper: &ZoHyper,
    rs: RngState,
    lrs: Option<RngState>,
    pending: Option<f64>,
    input_pos: &Activation<T>,
    input_neg: &Activation<T>,
) -> Result<(Activation<T>, Activation<T>, BlockPass)> {
    let (out, pass) = block_pass(
        config,
        block,
        hyper,
        rs,
        lrs,
        pending,
        PassInputs {
            pos: Some(input_pos),
            neg: Some(input_neg),
        },
    )?;
    match (out.pos, out.neg) {
        (Some(p), Some(n)) => Ok((p, n, pass)),
        _ => unreachable!("dual pass yields both outputs"),
    }
}

/// Apply a deferred update of gradient `g_last` to `blocks` (in block order),
/// replaying directions from `state`.
pub fn flush_pending_update<'a, T: Real + 'a>(
    blocks: impl IntoIterator<Item = &'a mut ParamBlock<T>>,
    g_last: f64,
    lr: f64,
    state: RngState,
) {
    let mut s = GaussianStream::from_state(state);
    for b in blocks {
        update_block(b, g_last, lr, &mut s);
    }
}

/// Per-worker lazy-update state: the rng state manager plus the pending
/// projected gradient.
#[derive(Debug, Clone, Default)]
pub struct LazyZoState {
    manager: RngStateManager,
    pending: Option<f64>,
}

/// Cursor threading `rs`/`lrs` through the blocks of one iteration.
#[derive(Debug, Clone, Copy)]
pub struct IterationCursor {
    pub seed: u64,
    pub rs: RngState,
    pub lrs: Option<RngState>,
    pub pending: Option<f64>,
}

impl IterationCursor {
    pub fn pass<T: Real>(
        &mut self,
        config: &ModelConfig,
        block: &mut ParamBlock<T>,
        hyper: &ZoHyper,
        inputs: PassInputs<'_, T>,
    ) -> Result<PassOutputs<T>> {
        let (out, next) = block_pass(config, block, hyper, self.rs, self.lrs, self.pending, inputs)?;
        self.rs = next.rs;
        self.lrs = next.lrs;
        Ok(out)
    }
}

impl LazyZoState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn manager(&self) -> &RngStateManager {
        &self.manager
    }

    pub fn pending(&self) -> Option<f64> {
        self.pending
    }

    /// Start an iteration with `seed`; the returned cursor carries the
    /// pending gradient that every block pass applies first.
    pub fn begin(&mut self, seed: u64) -> Result<IterationCursor> {
        let (rs, lrs) = self.manager.begin_iteration(seed);
        if self.pending.is_some() != lrs.is_some() {
            return Err(Error::Protocol(format!(
                "pending gradient {:?} inconsistent with last-iteration state {:?}",
                self.pending, lrs
            )));
        }
        Ok(IterationCursor {
            seed,
            rs,
            lrs,
            pending: self.pending.take(),
        })
    }

    /// Close the iteration: store the final stream position and defer `g`.
    pub fn finish(&mut self, cursor: &IterationCursor, g: f64) {
        self.manager.set_state(cursor.seed, cursor.rs);
        self.pending = Some(g);
    }

    /// Apply the deferred update to every block. Errors when nothing is
    /// pending, which includes a second flush without a new iteration.
    pub fn flush<'a, T: Real + 'a>(
        &mut self,
        blocks: impl IntoIterator<Item = &'a mut ParamBlock<T>>,
        hyper: &ZoHyper,
    ) -> Result<()> {
        let g = self
            .pending
            .take()
            .ok_or_else(|| Error::Protocol("flush without a pending update (double flush?)".into()))?;
        let state = self.manager.take_pending_state()?;
        flush_pending_update(blocks, g, hyper.lr, state);
        Ok(())
    }
}

/// One lazy iteration over an in-memory store: every block is processed by
/// [`block_pass`] in order, then both losses are evaluated.
pub fn zo2_step<T: Real>(
    state: &mut LazyZoState,
    store: &mut ParamStore<T>,
    batch: &Batch,
    hyper: &ZoHyper,
    seed: u64,
    iter: u64,
) -> Result<ZoStep> {
    batch.validate(store.config().vocab_size)?;
    let config = store.config().clone();
    let mut cursor = state.begin(seed)?;
    let tokens = Activation::tokens(batch);
    let mut acts = PassOutputs {
        pos: Some(tokens.clone()),
        neg: Some(tokens),
    };
    for block in store.blocks_mut() {
        acts = cursor.pass(&config, block, hyper, acts.inputs())?;
    }
    let lp = loss(&acts.pos.expect("pos").into_hidden()?, batch)?;
    let ln = loss(&acts.neg.expect("neg").into_hidden()?, batch)?;
    let step = ZoStep::new(iter, seed, lp, ln, hyper.epsilon)?;
    state.finish(&cursor, step.g);
    Ok(step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Hidden};
    use crate::zo::mezo_step;

    fn setup() -> (ModelConfig, ParamStore<f64>, Batch, ZoHyper) {
        let cfg = ModelConfig::tiny();
        let store = init_model(&cfg, 3).unwrap();
        let batch = Batch::synthetic(cfg.vocab_size, 2, cfg.seq_len, 5).unwrap();
        (cfg, store, batch, ZoHyper::new(1e-3, 5e-2, 4).unwrap())
    }

    #[test]
    fn first_iteration_leaves_params_unchanged() {
        let (cfg, mut store, _, h) = setup();
        let orig = store.clone();
        let x = Activation::Hidden(Hidden::<f64>::zeros(1, cfg.seq_len, cfg.d_model));
        let (p, n, pass) = dual_forward(&cfg, store.block_mut(1), &h, RngState::fresh(5), None, None, &x, &x).unwrap();
        assert!(store.bit_identical(&orig));
        assert_ne!(p, n);
        assert!(pass.lrs.is_none());
        assert!(pass.rs.word_pos > 0);
    }

    #[test]
    fn zero_epsilon_outputs_equal_plain_forward() {
        let (cfg, mut store, _, _) = setup();
        // eps = 0 is rejected by ZoHyper, so build the degenerate hyper directly.
        let h = ZoHyper {
            epsilon: 0.0,
            lr: 1.0,
            steps: 1,
        };
        let x = Activation::Hidden(Hidden {
            batch: 1,
            seq: cfg.seq_len,
            width: cfg.d_model,
            data: (0..cfg.seq_len * cfg.d_model).map(|i| (i as f64 * 0.37).sin()).collect(),
        });
        let plain = forward_block(&cfg, store.block(1), &x).unwrap();
        let (p, n, _) = dual_forward(&cfg, store.block_mut(1), &h, RngState::fresh(1), None, None, &x, &x).unwrap();
        assert_eq!(p, plain);
        assert_eq!(n, plain);
    }

    #[test]
    fn pending_without_lrs_is_protocol_error() {
        let (cfg, mut store, _, h) = setup();
        let x = Activation::Hidden(Hidden::<f64>::zeros(1, 1, cfg.d_model));
        let err = dual_forward(&cfg, store.block_mut(1), &h, RngState::fresh(1), None, Some(0.5), &x, &x).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn lazy_plus_flush_matches_mezo() {
        let (_, store, batch, h) = setup();
        let mut eager = store.clone();
        let mut lazy = store;
        let mut st = LazyZoState::new();
        for it in 1..=4u64 {
            let seed = 100 + it;
            let a = mezo_step(&mut eager, &batch, &h, seed, it).unwrap();
            let b = zo2_step(&mut st, &mut lazy, &batch, &h, seed, it).unwrap();
            assert!(a.bit_eq(&b), "iteration {it}");
        }
        assert!(!eager.bit_identical(&lazy));
        st.flush(lazy.blocks_mut(), &h).unwrap();
        assert!(eager.bit_identical(&lazy));
        assert!(st.manager().max_rsb_depth() <= 2);
    }

    #[test]
    fn double_flush_is_rejected() {
        let (_, mut store, batch, h) = setup();
        let mut st = LazyZoState::new();
        assert!(st.flush(store.blocks_mut(), &h).is_err());
        zo2_step(&mut st, &mut store, &batch, &h, 1, 1).unwrap();
        st.flush(store.blocks_mut(), &h).unwrap();
        assert!(matches!(st.flush(store.blocks_mut(), &h), Err(Error::Protocol(_))));
    }

    #[test]
    fn flush_with_zero_gradient_is_noop() {
        let (_, mut store, _, h) = setup();
        let orig = store.clone();
        flush_pending_update(store.blocks_mut(), 0.0, h.lr, RngState::fresh(3));
        assert!(store.bit_identical(&orig));
    }

    #[test]
    fn training_continues_after_flush() {
        let (_, store, batch, h) = setup();
        let mut eager = store.clone();
        let mut lazy = store;
        let mut st = LazyZoState::new();
        for it in 1..=2u64 {
            mezo_step(&mut eager, &batch, &h, it, it).unwrap();
            zo2_step(&mut st, &mut lazy, &batch, &h, it, it).unwrap();
            st.flush(lazy.blocks_mut(), &h).unwrap();
            assert!(eager.bit_identical(&lazy));
        }
    }
}
