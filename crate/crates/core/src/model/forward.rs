//! Forward-only evaluation of a pre-LN decoder, one parameter block at a time.
//!
//! Every function here is a pure function of its arguments. Summations run in
//! ascending index order so that block-wise and monolithic evaluation agree
//! bit for bit.

use crate::error::{Error, Result};
use crate::model::{Batch, BlockKind, ModelConfig, ParamBlock, ParamStore};
use crate::real::Real;

const LN_EPS: f64 = 1e-5;

/// Dense `(batch, seq, width)` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Hidden<T> {
    pub batch: usize,
    pub seq: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Hidden<T> {
    pub fn zeros(batch: usize, seq: usize, width: usize) -> Self {
        Hidden {
            batch,
            seq,
            width,
            data: vec![T::zero(); batch * seq * width],
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    pub fn byte_size(&self) -> usize {
        self.data.len() * T::BYTES
    }
}

/// Input or output of a block.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation<T> {
    Tokens { batch: usize, seq: usize, ids: Vec<u32> },
    Hidden(Hidden<T>),
}

impl<T: Real> Activation<T> {
    pub fn tokens(batch: &Batch) -> Self {
        Activation::Tokens {
            batch: batch.batch,
            seq: batch.seq_len,
            ids: batch.token_ids.clone(),
        }
    }

    pub fn byte_size(&self) -> usize {
        match self {
            Activation::Tokens { .. } => 0,
            Activation::Hidden(h) => h.byte_size(),
        }
    }

    pub fn as_hidden(&self) -> Option<&Hidden<T>> {
        match self {
            Activation::Hidden(h) => Some(h),
            Activation::Tokens { .. } => None,
        }
    }

    pub fn into_hidden(self) -> Result<Hidden<T>> {
        match self {
            Activation::Hidden(h) => Ok(h),
            Activation::Tokens { .. } => Err(Error::dim("activation", "hidden states", "token ids")),
        }
    }
}

/// Evaluate one block. The block kind decides the expected input.
pub fn forward_block<T: Real>(
    config: &ModelConfig,
    block: &ParamBlock<T>,
    input: &Activation<T>,
) -> Result<Activation<T>> {
    match (block.kind, input) {
        (BlockKind::Embedding, Activation::Tokens { batch, seq, ids }) => {
            embed(config, block, *batch, *seq, ids).map(Activation::Hidden)
        }
        (BlockKind::Transformer, Activation::Hidden(h)) => {
            transformer(config, block, h).map(Activation::Hidden)
        }
        (BlockKind::Head, Activation::Hidden(h)) => head(config, block, h).map(Activation::Hidden),
        (BlockKind::Embedding, _) => Err(Error::dim("embedding input", "token ids", "hidden states")),
        (_, _) => Err(Error::dim("block input", "hidden states", "token ids")),
    }
}

/// Full forward pass: compose [`forward_block`] over blocks in order.
pub fn forward<T: Real>(store: &ParamStore<T>, batch: &Batch) -> Result<Hidden<T>> {
    batch.validate(store.config().vocab_size)?;
    let mut act = Activation::tokens(batch);
    for b in store.blocks() {
        act = forward_block(store.config(), b, &act)?;
    }
    act.into_hidden()
}

fn embed<T: Real>(
    config: &ModelConfig,
    block: &ParamBlock<T>,
    batch: usize,
    seq: usize,
    ids: &[u32],
) -> Result<Hidden<T>> {
    let d = config.d_model;
    if seq > config.seq_len {
        return Err(Error::dim("sequence length", config.seq_len, seq));
    }
    if ids.len() != batch * seq {
        return Err(Error::dim("token ids", batch * seq, ids.len()));
    }
    let tok = block.tensor(0);
    let pos = block.tensor(1);
    let mut out = Hidden::zeros(batch, seq, d);
    for (r, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= config.vocab_size {
            return Err(Error::Config(format!("token index {id} out of range")));
        }
        let t = r % seq;
        let row = &mut out.data[r * d..(r + 1) * d];
        for j in 0..d {
            row[j] = tok[id * d + j] + pos[t * d + j];
        }
    }
    Ok(out)
}

fn check_width<T: Real>(h: &Hidden<T>, d: usize, seq_max: usize) -> Result<()> {
    if h.width != d {
        return Err(Error::dim("hidden width", d, h.width));
    }
    if h.seq > seq_max {
        return Err(Error::dim("sequence length", seq_max, h.seq));
    }
    if h.data.len() != h.rows() * h.width {
        return Err(Error::dim("hidden buffer", h.rows() * h.width, h.data.len()));
    }
    Ok(())
}

fn transformer<T: Real>(config: &ModelConfig, block: &ParamBlock<T>, h: &Hidden<T>) -> Result<Hidden<T>> {
    let d = config.d_model;
    check_width(h, d, config.seq_len)?;
    let rows = h.rows();
    let m = config.mlp_width();

    let x1 = layer_norm(&h.data, d, block.tensor(0), block.tensor(1));
    let qkv = linear(&x1, rows, d, block.tensor(2), block.tensor(3), 3 * d);
    let ctx = causal_attention(&qkv, h.batch, h.seq, d, config.n_heads);
    let proj = linear(&ctx, rows, d, block.tensor(4), block.tensor(5), d);
    let mut resid: Vec<T> = h.data.iter().zip(&proj).map(|(&a, &b)| a + b).collect();

    let x2 = layer_norm(&resid, d, block.tensor(6), block.tensor(7));
    let mut hid = linear(&x2, rows, d, block.tensor(8), block.tensor(9), m);
    for x in hid.iter_mut() {
        *x = gelu(*x);
    }
    let mlp = linear(&hid, rows, m, block.tensor(10), block.tensor(11), d);
    for (r, &y) in resid.iter_mut().zip(&mlp) {
        *r = *r + y;
    }
    Ok(Hidden {
        batch: h.batch,
        seq: h.seq,
        width: d,
        data: resid,
    })
}

fn head<T: Real>(config: &ModelConfig, block: &ParamBlock<T>, h: &Hidden<T>) -> Result<Hidden<T>> {
    let d = config.d_model;
    check_width(h, d, config.seq_len)?;
    let x = layer_norm(&h.data, d, block.tensor(0), block.tensor(1));
    let zero_bias = vec![T::zero(); config.vocab_size];
    let logits = linear(&x, h.rows(), d, block.tensor(2), &zero_bias, config.vocab_size);
    Ok(Hidden {
        batch: h.batch,
        seq: h.seq,
        width: config.vocab_size,
        data: logits,
    })
}

/// Row-wise layer norm over `width` features.
pub(crate) fn layer_norm<T: Real>(x: &[T], width: usize, gain: &[T], bias: &[T]) -> Vec<T> {
    let n = T::from_f64(width as f64);
    let eps = T::from_f64(LN_EPS);
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let mut sum = T::zero();
        for &v in row {
            sum = sum + v;
        }
        let mean = sum / n;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        let inv = T::one() / (var / n + eps).sqrt();
        for j in 0..width {
            dst[j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    out
}

/// `x (rows, inp) @ w (inp, out) + b`; accumulation starts from the bias.
pub(crate) fn linear<T: Real>(x: &[T], rows: usize, inp: usize, w: &[T], b: &[T], out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * out);
    for r in 0..rows {
        y.extend_from_slice(&b[..out]);
        let dst = &mut y[r * out..(r + 1) * out];
        let src = &x[r * inp..(r + 1) * inp];
        for (k, &a) in src.iter().enumerate() {
            let wrow = &w[k * out..(k + 1) * out];
            for (o, &wv) in dst.iter_mut().zip(wrow) {
                *o = *o + a * wv;
            }
        }
    }
    y
}

fn causal_attention<T: Real>(qkv: &[T], batch: usize, seq: usize, d: usize, heads: usize) -> Vec<T> {
    let dh = d / heads;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let stride = 3 * d;
    let mut out = vec![T::zero(); batch * seq * d];
    let mut weights = vec![T::zero(); seq];
    for b in 0..batch {
        let base = b * seq;
        for hd in 0..heads {
            let qo = hd * dh;
            let ko = d + hd * dh;
            let vo = 2 * d + hd * dh;
            for t in 0..seq {
                let q = &qkv[(base + t) * stride + qo..(base + t) * stride + qo + dh];
                let mut max = T::neg_infinity();
                for u in 0..=t {
                    let k = &qkv[(base + u) * stride + ko..(base + u) * stride + ko + dh];
                    let mut s = T::zero();
                    for j in 0..dh {
                        s = s + q[j] * k[j];
                    }
                    s = s * scale;
                    weights[u] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut denom = T::zero();
                for w in weights[..=t].iter_mut() {
                    *w = (*w - max).exp();
                    denom = denom + *w;
                }
                let dst = &mut out[(base + t) * d + qo..(base + t) * d + qo + dh];
                for u in 0..=t {
                    let p = weights[u] / denom;
                    let v = &qkv[(base + u) * stride + vo..(base + u) * stride + vo + dh];
                    for j in 0..dh {
                        dst[j] = dst[j] + p * v[j];
                    }
                }
            }
        }
    }
    out
}

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64(0.5);
    let k = T::from_f64(0.044715);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}
