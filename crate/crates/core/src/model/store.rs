use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::real::Real;
use crate::rng::{mix_seed, GaussianStream};

/// Stream domain for initialization draws; perturbation streams use
/// per-iteration seeds and never share this one.
const INIT_STREAM_DOMAIN: u64 = 0x1A17_0000_0000_0001;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Embedding,
    Transformer,
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How a tensor is initialized.
#[derive(Clone, Copy)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

/// One schedulable unit of parameters: the embedding, a transformer block,
/// or the LM head. Tensors are views into one contiguous buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock<T> {
    pub id: usize,
    pub kind: BlockKind,
    tensors: Vec<TensorSpec>,
    values: Vec<T>,
}

impl<T: Real> ParamBlock<T> {
    pub fn from_parts(id: usize, kind: BlockKind, tensors: Vec<TensorSpec>, values: Vec<T>) -> Result<Self> {
        let mut expect = 0;
        for t in &tensors {
            if t.offset != expect {
                return Err(Error::dim("tensor offset", expect, t.offset));
            }
            expect += t.len();
        }
        if expect != values.len() {
            return Err(Error::dim("block values", expect, values.len()));
        }
        Ok(ParamBlock {
            id,
            kind,
            tensors,
            values,
        })
    }

    fn zeroed(id: usize, kind: BlockKind, shapes: &[(&str, Vec<usize>)]) -> Self {
        let mut tensors = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (name, shape) in shapes {
            let spec = TensorSpec {
                name: (*name).to_string(),
                shape: shape.clone(),
                offset,
            };
            offset += spec.len();
            tensors.push(spec);
        }
        ParamBlock {
            id,
            kind,
            tensors,
            values: vec![T::zero(); offset],
        }
    }

    pub fn elem_count(&self) -> usize {
        self.values.len()
    }

    pub fn byte_size(&self) -> usize {
        self.values.len() * T::BYTES
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn tensor(&self, index: usize) -> &[T] {
        let t = &self.tensors[index];
        &self.values[t.offset..t.offset + t.len()]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// Same block layout with every value set to zero.
    pub fn zeros_like(&self) -> Self {
        ParamBlock {
            id: self.id,
            kind: self.kind,
            tensors: self.tensors.clone(),
            values: vec![T::zero(); self.values.len()],
        }
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for v in &self.values {
            h.write_u64(v.bits());
        }
        h.finish()
    }
}

/// Block-addressable model parameters in the stable order
/// embedding, transformer blocks `1..=N`, LM head.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    config: ModelConfig,
    blocks: Vec<ParamBlock<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn from_blocks(config: ModelConfig, blocks: Vec<ParamBlock<T>>) -> Result<Self> {
        config.validate()?;
        if blocks.len() != config.block_count() {
            return Err(Error::dim("block count", config.block_count(), blocks.len()));
        }
        for (i, b) in blocks.iter().enumerate() {
            if b.id != i {
                return Err(Error::Config(format!("block at position {i} has id {}", b.id)));
            }
            let expected = block_layout::<T>(&config, i);
            if b.kind != expected.kind || b.tensors != expected.tensors {
                return Err(Error::Config(format!("block {i} layout does not match config")));
            }
        }
        Ok(ParamStore { config, blocks })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[ParamBlock<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock<T>] {
        &mut self.blocks
    }

    pub fn block(&self, id: usize) -> &ParamBlock<T> {
        &self.blocks[id]
    }

    pub fn block_mut(&mut self, id: usize) -> &mut ParamBlock<T> {
        &mut self.blocks[id]
    }

    pub fn into_blocks(self) -> Vec<ParamBlock<T>> {
        self.blocks
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(ParamBlock::elem_count).sum()
    }

    pub fn byte_size(&self) -> usize {
        self.param_count() * T::BYTES
    }

    /// Order-sensitive FNV-1a digest of every parameter's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for b in &self.blocks {
            for v in &b.values {
                h.write_u64(v.bits());
            }
        }
        h.finish()
    }

    pub fn bit_identical(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
                a.values.len() == b.values.len()
                    && a.values.iter().zip(&b.values).all(|(x, y)| x.bits() == y.bits())
            })
    }

    /// Largest absolute difference to another store of the same layout.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .flat_map(|(a, b)| a.values.iter().zip(&b.values))
            .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Empty (zero-valued) block with the layout the config prescribes.
pub fn block_layout<T: Real>(config: &ModelConfig, id: usize) -> ParamBlock<T> {
    let d = config.d_model;
    let v = config.vocab_size;
    if id == 0 {
        ParamBlock::zeroed(
            0,
            BlockKind::Embedding,
            &[("tok_emb", vec![v, d]), ("pos_emb", vec![config.seq_len, d])],
        )
    } else if id == config.head_block_id() {
        ParamBlock::zeroed(
            id,
            BlockKind::Head,
            &[("ln_f.gain", vec![d]), ("ln_f.bias", vec![d]), ("lm_head.weight", vec![d, v])],
        )
    } else {
        let m = config.mlp_width();
        ParamBlock::zeroed(
            id,
            BlockKind::Transformer,
            &[
                ("ln1.gain", vec![d]),
                ("ln1.bias", vec![d]),
                ("attn.qkv.weight", vec![d, 3 * d]),
                ("attn.qkv.bias", vec![3 * d]),
                ("attn.out.weight", vec![d, d]),
                ("attn.out.bias", vec![d]),
                ("ln2.gain", vec![d]),
                ("ln2.bias", vec![d]),
                ("mlp.fc1.weight", vec![d, m]),
                ("mlp.fc1.bias", vec![m]),
                ("mlp.fc2.weight", vec![m, d]),
                ("mlp.fc2.bias", vec![d]),
            ],
        )
    }
}

fn tensor_init(name: &str) -> Init {
    if name.ends_with(".gain") {
        Init::Ones
    } else if name.ends_with(".bias") {
        Init::Zeros
    } else {
        Init::Normal
    }
}

/// Deterministic initialization: identical `(config, init_seed)` gives
/// bit-identical parameters.
pub fn init_model<T: Real>(config: &ModelConfig, init_seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut stream = GaussianStream::new(mix_seed(init_seed, INIT_STREAM_DOMAIN));
    let mut blocks = Vec::with_capacity(config.block_count());
    for id in 0..config.block_count() {
        let mut block = block_layout::<T>(config, id);
        let specs = block.tensors.clone();
        for spec in &specs {
            let dst = &mut block.values[spec.offset..spec.offset + spec.len()];
            match tensor_init(&spec.name) {
                Init::Normal => {
                    for x in dst.iter_mut() {
                        *x = T::snap(INIT_STD * stream.next_normal());
                    }
                }
                Init::Ones => dst.fill(T::one()),
                Init::Zeros => dst.fill(T::zero()),
            }
        }
        blocks.push(block);
    }
    Ok(ParamStore {
        config: config.clone(),
        blocks,
    })
}

pub struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write_u64(&mut self, x: u64) {
        for b in x.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}
