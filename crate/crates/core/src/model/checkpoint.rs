//! Checkpoint file: `MAGIC`, little-endian `u64` header length, JSON header
//! (config + block index), then every block's values as little-endian floats
//! in block order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockKind, ModelConfig, ParamBlock, ParamStore, TensorSpec};
use crate::real::{Dtype, Real};

pub const MAGIC: &[u8; 8] = b"DZCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: Dtype,
    blocks: Vec<BlockEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    id: usize,
    kind: BlockKind,
    elem_count: usize,
    /// Byte offset of the block's values from the start of the value section.
    byte_offset: usize,
    tensors: Vec<TensorSpec>,
}

pub fn encode<T: Real>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut blocks = Vec::new();
    let mut off = 0;
    for b in store.blocks() {
        blocks.push(BlockEntry {
            id: b.id,
            kind: b.kind,
            elem_count: b.elem_count(),
            byte_offset: off,
            tensors: b.tensors().to_vec(),
        });
        off += b.byte_size();
    }
    let header = serde_json::to_vec(&Header {
        config: store.config().clone(),
        dtype: T::DTYPE,
        blocks,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + off);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for b in store.blocks() {
        for &v in b.values() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Config("not a distzo checkpoint".into()));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[8..16]);
    let hlen = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| Error::Config("checkpoint header length overflows".into()))?;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| Error::Config("truncated checkpoint header".into()))?;
    Ok((serde_json::from_slice(body)?, hlen))
}

/// Element type stored in an encoded checkpoint.
pub fn dtype_of(bytes: &[u8]) -> Result<Dtype> {
    Ok(header(bytes)?.0.dtype)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let (header, hlen) = header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Config(format!(
            "checkpoint dtype {:?} does not match requested {:?}",
            header.dtype,
            T::DTYPE
        )));
    }
    let values = &bytes[16 + hlen..];
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for e in header.blocks {
        let end = e.byte_offset + e.elem_count * T::BYTES;
        let raw = values
            .get(e.byte_offset..end)
            .ok_or_else(|| Error::Config(format!("truncated values for block {}", e.id)))?;
        let vals = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        blocks.push(ParamBlock::from_parts(e.id, e.kind, e.tensors, vals)?);
    }
    ParamStore::from_blocks(header.config, blocks)
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(store)?)?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn load<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    decode(&read_bytes(path)?)
}
