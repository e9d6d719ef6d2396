use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub owner: usize,
    pub offset: usize,
    pub len: usize,
}

impl Slice {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Partition of one block's `m` parameters into `n` owned slices of
/// `ceil(m / n)` elements. The tail slices may be short or empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceLayout {
    pub block_id: usize,
    pub m: usize,
    pub n: usize,
    pub slices: Vec<Slice>,
}

impl SliceLayout {
    pub fn new(block_id: usize, m: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("slice layout needs at least one device".into()));
        }
        let width = m.div_ceil(n);
        let slices = (0..n)
            .map(|i| {
                let offset = (i * width).min(m);
                Slice {
                    owner: i,
                    offset,
                    len: (offset + width).min(m) - offset,
                }
            })
            .collect();
        Ok(SliceLayout { block_id, m, n, slices })
    }

    /// Nominal slice width, `ceil(m / n)`.
    pub fn width(&self) -> usize {
        self.m.div_ceil(self.n)
    }

    pub fn slice_of(&self, device: usize) -> Option<&Slice> {
        self.slices.iter().find(|s| s.owner == device)
    }

    /// Slices tile `[0, m)` in order and owners are a permutation of devices.
    pub fn validate(&self) -> Result<()> {
        let mut at = 0;
        let mut owners: Vec<usize> = self.slices.iter().map(|s| s.owner).collect();
        owners.sort_unstable();
        if self.slices.len() != self.n || owners != (0..self.n).collect::<Vec<_>>() {
            return Err(Error::Layout(format!("block {}: owners are not a permutation of devices", self.block_id)));
        }
        for s in &self.slices {
            if s.offset != at {
                return Err(Error::Layout(format!("block {}: gap or overlap at {at}", self.block_id)));
            }
            at += s.len;
        }
        if at != self.m {
            return Err(Error::Layout(format!("block {}: slices cover {at} of {}", self.block_id, self.m)));
        }
        Ok(())
    }
}

/// Host parameter storage pre-partitioned per worker at init time. Each
/// worker's slice of a block is a contiguous region of that block's buffer,
/// so transfers hand out borrowed views and never stage copies.
#[derive(Debug, Clone)]
pub struct AlignedHostStore<T> {
    n: usize,
    blocks: Vec<(Vec<T>, SliceLayout)>,
    staging_copies: usize,
}

/// Pre-slice `store` for `n` workers.
pub fn apply_thread_aligned_layout<T: Real>(store: &ParamStore<T>, n: usize) -> Result<AlignedHostStore<T>> {
    let blocks = store
        .blocks()
        .iter()
        .map(|b| Ok((b.values().to_vec(), SliceLayout::new(b.id, b.elem_count(), n)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignedHostStore {
        n,
        blocks,
        staging_copies: 0,
    })
}

impl<T: Real> AlignedHostStore<T> {
    pub fn workers(&self) -> usize {
        self.n
    }

    pub fn layout(&self, block_id: usize) -> Result<&SliceLayout> {
        self.blocks
            .get(block_id)
            .map(|(_, l)| l)
            .ok_or_else(|| Error::Layout(format!("unknown block {block_id}")))
    }

    pub fn block_values(&self, block_id: usize) -> Result<&[T]> {
        Ok(&self
            .blocks
            .get(block_id)
            .ok_or_else(|| Error::Layout(format!("unknown block {block_id}")))?
            .0)
    }

    fn check_n(&self, n: usize) -> Result<()> {
        if n != self.n {
            return Err(Error::Layout(format!(
                "layout was built for {} workers but the run uses {n}; re-initialize the host store",
                self.n
            )));
        }
        Ok(())
    }

    /// Worker `w`'s slice of a block, as a view into host storage.
    pub fn slice(&self, block_id: usize, w: usize, n: usize) -> Result<&[T]> {
        self.check_n(n)?;
        let (values, layout) = &self.blocks[block_id];
        let s = layout
            .slice_of(w)
            .ok_or_else(|| Error::Layout(format!("worker {w} out of range")))?;
        Ok(&values[s.range()])
    }

    /// Write worker `w`'s offloaded slice straight into its host region.
    pub fn write_slice(&mut self, block_id: usize, w: usize, n: usize, data: &[T]) -> Result<()> {
        self.check_n(n)?;
        let (values, layout) = &mut self.blocks[block_id];
        let s = *layout
            .slice_of(w)
            .ok_or_else(|| Error::Layout(format!("worker {w} out of range")))?;
        if data.len() != s.len {
            return Err(Error::dim("offloaded slice", s.len, data.len()));
        }
        values[s.range()].copy_from_slice(data);
        Ok(())
    }

    /// Intermediate buffers allocated by transfers so far. Always zero for
    /// this layout.
    pub fn staging_copies(&self) -> usize {
        self.staging_copies
    }
}

/// Unpartitioned host storage: every transfer re-slices the block into a
/// freshly allocated staging buffer.
#[derive(Debug, Clone)]
pub struct NaiveHostStore<T> {
    blocks: Vec<Vec<T>>,
    staging_copies: usize,
}

impl<T: Real> NaiveHostStore<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        NaiveHostStore {
            blocks: store.blocks().iter().map(|b| b.values().to_vec()).collect(),
            staging_copies: 0,
        }
    }

    pub fn slice(&mut self, block_id: usize, w: usize, n: usize) -> Result<Vec<T>> {
        let values = self
            .blocks
            .get(block_id)
            .ok_or_else(|| Error::Layout(format!("unknown block {block_id}")))?;
        let layout = SliceLayout::new(block_id, values.len(), n)?;
        let s = layout
            .slice_of(w)
            .ok_or_else(|| Error::Layout(format!("worker {w} out of range")))?;
        self.staging_copies += 1;
        Ok(values[s.range()].to_vec())
    }

    pub fn staging_copies(&self) -> usize {
        self.staging_copies
    }
}
