use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{ParamBlock, ParamStore};
use crate::offload::pool::{AllocKey, MemoryPool, Tier};
use crate::real::Real;

/// Host tier: owns the master copy of every block.
#[derive(Debug, Clone)]
pub struct HostMemory<T> {
    pool: MemoryPool,
    store: ParamStore<T>,
}

impl<T: Real> HostMemory<T> {
    pub fn new(store: ParamStore<T>) -> Result<Self> {
        let mut pool = MemoryPool::unbounded(Tier::Host);
        for b in store.blocks() {
            pool.alloc(AllocKey::Block(b.id), b.byte_size())?;
        }
        Ok(HostMemory { pool, store })
    }

    pub fn pool(&self) -> &MemoryPool {
        &self.pool
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore<T> {
        self.store
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Residency {
    Idle,
    Computing,
    Computed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidencyHandle {
    pub block_id: usize,
    pub tier: Tier,
    pub bytes: usize,
}

#[derive(Debug)]
struct DeviceSlot<T> {
    block: Option<ParamBlock<T>>,
    state: Residency,
}

/// One device tier: byte accounting plus the device-side block copies.
#[derive(Debug)]
pub struct DeviceMemory<T> {
    pool: MemoryPool,
    slots: BTreeMap<usize, DeviceSlot<T>>,
}

impl<T: Real> DeviceMemory<T> {
    pub fn new(device: usize, capacity: usize) -> Self {
        DeviceMemory {
            pool: MemoryPool::new(Tier::Device(device), capacity),
            slots: BTreeMap::new(),
        }
    }

    pub fn pool(&self) -> &MemoryPool {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut MemoryPool {
        &mut self.pool
    }

    pub fn is_resident(&self, block_id: usize) -> bool {
        self.slots.contains_key(&block_id)
    }

    pub fn resident_blocks(&self) -> Vec<usize> {
        self.slots.keys().copied().collect()
    }

    pub fn block(&self, block_id: usize) -> Option<&ParamBlock<T>> {
        self.slots.get(&block_id).and_then(|s| s.block.as_ref())
    }

    pub fn block_mut(&mut self, block_id: usize) -> Option<&mut ParamBlock<T>> {
        self.slots.get_mut(&block_id).and_then(|s| s.block.as_mut())
    }

    /// Resident blocks that are not being computed, in id order.
    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ParamBlock<T>> {
        self.slots.values_mut().filter_map(|s| s.block.as_mut())
    }

    pub fn state(&self, block_id: usize) -> Option<Residency> {
        self.slots.get(&block_id).map(|s| s.state)
    }

    /// Hand a resident block to a compute; it cannot be offloaded until
    /// [`DeviceMemory::end_compute`] returns it.
    pub fn begin_compute(&mut self, block_id: usize) -> Result<ParamBlock<T>> {
        let slot = self
            .slots
            .get_mut(&block_id)
            .ok_or_else(|| Error::Schedule(format!("compute on block {block_id} which is not on device")))?;
        let block = slot
            .block
            .take()
            .ok_or_else(|| Error::Schedule(format!("block {block_id} is already being computed")))?;
        slot.state = Residency::Computing;
        Ok(block)
    }

    pub fn end_compute(&mut self, block: ParamBlock<T>) -> Result<()> {
        let id = block.id;
        let slot = self
            .slots
            .get_mut(&id)
            .ok_or_else(|| Error::Schedule(format!("block {id} finished compute but is not resident")))?;
        slot.block = Some(block);
        slot.state = Residency::Computed;
        Ok(())
    }

    fn insert(&mut self, block: ParamBlock<T>) -> Result<ResidencyHandle> {
        let bytes = block.byte_size();
        let id = block.id;
        self.pool.alloc(AllocKey::Block(id), bytes)?;
        self.slots.insert(
            id,
            DeviceSlot {
                block: Some(block),
                state: Residency::Idle,
            },
        );
        Ok(ResidencyHandle {
            block_id: id,
            tier: self.pool.tier(),
            bytes,
        })
    }

    fn remove(&mut self, block_id: usize) -> Result<ParamBlock<T>> {
        let slot = self
            .slots
            .get(&block_id)
            .ok_or_else(|| Error::Schedule(format!("offload of block {block_id} which is not on device")))?;
        if slot.state == Residency::Computing {
            return Err(Error::Schedule(format!(
                "offload of block {block_id} before its compute completed"
            )));
        }
        let slot = self.slots.remove(&block_id).expect("checked above");
        self.pool.free(AllocKey::Block(block_id))?;
        Ok(slot.block.expect("idle or computed slot holds its block"))
    }
}

/// Copy a host block onto the device. The host master stays in place.
pub fn upload_block<T: Real>(
    host: &HostMemory<T>,
    device: &mut DeviceMemory<T>,
    block_id: usize,
) -> Result<ResidencyHandle> {
    let src = host
        .store
        .blocks()
        .get(block_id)
        .ok_or_else(|| Error::Schedule(format!("block {block_id} does not exist on host")))?;
    if device.is_resident(block_id) {
        return Err(Error::Schedule(format!("block {block_id} already on device")));
    }
    device.insert(src.clone())
}

/// Write the device copy back over the host master and free it on the
/// device. Returns the number of bytes freed.
pub fn offload_block<T: Real>(
    device: &mut DeviceMemory<T>,
    host: &mut HostMemory<T>,
    block_id: usize,
) -> Result<usize> {
    let block = device.remove(block_id)?;
    let bytes = block.byte_size();
    host.store
        .block_mut(block_id)
        .values_mut()
        .copy_from_slice(block.values());
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn host() -> HostMemory<f64> {
        HostMemory::new(init_model(&ModelConfig::tiny(), 1).unwrap()).unwrap()
    }

    #[test]
    fn upload_copies_exact_values() {
        let h = host();
        let mut d = DeviceMemory::new(0, usize::MAX);
        let handle = upload_block(&h, &mut d, 1).unwrap();
        assert_eq!(handle.bytes, h.store().block(1).byte_size());
        assert_eq!(d.block(1).unwrap(), h.store().block(1));
        assert!(h.store().block(1).elem_count() > 0);
    }

    #[test]
    fn one_block_capacity_rejects_second_upload() {
        let h = host();
        let cap = h.store().block(1).byte_size();
        let mut d = DeviceMemory::new(0, cap);
        upload_block(&h, &mut d, 1).unwrap();
        let err = upload_block(&h, &mut d, 2).unwrap_err();
        assert!(matches!(err, Error::OutOfMemory { block_id: 2, .. }));
    }

    #[test]
    fn offload_without_compute_keeps_master_and_frees_bytes() {
        let mut h = host();
        let before = h.store().clone();
        let mut d = DeviceMemory::new(0, usize::MAX);
        upload_block(&h, &mut d, 2).unwrap();
        let used = d.pool().used();
        let freed = offload_block(&mut d, &mut h, 2).unwrap();
        assert_eq!(freed, before.block(2).elem_count() * 8);
        assert_eq!(used - d.pool().used(), freed);
        assert!(h.store().bit_identical(&before));
    }

    #[test]
    fn offload_during_compute_is_contract_error() {
        let mut h = host();
        let mut d = DeviceMemory::new(0, usize::MAX);
        upload_block(&h, &mut d, 1).unwrap();
        let mut b = d.begin_compute(1).unwrap();
        assert!(matches!(offload_block(&mut d, &mut h, 1), Err(Error::Schedule(_))));
        b.values_mut()[0] = 0.5;
        d.end_compute(b).unwrap();
        offload_block(&mut d, &mut h, 1).unwrap();
        assert_eq!(h.store().block(1).values()[0], 0.5);
    }
}
