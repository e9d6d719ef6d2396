use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Host,
    Device(usize),
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tier::Host => write!(f, "host"),
            Tier::Device(k) => write!(f, "device{k}"),
        }
    }
}

/// What an allocation holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AllocKey {
    Block(usize),
    /// Outputs of the given block's compute.
    Activation(usize),
}

/// Byte accounting for one memory tier. Holds no data itself.
#[derive(Debug, Clone)]
pub struct MemoryPool {
    tier: Tier,
    capacity: usize,
    used: usize,
    peak: usize,
    resident: BTreeMap<AllocKey, usize>,
}

impl MemoryPool {
    pub fn new(tier: Tier, capacity: usize) -> Self {
        MemoryPool {
            tier,
            capacity,
            used: 0,
            peak: 0,
            resident: BTreeMap::new(),
        }
    }

    pub fn unbounded(tier: Tier) -> Self {
        Self::new(tier, usize::MAX)
    }

    pub fn tier(&self) -> Tier {
        self.tier
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn used(&self) -> usize {
        self.used
    }

    /// High-water mark of `used`; never decreases.
    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn contains(&self, key: AllocKey) -> bool {
        self.resident.contains_key(&key)
    }

    pub fn bytes_of(&self, key: AllocKey) -> Option<usize> {
        self.resident.get(&key).copied()
    }

    pub fn alloc(&mut self, key: AllocKey, bytes: usize) -> Result<()> {
        if self.resident.contains_key(&key) {
            return Err(Error::Schedule(format!("{key:?} already resident on {}", self.tier)));
        }
        let available = self.capacity - self.used;
        if bytes > available {
            let block_id = match key {
                AllocKey::Block(b) | AllocKey::Activation(b) => b,
            };
            return Err(Error::OutOfMemory {
                block_id,
                requested: bytes,
                available,
            });
        }
        self.used += bytes;
        self.peak = self.peak.max(self.used);
        self.resident.insert(key, bytes);
        Ok(())
    }

    /// Release an allocation and return its size.
    pub fn free(&mut self, key: AllocKey) -> Result<usize> {
        let bytes = self
            .resident
            .remove(&key)
            .ok_or_else(|| Error::Schedule(format!("{key:?} is not resident on {}", self.tier)))?;
        self.used -= bytes;
        Ok(bytes)
    }

    pub fn reset_peak(&mut self) {
        self.peak = self.used;
    }
}
