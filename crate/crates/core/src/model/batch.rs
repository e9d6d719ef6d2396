use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix_seed, GaussianStream};

/// Token ids and next-token targets, both row-major `(batch, seq_len)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    pub token_ids: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Batch {
    pub fn new(batch: usize, seq_len: usize, token_ids: Vec<u32>, targets: Vec<u32>) -> Result<Self> {
        let n = batch * seq_len;
        if batch == 0 || seq_len == 0 {
            return Err(Error::Config("batch and seq_len must be positive".into()));
        }
        if token_ids.len() != n {
            return Err(Error::dim("batch token_ids", n, token_ids.len()));
        }
        if targets.len() != n {
            return Err(Error::dim("batch targets", n, targets.len()));
        }
        Ok(Batch {
            batch,
            seq_len,
            token_ids,
            targets,
        })
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(bad) = self
            .token_ids
            .iter()
            .chain(&self.targets)
            .find(|&&t| t as usize >= vocab_size)
        {
            return Err(Error::Config(format!("token index {bad} out of range for vocab {vocab_size}")));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq_len
    }

    /// Deterministic synthetic batch: random tokens, targets given by a fixed
    /// affine map of the current token, so the task is learnable.
    pub fn synthetic(vocab_size: usize, batch: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        let mut g = GaussianStream::new(mix_seed(seed, 0xBA7C));
        let n = batch * seq_len;
        let token_ids: Vec<u32> = (0..n).map(|_| (g.next_u64() % vocab_size as u64) as u32).collect();
        let targets = token_ids
            .iter()
            .map(|&t| ((t as u64 * 3 + 1) % vocab_size as u64) as u32)
            .collect();
        Batch::new(batch, seq_len, token_ids, targets)
    }

    /// Split rows into `parts` equal shards.
    pub fn shard(&self, parts: usize) -> Result<Vec<Batch>> {
        if parts == 0 || self.batch % parts != 0 {
            return Err(Error::Config(format!(
                "batch size {} cannot be split into {parts} equal shards",
                self.batch
            )));
        }
        let rows = self.batch / parts;
        let width = rows * self.seq_len;
        Ok((0..parts)
            .map(|p| Batch {
                batch: rows,
                seq_len: self.seq_len,
                token_ids: self.token_ids[p * width..(p + 1) * width].to_vec(),
                targets: self.targets[p * width..(p + 1) * width].to_vec(),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = Batch::synthetic(7, 3, 4, 9).unwrap();
        let b = Batch::synthetic(7, 3, 4, 9).unwrap();
        assert_eq!(a, b);
        a.validate(7).unwrap();
        assert!(a.validate(2).is_err());
    }

    #[test]
    fn shards_partition_rows() {
        let b = Batch::synthetic(7, 4, 3, 1).unwrap();
        let s = b.shard(2).unwrap();
        assert_eq!(s.len(), 2);
        let joined: Vec<u32> = s.iter().flat_map(|x| x.token_ids.clone()).collect();
        assert_eq!(joined, b.token_ids);
        assert!(b.shard(3).is_err());
    }
}
