//! Element types and the parameter lattice.
//!
//! In `f64` every parameter value, perturbation step and update step is kept
//! on a fixed dyadic lattice (multiples of [`PARAM_QUANTUM`]). Sums of lattice
//! values below `2^8` in magnitude are exact in binary64, so the in-place
//! `+eps, -2eps, +eps` perturbation cycle restores parameters bit for bit and
//! every runtime that applies the same steps in any order lands on the same
//! bits. `f32` carries no such guarantee and is meant for throughput runs.

use std::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Spacing of the f64 parameter lattice.
pub const PARAM_QUANTUM: f64 = 1.0 / (1u64 << 44) as f64;
/// Spacing of the quantized Gaussian directions.
pub const Z_QUANTUM: f64 = 1.0 / (1u64 << 16) as f64;
/// Spacing of admissible perturbation scales (`eps`).
pub const EPS_QUANTUM: f64 = 1.0 / (1u64 << 28) as f64;
/// Parameter magnitudes at or above this leave the exact range of the lattice.
pub const EXACT_RANGE: f64 = 256.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_of(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl Default for Dtype {
    fn default() -> Self {
        Dtype::F64
    }
}

pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    const DTYPE: Dtype;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Round a step or initial value onto the parameter lattice.
    fn snap(x: f64) -> Self;
    fn bits(self) -> u64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTES: usize = 8;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn snap(x: f64) -> Self {
        snap_to(x, PARAM_QUANTUM)
    }
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits()
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTES: usize = 4;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn snap(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(b)
    }
}

/// Round to the nearest multiple of a power-of-two `quantum`.
///
/// Scaling by a power of two is exact, so the only rounding is `round()`.
#[inline]
pub fn snap_to(x: f64, quantum: f64) -> f64 {
    (x / quantum).round() * quantum
}

/// Snap a perturbation scale onto the admissible grid.
pub fn snap_epsilon(eps: f64) -> f64 {
    snap_to(eps, EPS_QUANTUM)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_sums_are_exact() {
        let a = f64::snap(0.0123456789);
        let step = f64::snap(snap_epsilon(1e-3) * snap_to(1.2345678, Z_QUANTUM));
        let restored = ((a + step) - 2.0 * step) + step;
        assert_eq!(restored.to_bits(), a.to_bits());
    }

    #[test]
    fn plain_f64_cycle_is_not_exact_in_general() {
        // The reason the lattice exists: without it the cycle drifts.
        let mut drifted = 0;
        for i in 0..1000 {
            let theta = 0.02 + i as f64 * 1.37e-5;
            let step = 1e-3 * (0.3 + i as f64 * 1.1e-3);
            let back = ((theta + step) - 2.0 * step) + step;
            if back.to_bits() != theta.to_bits() {
                drifted += 1;
            }
        }
        assert!(drifted > 0);
    }

    #[test]
    fn le_round_trip() {
        let mut buf = Vec::new();
        1.25f64.write_le(&mut buf);
        (-3.5f32).write_le(&mut buf);
        assert_eq!(f64::read_le(&buf[..8]), 1.25);
        assert_eq!(f32::read_le(&buf[8..]), -3.5);
    }
}
