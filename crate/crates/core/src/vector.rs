//! Dense parameter vectors.
//!
//! Model, hidden-state and delta values are kept in single precision so that the
//! lossless `Dense32` wire encoding reproduces them bit-exactly.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

/// A dense real vector of dimension `d`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f32>);

impl ParameterVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn from_f64(values: &[f64]) -> Self {
        Self(values.iter().map(|&v| v as f32).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f32> {
        self.0.iter()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| f64::from(v)).collect()
    }

    /// Squared Euclidean norm, accumulated in double precision.
    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += other`, elementwise in single precision.
    pub fn add_assign(&mut self, other: &ParameterVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += *b;
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f32, other: &ParameterVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * *b;
        }
    }

    /// `self - other` as a new vector.
    pub fn sub(&self, other: &ParameterVector) -> ParameterVector {
        debug_assert_eq!(self.len(), other.len());
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&mut self, factor: f32) {
        for a in &mut self.0 {
            *a *= factor;
        }
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &ParameterVector) -> bool {
        self.len() == other.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Order-sensitive fingerprint of the raw bits.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the little-endian bytes.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.0 {
            for byte in v.to_bits().to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

impl From<Vec<f32>> for ParameterVector {
    fn from(values: Vec<f32>) -> Self {
        Self(values)
    }
}

impl Index<usize> for ParameterVector {
    type Output = f32;

    fn index(&self, i: usize) -> &f32 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParameterVector {
    fn index_mut(&mut self, i: usize) -> &mut f32 {
        &mut self.0[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_eq_separates_signed_zero() {
        let a = ParameterVector::from(vec![0.0, 1.0]);
        let b = ParameterVector::from(vec![-0.0, 1.0]);
        assert_eq!(a, b);
        assert!(!a.bit_eq(&b));
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn norm_is_accumulated_in_f64() {
        let v = ParameterVector::from(vec![3.0, 4.0]);
        assert_eq!(v.norm(), 5.0);
    }
}
