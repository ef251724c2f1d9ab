//! Dense f64 vectors for model parameters and inner-mapping outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense real vector. Used both for model parameters (length `d`) and for
/// inner-mapping outputs (length `p`); the aliases below mark intent in
/// signatures. Lengths are fixed per experiment, entries must stay finite.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    values: Vec<f64>,
}

/// Model parameter vector w ∈ R^d.
pub type ParamVec = Vector;
/// Inner-mapping output y ∈ R^p (p = 1 for scalar-loss tasks, p = d for
/// meta-learning tasks).
pub type InnerVec = Vector;

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector {
            values: vec![0.0; len],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Vector { values: vec![x] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        self.check_len(other, "dot")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Squared Euclidean distance to `other`.
    pub fn dist_sq(&self, other: &Vector) -> Result<f64> {
        self.check_len(other, "dist_sq")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// In-place `self += alpha * x`.
    pub fn add_scaled(&mut self, alpha: f64, x: &Vector) -> Result<()> {
        self.check_len(x, "add_scaled")?;
        for (s, v) in self.values.iter_mut().zip(&x.values) {
            *s += alpha * v;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Vector {
        Vector {
            values: self.values.iter().map(|x| alpha * x).collect(),
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    fn check_len(&self, other: &Vector, context: &'static str) -> Result<()> {
        if self.len() == other.len() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                context,
                left: self.len(),
                right: other.len(),
            })
        }
    }
}

impl From<Vec<f64>> for Vector {
    fn from(values: Vec<f64>) -> Self {
        Vector { values }
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector {
            values: iter.into_iter().collect(),
        }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

/// Returns `alpha * x + y` elementwise; inputs are unmodified.
pub fn vec_axpy(alpha: f64, x: &Vector, y: &Vector) -> Result<Vector> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "vec_axpy",
            left: x.len(),
            right: y.len(),
        });
    }
    Ok(x.values
        .iter()
        .zip(&y.values)
        .map(|(a, b)| alpha * a + b)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn axpy_basic() {
        let x = Vector::from(vec![1.0, 1.0]);
        let y = Vector::from(vec![0.0, 1.0]);
        assert_eq!(vec_axpy(2.0, &x, &y).unwrap().as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn axpy_zero_alpha_is_identity() {
        let x = Vector::from(vec![3.0, -7.0, 0.5]);
        let y = Vector::from(vec![1.0, 2.0, 3.0]);
        assert_eq!(vec_axpy(0.0, &x, &y).unwrap(), y);
    }

    #[test]
    fn axpy_cancellation() {
        let x = Vector::from(vec![4.0, -2.5]);
        let out = vec_axpy(-1.0, &x, &x).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn axpy_length_mismatch_errors() {
        let x = Vector::from(vec![1.0]);
        let y = Vector::from(vec![1.0, 2.0]);
        assert!(matches!(
            vec_axpy(1.0, &x, &y),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn axpy_matches_scalar_arithmetic(
            alpha in -10.0f64..10.0,
            xs in proptest::collection::vec(-100.0f64..100.0, 1..16),
        ) {
            let ys: Vec<f64> = xs.iter().map(|v| v * 0.5 - 1.0).collect();
            let x = Vector::from(xs.clone());
            let y = Vector::from(ys.clone());
            let out = vec_axpy(alpha, &x, &y).unwrap();
            for i in 0..xs.len() {
                prop_assert_eq!(out[i], alpha * xs[i] + ys[i]);
            }
            // inputs untouched
            prop_assert_eq!(x.as_slice(), &xs[..]);
        }

        #[test]
        fn add_scaled_agrees_with_axpy(
            alpha in -5.0f64..5.0,
            xs in proptest::collection::vec(-50.0f64..50.0, 1..12),
        ) {
            let ys: Vec<f64> = xs.iter().rev().cloned().collect();
            let x = Vector::from(xs);
            let mut y = Vector::from(ys);
            let expect = vec_axpy(alpha, &x, &y).unwrap();
            y.add_scaled(alpha, &x).unwrap();
            prop_assert_eq!(y, expect);
        }
    }
}
