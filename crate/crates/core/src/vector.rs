//! Dense parameter vectors and the clipping primitive shared by clients and server.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense real vector of model dimension `d`.
///
/// Holds model parameters, gradients, momenta, and noise alike.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(self)
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.len() == d {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected: d, actual: self.len() })
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.iter().map(|v| v * s).collect())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.0.iter_mut().for_each(|v| *v *= s);
    }

    /// `self + other`
    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.len(), other.len());
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// `self - other`
    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.len(), other.len());
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Self) {
        debug_assert_eq!(self.len(), x.len());
        self.0.iter_mut().zip(&x.0).for_each(|(a, b)| *a += alpha * b);
    }

    pub fn distance(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl FromIterator<f64> for ParamVector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

pub fn l2_norm(v: &ParamVector) -> f64 {
    v.norm_sq().sqrt()
}

/// Projects `v` onto the L2 ball of radius `bound`: `v * min(1, bound / ||v||)`.
pub fn clip(v: &ParamVector, bound: f64) -> Result<ParamVector> {
    if !(bound > 0.0) || bound.is_nan() {
        return Err(Error::NonPositiveBound(bound));
    }
    if !v.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(clip_unchecked(v, bound))
}

/// Clipping without argument validation. `bound` may be `f64::INFINITY`.
pub(crate) fn clip_unchecked(v: &ParamVector, bound: f64) -> ParamVector {
    let norm = v.l2_norm();
    if norm <= bound {
        return v.clone();
    }
    // Rounding can leave the rescaled norm an ulp above the bound; nudge it back
    // so the closed predicate `norm <= bound` always accepts clipped vectors.
    let mut factor = bound / norm;
    loop {
        let out = v.scaled(factor);
        if out.l2_norm() <= bound {
            return out;
        }
        factor *= 1.0 - f64::EPSILON;
    }
}

/// Returns true when clipping at `bound` would rescale `v`.
pub(crate) fn exceeds(v: &ParamVector, bound: f64) -> bool {
    v.l2_norm() > bound
}

/// Coordinate-wise compensated (Neumaier) accumulator for summing vectors.
///
/// The result is insensitive to the order in which terms arrive, up to the
/// last bit in all but pathological cases.
#[derive(Debug, Clone)]
pub struct VectorSum {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl VectorSum {
    pub fn new(d: usize) -> Self {
        Self { sum: vec![0.0; d], comp: vec![0.0; d] }
    }

    pub fn add(&mut self, v: &ParamVector) {
        self.add_scaled(1.0, v);
    }

    pub fn add_scaled(&mut self, alpha: f64, v: &ParamVector) {
        debug_assert_eq!(v.len(), self.sum.len());
        for ((s, c), x) in self.sum.iter_mut().zip(self.comp.iter_mut()).zip(v.iter()) {
            let x = alpha * x;
            let t = *s + x;
            if s.abs() >= x.abs() {
                *c += (*s - t) + x;
            } else {
                *c += (x - t) + *s;
            }
            *s = t;
        }
    }

    pub fn finish(self) -> ParamVector {
        ParamVector(self.sum.into_iter().zip(self.comp).map(|(s, c)| s + c).collect())
    }
}

/// Compensated sum of an iterator of vectors of dimension `d`.
pub fn sum_vectors<'a, I>(d: usize, vectors: I) -> ParamVector
where
    I: IntoIterator<Item = &'a ParamVector>,
{
    let mut acc = VectorSum::new(d);
    for v in vectors {
        acc.add(v);
    }
    acc.finish()
}
