//! Shamir t-of-n sharing at evaluation points `1..=n`, with Reed-Solomon
//! (Gao) decoding for shares that may be wrong or missing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::field::{Field, FieldElement};
use super::poly;
use super::{SharingConfig, SharingError};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Share {
    /// Evaluation point in `1..=n`; holder `j` (0-based) holds point `j + 1`.
    pub point: u32,
    pub value: FieldElement,
}

pub fn share(secret: FieldElement, cfg: &SharingConfig, stream: &RngStream) -> Vec<Share> {
    share_with_rng(secret, cfg, &mut stream.rng())
}

pub(crate) fn share_with_rng<R: Rng + ?Sized>(secret: FieldElement, cfg: &SharingConfig, rng: &mut R) -> Vec<Share> {
    let f = cfg.field();
    let mut coeffs = Vec::with_capacity(cfg.t());
    coeffs.push(f.reduce(secret));
    for _ in 1..cfg.t() {
        coeffs.push(f.random(rng));
    }
    (1..=cfg.n() as u32)
        .map(|point| Share { point, value: poly::eval(&f, &coeffs, point as u64) })
        .collect()
}

fn check_points(shares: &[Share], cfg: &SharingConfig) -> Result<(), SharingError> {
    let mut seen = vec![false; cfg.n() + 1];
    for s in shares {
        let p = s.point as usize;
        if p == 0 || p > cfg.n() {
            return Err(SharingError::PointOutOfRange(s.point));
        }
        if std::mem::replace(&mut seen[p], true) {
            return Err(SharingError::DuplicatePoint(s.point));
        }
    }
    Ok(())
}

/// Lagrange weights for evaluating at `at` from values at `xs`.
fn lagrange_weights(f: &Field, xs: &[FieldElement], at: FieldElement) -> Vec<FieldElement> {
    xs.iter()
        .enumerate()
        .map(|(i, &xi)| {
            let (mut num, mut den) = (1, 1);
            for (j, &xj) in xs.iter().enumerate() {
                if i != j {
                    num = f.mul(num, f.sub(at, xj));
                    den = f.mul(den, f.sub(xi, xj));
                }
            }
            f.mul(num, f.inv(den).expect("distinct points"))
        })
        .collect()
}

fn dot(f: &Field, w: &[FieldElement], v: &[FieldElement]) -> FieldElement {
    w.iter().zip(v).fold(0, |acc, (&a, &b)| f.add(acc, f.mul(a, b)))
}

/// Plain Lagrange interpolation at zero through every supplied share.
/// Assumes the shares are error-free.
pub fn reconstruct(shares: &[Share], cfg: &SharingConfig) -> Result<FieldElement, SharingError> {
    check_points(shares, cfg)?;
    if shares.len() < cfg.t() {
        return Err(SharingError::TooFewShares { needed: cfg.t(), got: shares.len() });
    }
    let f = cfg.field();
    let xs: Vec<u64> = shares.iter().map(|s| s.point as u64).collect();
    let ys: Vec<u64> = shares.iter().map(|s| s.value).collect();
    Ok(dot(&f, &lagrange_weights(&f, &xs, 0), &ys))
}

/// Reconstruction tolerating up to `(m - t) / 2` wrong values among the `m`
/// shares received. Fails with [`SharingError::DecodingFailure`] rather than
/// returning a value inconsistent with the received shares.
pub fn robust_reconstruct(shares: &[Share], cfg: &SharingConfig) -> Result<FieldElement, SharingError> {
    check_points(shares, cfg)?;
    let points: Vec<u32> = shares.iter().map(|s| s.point).collect();
    let values: Vec<u64> = shares.iter().map(|s| s.value).collect();
    Reconstructor::new(cfg, &points)?.reconstruct(&values)
}

/// Robust reconstruction for a fixed set of received points.
///
/// Interpolates from the first `t` points and checks the rest against that
/// polynomial; only when some check fails does it fall back to Gao decoding.
/// Reusing one instance across many secrets with the same dropout pattern
/// amortizes the weight computation.
#[derive(Debug, Clone)]
pub struct Reconstructor {
    field: Field,
    t: usize,
    xs: Vec<FieldElement>,
    at_zero: Vec<FieldElement>,
    extend: Vec<Vec<FieldElement>>,
}

impl Reconstructor {
    pub fn new(cfg: &SharingConfig, points: &[u32]) -> Result<Self, SharingError> {
        let dummy: Vec<Share> = points.iter().map(|&point| Share { point, value: 0 }).collect();
        check_points(&dummy, cfg)?;
        if points.len() < cfg.t() {
            return Err(SharingError::TooFewShares { needed: cfg.t(), got: points.len() });
        }
        let f = cfg.field();
        let t = cfg.t();
        let xs: Vec<u64> = points.iter().map(|&p| p as u64).collect();
        let at_zero = lagrange_weights(&f, &xs[..t], 0);
        let extend = xs[t..].iter().map(|&x| lagrange_weights(&f, &xs[..t], x)).collect();
        Ok(Self { field: f, t, xs, at_zero, extend })
    }

    pub fn points(&self) -> impl Iterator<Item = u32> + '_ {
        self.xs.iter().map(|&x| x as u32)
    }

    /// Most wrong values this point set can absorb.
    pub fn max_errors(&self) -> usize {
        (self.xs.len() - self.t) / 2
    }

    /// `values[i]` is the share received at the `i`-th point given to `new`.
    pub fn reconstruct(&self, values: &[FieldElement]) -> Result<FieldElement, SharingError> {
        if values.len() != self.xs.len() {
            return Err(SharingError::DimensionMismatch { expected: self.xs.len(), actual: values.len() });
        }
        let f = &self.field;
        let head = &values[..self.t];
        let consistent = self.extend.iter().zip(&values[self.t..]).all(|(w, &y)| dot(f, w, head) == y);
        if consistent {
            return Ok(dot(f, &self.at_zero, head));
        }
        let p = gao_decode(f, &self.xs, values, self.t)?;
        Ok(p.first().copied().unwrap_or(0))
    }
}

/// Gao's Reed-Solomon decoder: recovers the polynomial of degree `< k` that
/// agrees with all but at most `(m - k) / 2` of the `m` received points.
pub(crate) fn gao_decode(f: &Field, xs: &[FieldElement], ys: &[FieldElement], k: usize) -> Result<poly::Poly, SharingError> {
    let m = xs.len();
    if m < k {
        return Err(SharingError::TooFewShares { needed: k, got: m });
    }
    let g0 = poly::from_roots(f, xs);
    let g1 = poly::interpolate(f, xs, ys);
    // Partial extended Euclid on (g0, g1) tracking only the g1 cofactor.
    let (mut r_prev, mut r) = (g0, g1);
    let (mut v_prev, mut v): (poly::Poly, poly::Poly) = (Vec::new(), vec![1]);
    while poly::degree(&r).is_some_and(|d| 2 * d >= m + k) {
        let (q, rem) = poly::divrem(f, &r_prev, &r);
        let v_next = poly::sub(f, &v_prev, &poly::mul(f, &q, &v));
        r_prev = std::mem::replace(&mut r, rem);
        v_prev = std::mem::replace(&mut v, v_next);
    }
    if poly::degree(&v).is_none() {
        return Err(SharingError::DecodingFailure);
    }
    let (msg, rem) = poly::divrem(f, &r, &v);
    if !rem.is_empty() || msg.len() > k {
        return Err(SharingError::DecodingFailure);
    }
    let mismatches = xs.iter().zip(ys).filter(|&(&x, &y)| poly::eval(f, &msg, x) != y).count();
    if mismatches > (m - k) / 2 {
        return Err(SharingError::DecodingFailure);
    }
    Ok(msg)
}
