//! Hierarchical, seedable random streams.
//!
//! A stream is a 256-bit seed. Children are derived by hashing the parent
//! seed with a length-prefixed label, so `derive("a").derive("b")` and
//! `derive("ab")` never collide. Drawing from a stream always starts from the
//! same generator state: two draws from the same stream return the same
//! values, and callers derive a fresh child per purpose.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::vector::ParamVector;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: [u8; 32],
    depth: u32,
}

impl RngStream {
    /// Root stream for an experiment seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"dpbrem-root");
        h.update(seed.to_le_bytes());
        Self { seed: h.finalize().into(), depth: 0 }
    }

    pub fn from_bytes(seed: [u8; 32]) -> Self {
        Self { seed, depth: 0 }
    }

    pub fn seed_bytes(&self) -> &[u8; 32] {
        &self.seed
    }

    /// Number of derivation steps from the root.
    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn derive(&self, label: impl AsRef<[u8]>) -> Self {
        let label = label.as_ref();
        let mut h = Sha256::new();
        h.update(self.seed);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label);
        Self { seed: h.finalize().into(), depth: self.depth + 1 }
    }

    /// Child labelled by a tag and an index, e.g. `("client", 3)`.
    pub fn derive_indexed(&self, tag: &str, index: u64) -> Self {
        self.derive(tag).derive(index.to_le_bytes())
    }

    /// A generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha20Rng {
        ChaCha20Rng::from_seed(self.seed)
    }

    /// First 64 bits of output, handy for seeding foreign generators.
    pub fn next_u64(&self) -> u64 {
        self.rng().random()
    }
}

/// Derives a 64-bit seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    RngStream::from_seed(seed).derive(label).next_u64()
}

/// Uniform draw in (0, 1]; never returns zero so it is safe under `ln`.
pub(crate) fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    ((rng.random::<u64>() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

/// Fills `out` with independent standard normals using the Box-Muller transform.
pub(crate) fn fill_standard_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    let mut chunks = out.chunks_mut(2);
    for pair in &mut chunks {
        let u = open_unit(rng);
        let v: f64 = rng.random();
        let r = (-2.0 * u.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * v).sin_cos();
        pair[0] = r * c;
        if pair.len() > 1 {
            pair[1] = r * s;
        }
    }
}

/// `d` independent draws from `N(0, stddev^2)`; `stddev = 0` gives the zero vector.
pub fn gaussian_vector(stream: &RngStream, d: usize, stddev: f64) -> ParamVector {
    assert!(stddev >= 0.0, "stddev must be nonnegative");
    if stddev == 0.0 {
        return ParamVector::zeros(d);
    }
    let mut out = vec![0.0; d];
    fill_standard_normal(&mut stream.rng(), &mut out);
    out.iter_mut().for_each(|x| *x *= stddev);
    ParamVector::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_deterministic() {
        let s = RngStream::from_seed(7);
        assert_eq!(s.derive("round/1/client/3"), s.derive("round/1/client/3"));
        assert_eq!(s.derive("x").next_u64(), s.derive("x").next_u64());
    }

    #[test]
    fn sibling_streams_differ() {
        let s = RngStream::from_seed(7);
        assert_ne!(s.derive("a").next_u64(), s.derive("b").next_u64());
    }

    #[test]
    fn path_encoding_is_unambiguous() {
        let s = RngStream::from_seed(7);
        assert_ne!(s.derive("a").derive("b"), s.derive("ab"));
        assert_ne!(s.derive("a").derive("b").next_u64(), s.derive("ab").next_u64());
    }

    #[test]
    fn zero_stddev_is_zero_vector() {
        let v = gaussian_vector(&RngStream::from_seed(1), 5, 0.0);
        assert_eq!(v.as_slice(), &[0.0; 5]);
    }

    #[test]
    fn gaussian_vector_moments() {
        let n = 100_000;
        let v = gaussian_vector(&RngStream::from_seed(11), n, 1.0);
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn gaussian_vector_is_deterministic_and_odd_lengths_work() {
        let s = RngStream::from_seed(5);
        assert_eq!(gaussian_vector(&s, 7, 2.0), gaussian_vector(&s, 7, 2.0));
        assert!(gaussian_vector(&s, 7, 2.0).is_finite());
    }
}
