use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::RngCore;

use super::field::FieldElement;
use super::fixed_point::FixedPoint;
use super::shamir::{share_with_rng, Reconstructor, Share};
use super::{SharingConfig, SharingError};

/// Operations on secret-shared values that cannot be done locally.
///
/// Inputs are the shares as received from the holders (possibly incomplete or
/// wrong); outputs are fresh sharings at all `n` points.
pub trait MpcBackend: Send + Sync {
    fn config(&self) -> &SharingConfig;

    /// Shares of the exact field product `a * b`.
    fn mul(&self, a: &[Share], b: &[Share], rng: &mut dyn RngCore) -> Result<Vec<Share>, SharingError>;

    /// Reveals a single bit: whether the signed value of `a` is at most `bound`.
    fn reveal_le(&self, a: &[Share], bound: i128) -> Result<bool, SharingError>;

    /// Shares of the fixed-point fraction whose `l` bits are the XOR of the
    /// low `l` bits of every contribution.
    fn xor_fraction(
        &self,
        contributions: &[Vec<Share>],
        l: u32,
        codec: &FixedPoint,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Share>, SharingError>;

    /// Shares of `scale * sqrt(-2 ln u) * (cos 2 pi v, sin 2 pi v)`, where
    /// `u = 0` is read as `2^-l`.
    fn box_muller(
        &self,
        u: &[Share],
        v: &[Share],
        l: u32,
        scale: f64,
        codec: &FixedPoint,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<Share>, Vec<Share>), SharingError>;
}

/// Functional stand-in for an MPC engine: it robustly reconstructs its
/// inputs, evaluates in the clear, and re-shares the result. It is correct,
/// not private.
#[derive(Debug)]
pub struct SimulatedBackend {
    cfg: SharingConfig,
    cache: Mutex<HashMap<Vec<u32>, Arc<Reconstructor>>>,
}

impl SimulatedBackend {
    pub fn new(cfg: SharingConfig) -> Self {
        Self { cfg, cache: Mutex::new(HashMap::new()) }
    }

    fn open(&self, shares: &[Share]) -> Result<FieldElement, SharingError> {
        let points: Vec<u32> = shares.iter().map(|s| s.point).collect();
        let rec = {
            let mut cache = self.cache.lock().expect("reconstructor cache poisoned");
            match cache.get(&points) {
                Some(r) => Arc::clone(r),
                None => {
                    let r = Arc::new(Reconstructor::new(&self.cfg, &points)?);
                    cache.insert(points, Arc::clone(&r));
                    r
                }
            }
        };
        let values: Vec<u64> = shares.iter().map(|s| s.value).collect();
        rec.reconstruct(&values)
    }

    fn reshare(&self, value: FieldElement, rng: &mut dyn RngCore) -> Vec<Share> {
        share_with_rng(value, &self.cfg, rng)
    }
}

impl MpcBackend for SimulatedBackend {
    fn config(&self) -> &SharingConfig {
        &self.cfg
    }

    fn mul(&self, a: &[Share], b: &[Share], rng: &mut dyn RngCore) -> Result<Vec<Share>, SharingError> {
        let f = self.cfg.field();
        let prod = f.mul(self.open(a)?, self.open(b)?);
        Ok(self.reshare(prod, rng))
    }

    fn reveal_le(&self, a: &[Share], bound: i128) -> Result<bool, SharingError> {
        Ok(self.cfg.field().to_signed(self.open(a)?) <= bound)
    }

    fn xor_fraction(
        &self,
        contributions: &[Vec<Share>],
        l: u32,
        codec: &FixedPoint,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Share>, SharingError> {
        if l > codec.frac_bits || l >= 63 {
            return Err(SharingError::InvalidConfig(format!("uniform bits {l} exceed fractional bits {}", codec.frac_bits)));
        }
        let mask = (1u64 << l) - 1;
        let mut bits = 0u64;
        for c in contributions {
            bits ^= self.open(c)? & mask;
        }
        let raw = bits << (codec.frac_bits - l);
        Ok(self.reshare(codec.field.reduce(raw), rng))
    }

    fn box_muller(
        &self,
        u: &[Share],
        v: &[Share],
        l: u32,
        scale: f64,
        codec: &FixedPoint,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<Share>, Vec<Share>), SharingError> {
        let mut u = codec.decode(self.open(u)?);
        let v = codec.decode(self.open(v)?);
        if u <= 0.0 {
            u = (-(l as f64)).exp2();
        }
        let r = (-2.0 * u.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * v).sin_cos();
        let a = codec.encode(scale * r * c)?;
        let b = codec.encode(scale * r * s)?;
        Ok((self.reshare(a, rng), self.reshare(b, rng)))
    }
}
