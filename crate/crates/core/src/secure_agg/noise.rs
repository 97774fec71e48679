//! Joint generation of shared Gaussian noise from per-party random bits.

use rand::{Rng, RngCore};

use super::backend::MpcBackend;
use super::fixed_point::FixedPoint;
use super::shamir::Share;
use super::SharingError;

/// One party's `l`-bit contribution.
pub fn party_bits<R: Rng + ?Sized>(rng: &mut R, l: u32) -> u64 {
    rng.random::<u64>() & ((1u64 << l) - 1)
}

/// Shared uniform on the grid `{k 2^-l}` from XOR-combined contributions.
/// Uniform whenever at least one contribution is uniform and independent of the rest.
pub fn joint_uniform(
    contributions: &[Vec<Share>],
    l: u32,
    codec: &FixedPoint,
    backend: &dyn MpcBackend,
    rng: &mut dyn RngCore,
) -> Result<Vec<Share>, SharingError> {
    if l == 0 || l > codec.frac_bits {
        return Err(SharingError::InvalidConfig(format!("need 0 < l <= {} uniform bits, got {l}", codec.frac_bits)));
    }
    if contributions.is_empty() {
        return Err(SharingError::InvalidConfig("no contributions to the joint uniform".into()));
    }
    backend.xor_fraction(contributions, l, codec, rng)
}

/// Shares of a pair of independent `N(0, scale^2)` draws.
pub fn box_muller_shared(
    u: &[Share],
    v: &[Share],
    l: u32,
    scale: f64,
    codec: &FixedPoint,
    backend: &dyn MpcBackend,
    rng: &mut dyn RngCore,
) -> Result<(Vec<Share>, Vec<Share>), SharingError> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(SharingError::InvalidConfig(format!("noise scale {scale}")));
    }
    backend.box_muller(u, v, l, scale, codec, rng)
}
