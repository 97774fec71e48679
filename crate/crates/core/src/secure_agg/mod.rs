//! Functional model of secure aggregation with verified inputs and jointly
//! generated Gaussian noise over Shamir shares in a prime field.

mod backend;
mod field;
mod fixed_point;
mod noise;
mod poly;
mod round;
mod shamir;

use serde::{Deserialize, Serialize};

pub use backend::{MpcBackend, SimulatedBackend};
pub use field::{is_prime, Field, FieldElement};
pub use fixed_point::FixedPoint;
pub use noise::{box_muller_shared, joint_uniform, party_bits};
pub use round::{
    secure_noisy_round, squared_norm_threshold, validate_input, validate_input_shared, Behavior, Channel,
    PerfectChannel, SecureParams, SecureRoundOutput, TranscriptEntry,
};
pub use shamir::{reconstruct, robust_reconstruct, share, Reconstructor, Share};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SharingError {
    #[error("invalid sharing configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least {needed} shares, got {got}")]
    TooFewShares { needed: usize, got: usize },
    #[error("duplicate evaluation point {0}")]
    DuplicatePoint(u32),
    #[error("evaluation point {0} outside 1..=n")]
    PointOutOfRange(u32),
    #[error("share decoding failed")]
    DecodingFailure,
    #[error("{0} does not fit the fixed-point range")]
    FixedPointOverflow(f64),
    #[error("{errors} corrupt holders and {erasures} dropouts exceed what reconstruction can absorb")]
    BoundExceeded { errors: usize, erasures: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// `t`-of-`n` Shamir parameters over a prime field; shares live at points `1..=n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SharingConfig {
    n: usize,
    t: usize,
    field: Field,
}

impl SharingConfig {
    pub fn new(n: usize, t: usize, modulus: u64) -> Result<Self, SharingError> {
        let field = Field::new(modulus)?;
        if t == 0 || t > n || n as u64 >= modulus {
            return Err(SharingError::InvalidConfig(format!("need 1 <= t <= n < P, got t={t} n={n} P={modulus}")));
        }
        Ok(Self { n, t, field })
    }

    /// Threshold `ceil(fraction * n)`, clamped to `1..=n`.
    pub fn with_threshold_fraction(n: usize, fraction: f64, modulus: u64) -> Result<Self, SharingError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(SharingError::InvalidConfig(format!("threshold fraction {fraction} not in (0, 1]")));
        }
        let t = ((fraction * n as f64).ceil() as usize).clamp(1, n.max(1));
        Self::new(n, t, modulus)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn field(&self) -> Field {
        self.field
    }

    /// Whether `errors` wrong and `erasures` missing shares can be decoded.
    pub fn decodable(&self, errors: usize, erasures: usize) -> bool {
        2 * errors + erasures < self.n - self.t + 1
    }
}
