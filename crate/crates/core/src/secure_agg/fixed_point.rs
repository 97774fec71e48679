use serde::{Deserialize, Serialize};

use super::field::{Field, FieldElement};
use super::SharingError;

/// Fixed-point codec: `x -> round(x * 2^f)` embedded in the field.
///
/// `terms` is the largest number of encoded values that will ever be summed;
/// raw magnitudes are kept below `P / (2 * terms)` so sums never wrap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub field: Field,
    pub frac_bits: u32,
    pub terms: usize,
}

impl FixedPoint {
    pub fn new(field: Field, frac_bits: u32, terms: usize) -> Result<Self, SharingError> {
        if frac_bits > 40 || terms == 0 {
            return Err(SharingError::InvalidConfig(format!("fixed point with {frac_bits} fractional bits over {terms} terms")));
        }
        Ok(Self { field, frac_bits, terms })
    }

    pub fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    /// Largest admissible raw magnitude (exclusive).
    pub fn raw_bound(&self) -> i128 {
        (self.field.modulus() / (2 * self.terms as u64)) as i128
    }

    pub fn to_raw(&self, x: f64) -> Result<i128, SharingError> {
        let r = (x * self.scale()).round();
        if !r.is_finite() || r.abs() >= self.raw_bound() as f64 {
            return Err(SharingError::FixedPointOverflow(x));
        }
        Ok(r as i128)
    }

    pub fn encode(&self, x: f64) -> Result<FieldElement, SharingError> {
        Ok(self.field.from_signed(self.to_raw(x)?))
    }

    pub fn raw(&self, v: FieldElement) -> i128 {
        self.field.to_signed(v)
    }

    pub fn decode(&self, v: FieldElement) -> f64 {
        self.raw(v) as f64 / self.scale()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn codec() -> FixedPoint {
        FixedPoint::new(Field::mersenne61(), 16, 16).unwrap()
    }

    #[test]
    fn zero_and_negatives() {
        let c = codec();
        assert_eq!(c.encode(0.0).unwrap(), 0);
        assert_eq!(c.encode(-1.0).unwrap(), Field::MERSENNE_61 - 65536);
        assert_eq!(c.decode(c.encode(-1.0).unwrap()), -1.0);
    }

    #[test]
    fn overflow_is_rejected() {
        let c = FixedPoint::new(Field::new(257).unwrap(), 2, 4).unwrap();
        // raw bound 257 / 8 = 32, so |x| * 4 must stay below 32.
        assert!(c.encode(7.75).is_ok());
        assert_eq!(c.encode(8.0), Err(SharingError::FixedPointOverflow(8.0)));
        assert!(codec().encode(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(x in -100.0f64..100.0) {
            let c = codec();
            prop_assert!((c.decode(c.encode(x).unwrap()) - x).abs() <= 1.0 / 65536.0);
        }

        #[test]
        fn additive(a in -100.0f64..100.0, b in -100.0f64..100.0) {
            let c = codec();
            let s = c.field.add(c.encode(a).unwrap(), c.encode(b).unwrap());
            prop_assert!((c.decode(s) - (a + b)).abs() <= 2.0 / 65536.0);
        }
    }
}
