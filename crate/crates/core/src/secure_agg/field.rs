use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SharingError;

/// Field element: an integer in `[0, P)`.
pub type FieldElement = u64;

/// Arithmetic modulo a prime `P < 2^62`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct Field {
    modulus: u64,
}

impl Field {
    pub const MERSENNE_61: u64 = (1 << 61) - 1;

    pub fn new(modulus: u64) -> Result<Self, SharingError> {
        if modulus < 3 || modulus >= 1 << 62 || !is_prime(modulus) {
            return Err(SharingError::InvalidConfig(format!("modulus {modulus} is not a prime in [3, 2^62)")));
        }
        Ok(Self { modulus })
    }

    pub fn mersenne61() -> Self {
        Self { modulus: Self::MERSENNE_61 }
    }

    pub fn modulus(&self) -> u64 {
        self.modulus
    }

    pub fn reduce(&self, x: u64) -> FieldElement {
        x % self.modulus
    }

    /// Embeds a signed integer; negatives map to `P - |x|`.
    pub fn from_signed(&self, x: i128) -> FieldElement {
        x.rem_euclid(self.modulus as i128) as u64
    }

    /// Centered representative in `(-P/2, P/2]`.
    pub fn to_signed(&self, x: FieldElement) -> i128 {
        if x > self.modulus / 2 {
            x as i128 - self.modulus as i128
        } else {
            x as i128
        }
    }

    pub fn add(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        let s = a + b;
        if s >= self.modulus {
            s - self.modulus
        } else {
            s
        }
    }

    pub fn sub(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        if a >= b {
            a - b
        } else {
            a + self.modulus - b
        }
    }

    pub fn neg(&self, a: FieldElement) -> FieldElement {
        if a == 0 {
            0
        } else {
            self.modulus - a
        }
    }

    pub fn mul(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        ((a as u128 * b as u128) % self.modulus as u128) as u64
    }

    pub fn pow(&self, mut base: FieldElement, mut exp: u64) -> FieldElement {
        let mut acc = 1 % self.modulus;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            exp >>= 1;
        }
        acc
    }

    /// Multiplicative inverse; `None` for zero.
    pub fn inv(&self, a: FieldElement) -> Option<FieldElement> {
        (a != 0).then(|| self.pow(a, self.modulus - 2))
    }

    pub fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> FieldElement {
        rng.random_range(0..self.modulus)
    }
}

impl TryFrom<u64> for Field {
    type Error = SharingError;
    fn try_from(p: u64) -> Result<Self, SharingError> {
        Field::new(p)
    }
}

impl From<Field> for u64 {
    fn from(f: Field) -> u64 {
        f.modulus
    }
}

/// Deterministic Miller-Rabin for 64-bit inputs.
pub fn is_prime(n: u64) -> bool {
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    if n < 2 {
        return false;
    }
    for &p in &BASES {
        if n % p == 0 {
            return n == p;
        }
    }
    let mulmod = |a: u64, b: u64| ((a as u128 * b as u128) % n as u128) as u64;
    let powmod = |mut b: u64, mut e: u64| {
        let mut r = 1u64;
        while e > 0 {
            if e & 1 == 1 {
                r = mulmod(r, b);
            }
            b = mulmod(b, b);
            e >>= 1;
        }
        r
    };
    let s = (n - 1).trailing_zeros();
    let d = (n - 1) >> s;
    'outer: for &a in &BASES {
        let mut x = powmod(a, d);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mulmod(x, x);
            if x == n - 1 {
                continue 'outer;
            }
        }
        return false;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn primality() {
        let small: Vec<u64> = (0..100).filter(|&n| is_prime(n)).collect();
        assert_eq!(small, [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97]);
        assert!(is_prime(Field::MERSENNE_61));
        assert!(!is_prime((1 << 61) + 1));
        assert!(Field::new(91).is_err());
        assert!(Field::new(257).is_ok());
    }

    #[test]
    fn signed_embedding() {
        let f = Field::new(257).unwrap();
        assert_eq!(f.from_signed(-1), 256);
        assert_eq!(f.to_signed(256), -1);
        assert_eq!(f.to_signed(128), 128);
        assert_eq!(f.to_signed(129), -128);
    }

    proptest! {
        #[test]
        fn field_laws(a in 0u64..Field::MERSENNE_61, b in 0u64..Field::MERSENNE_61, c in 0u64..Field::MERSENNE_61) {
            let f = Field::mersenne61();
            prop_assert_eq!(f.sub(f.add(a, b), b), a);
            prop_assert_eq!(f.add(a, f.neg(a)), 0);
            prop_assert_eq!(f.mul(a, f.add(b, c)), f.add(f.mul(a, b), f.mul(a, c)));
            if a != 0 {
                prop_assert_eq!(f.mul(a, f.inv(a).unwrap()), 1);
            }
        }
    }
}
