//! Dense polynomials over a prime field, lowest coefficient first.
//! The zero polynomial is the empty vector.

use super::field::{Field, FieldElement};

pub(crate) type Poly = Vec<FieldElement>;

pub(crate) fn trim(mut p: Poly) -> Poly {
    while p.last() == Some(&0) {
        p.pop();
    }
    p
}

pub(crate) fn degree(p: &[FieldElement]) -> Option<usize> {
    p.iter().rposition(|&c| c != 0)
}

pub(crate) fn eval(f: &Field, p: &[FieldElement], x: FieldElement) -> FieldElement {
    p.iter().rev().fold(0, |acc, &c| f.add(f.mul(acc, x), c))
}

pub(crate) fn sub(f: &Field, a: &[FieldElement], b: &[FieldElement]) -> Poly {
    let mut out = vec![0; a.len().max(b.len())];
    for (i, o) in out.iter_mut().enumerate() {
        *o = f.sub(a.get(i).copied().unwrap_or(0), b.get(i).copied().unwrap_or(0));
    }
    trim(out)
}

pub(crate) fn mul(f: &Field, a: &[FieldElement], b: &[FieldElement]) -> Poly {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            out[i + j] = f.add(out[i + j], f.mul(x, y));
        }
    }
    trim(out)
}

/// Quotient and remainder; panics on division by zero.
pub(crate) fn divrem(f: &Field, a: &[FieldElement], b: &[FieldElement]) -> (Poly, Poly) {
    let db = degree(b).expect("division by the zero polynomial");
    let lead_inv = f.inv(b[db]).expect("nonzero leading coefficient");
    let mut rem = trim(a.to_vec());
    let Some(da) = degree(&rem) else {
        return (Vec::new(), Vec::new());
    };
    if da < db {
        return (Vec::new(), rem);
    }
    let mut quot = vec![0; da - db + 1];
    for k in (0..=da - db).rev() {
        let c = f.mul(rem[k + db], lead_inv);
        quot[k] = c;
        if c == 0 {
            continue;
        }
        for (j, &bj) in b[..=db].iter().enumerate() {
            rem[k + j] = f.sub(rem[k + j], f.mul(c, bj));
        }
    }
    rem.truncate(db);
    (trim(quot), trim(rem))
}

/// `prod (x - r)` over the given roots.
pub(crate) fn from_roots(f: &Field, roots: &[FieldElement]) -> Poly {
    let mut p = vec![1];
    for &r in roots {
        let mut next = vec![0; p.len() + 1];
        for (i, &c) in p.iter().enumerate() {
            next[i + 1] = f.add(next[i + 1], c);
            next[i] = f.sub(next[i], f.mul(c, r));
        }
        p = next;
    }
    p
}

/// Divides by the monic linear factor `(x - r)`, discarding the remainder.
fn div_linear(f: &Field, p: &[FieldElement], r: FieldElement) -> Poly {
    let n = p.len();
    if n < 2 {
        return Vec::new();
    }
    let mut out = vec![0; n - 1];
    let mut carry = 0;
    for i in (1..n).rev() {
        carry = f.add(p[i], f.mul(carry, r));
        out[i - 1] = carry;
    }
    out
}

/// Lagrange interpolation through distinct points, returned in coefficient form.
pub(crate) fn interpolate(f: &Field, xs: &[FieldElement], ys: &[FieldElement]) -> Poly {
    let full = from_roots(f, xs);
    let mut out = vec![0; xs.len()];
    for (i, (&xi, &yi)) in xs.iter().zip(ys).enumerate() {
        if yi == 0 {
            continue;
        }
        let denom = xs
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .fold(1, |acc, (_, &xj)| f.mul(acc, f.sub(xi, xj)));
        let w = f.mul(yi, f.inv(denom).expect("distinct points"));
        for (o, c) in out.iter_mut().zip(div_linear(f, &full, xi)) {
            *o = f.add(*o, f.mul(w, c));
        }
    }
    trim(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divrem_identity() {
        let f = Field::new(257).unwrap();
        let a = vec![5, 0, 3, 7, 1];
        let b = vec![2, 9, 4];
        let (q, r) = divrem(&f, &a, &b);
        let back = {
            let qb = mul(&f, &q, &b);
            let mut s = vec![0; qb.len().max(r.len())];
            for (i, v) in s.iter_mut().enumerate() {
                *v = f.add(qb.get(i).copied().unwrap_or(0), r.get(i).copied().unwrap_or(0));
            }
            trim(s)
        };
        assert_eq!(back, a);
        assert!(degree(&r).map_or(true, |d| d < 2));
    }

    #[test]
    fn interpolation_recovers_polynomial() {
        let f = Field::new(97).unwrap();
        let p = vec![11, 0, 42, 3];
        let xs: Vec<u64> = (1..=6).collect();
        let ys: Vec<u64> = xs.iter().map(|&x| eval(&f, &p, x)).collect();
        assert_eq!(interpolate(&f, &xs, &ys), p);
        assert_eq!(interpolate(&f, &xs[..4], &ys[..4]), p);
    }

    #[test]
    fn roots_vanish() {
        let f = Field::new(97).unwrap();
        let p = from_roots(&f, &[3, 8, 50]);
        assert_eq!(p.len(), 4);
        for r in [3, 8, 50] {
            assert_eq!(eval(&f, &p, r), 0);
        }
    }
}
