//! Brute-force verification suites behind `dpbrem verify`.
//!
//! Each check reports the observed value next to its bound.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::accountant::{gdp_mu, solve_epsilon, std_normal_cdf, PrivacyConfig};
use crate::error::{Error, Result};
use crate::data::Record;
use crate::learner::{fd_gradient_oracle, init_model, per_record_grad, per_record_grad_unchecked, ModelSpec};
use crate::protocol::momentum_step;
use crate::rng::RngStream;
use crate::secure_agg::{
    reconstruct, robust_reconstruct, secure_noisy_round, share, Behavior, Field, SecureParams, SharingConfig,
    SimulatedBackend,
};
use crate::vector::{clip_unchecked, ParamVector};

pub const SUITES: [&str; 7] = ["clipping", "sensitivity", "gradients", "momentum", "shamir", "accountant", "secure"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub observed: f64,
    pub bound: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `observed <= bound`.
    pub fn at_most(name: impl Into<String>, observed: f64, bound: f64) -> Self {
        Self { name: name.into(), observed, bound, pass: observed <= bound }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = if c.pass { "PASS" } else { "FAIL" };
            writeln!(f, "[{tag}] {}/{}: observed {:.6e}, bound {:.6e}", self.suite, c.name, c.observed, c.bound)?;
        }
        Ok(())
    }
}

pub fn run_suite(name: &str) -> Result<SuiteReport> {
    match name {
        "clipping" => Ok(clipping_suite(100_000, 1, clip_unchecked)),
        "sensitivity" => sensitivity_suite(),
        "gradients" => gradients_suite(100, 2),
        "momentum" => Ok(momentum_suite(100, 50, 3)),
        "shamir" => shamir_suite(100, 4),
        "accountant" => accountant_suite(),
        "secure" => secure_suite(200, 100_000, 5),
        other => Err(Error::InvalidArgument(format!("unknown suite {other:?}; expected one of {SUITES:?} or all"))),
    }
}

/// `||clip(x, C) - clip(x + delta, C)|| <= min(2C, ||delta||)` on random
/// triples with `d` in `1..=64`, for the given clipping function.
pub fn clipping_suite(trials: usize, seed: u64, clip: fn(&ParamVector, f64) -> ParamVector) -> SuiteReport {
    let mut rng = RngStream::from_seed(seed).derive("clipping").rng();
    let mut violations = 0usize;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_norm = 0.0f64;
    for _ in 0..trials {
        let d = rng.random_range(1..=64);
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let xs = c * 10f64.powf(rng.random_range(-2.0..2.0));
        let ds = c * 10f64.powf(rng.random_range(-4.0..2.0));
        let x: ParamVector = (0..d).map(|_| rng.random_range(-1.0..1.0) * xs).collect();
        let delta: ParamVector = (0..d).map(|_| rng.random_range(-1.0..1.0) * ds).collect();
        let a = clip(&x, c);
        let b = clip(&x.add(&delta), c);
        let excess = a.distance(&b) - (2.0 * c).min(delta.l2_norm());
        worst_excess = worst_excess.max(excess);
        if excess > 1e-9 {
            violations += 1;
        }
        worst_norm = worst_norm.max(a.l2_norm() / c);
    }
    SuiteReport {
        suite: "clipping".into(),
        checks: vec![
            Check::at_most("distance_bound_violations", violations as f64, 0.0),
            Check::at_most("distance_bound_max_excess", worst_excess, 1e-9),
            Check::at_most("clipped_norm_over_bound", worst_norm, 1.0),
        ],
    }
}

/// Largest `||Q_t(D) - Q_t(D')||` over all batch sequences and all neighbors
/// obtained by removing one record, on a five-record client over three
/// rounds; `Q_t = clip(m_t - m~_{t-1}, C)` with the model path and previous
/// global momenta held fixed. Returns `(max distance, sensitivity bound)`.
pub fn sensitivity_case(record_bound: f64, client_bound: f64, seed: u64) -> (f64, f64) {
    const N: usize = 5;
    const T: usize = 3;
    let p = 0.5;
    let beta = 0.9;
    let spec = ModelSpec::LogisticRegression { d_in: 3, classes: 2 };
    let stream = RngStream::from_seed(seed).derive("sensitivity");
    let mut rng = stream.rng();
    let records: Vec<Record> = (0..N)
        .map(|_| Record { features: (0..3).map(|_| rng.random_range(-4.0..4.0)).collect(), label: rng.random_range(0..2) })
        .collect();
    let dim = spec.param_count();
    let thetas: Vec<ParamVector> = (0..T).map(|t| init_model(&spec, &stream.derive_indexed("theta", t as u64)).scaled(3.0)).collect();
    let centers: Vec<ParamVector> =
        (0..T).map(|_| (0..dim).map(|_| rng.random_range(-0.5..0.5) * record_bound).collect()).collect();
    let scale = 1.0 / (p * N as f64);
    // Per-round clipped gradients, already divided by p * n.
    let grads: Vec<Vec<ParamVector>> = thetas
        .iter()
        .map(|th| records.iter().map(|r| clip_unchecked(&per_record_grad_unchecked(th, r, &spec), record_bound).scaled(scale)).collect())
        .collect();
    let batch_grad = |t: usize, mask: usize, skip: Option<usize>| {
        let mut g = ParamVector::zeros(dim);
        for j in (0..N).filter(|&j| mask >> j & 1 == 1 && Some(j) != skip) {
            g.axpy(1.0, &grads[t][j]);
        }
        g
    };
    let mut worst = 0.0f64;
    let masks = 1usize << N;
    for seq in 0..masks.pow(T as u32) {
        let batches: Vec<usize> = (0..T).map(|t| seq / masks.pow(t as u32) % masks).collect();
        for j in 0..N {
            let (mut m, mut m2): (Option<ParamVector>, Option<ParamVector>) = (None, None);
            for t in 0..T {
                m = Some(momentum_step(m.as_ref(), &batch_grad(t, batches[t], None), beta));
                m2 = Some(momentum_step(m2.as_ref(), &batch_grad(t, batches[t], Some(j)), beta));
                let q = clip_unchecked(&m.as_ref().unwrap().sub(&centers[t]), client_bound);
                let q2 = clip_unchecked(&m2.as_ref().unwrap().sub(&centers[t]), client_bound);
                worst = worst.max(q.distance(&q2));
            }
        }
    }
    (worst, (2.0 * client_bound).min(record_bound * scale))
}

pub fn sensitivity_suite() -> Result<SuiteReport> {
    let mut checks = Vec::new();
    // p * n = 2.5: (R, C) = (1, 0.05) puts 2C = 0.1 below R / (p n) = 0.4;
    // (0.1, 10) puts R / (p n) = 0.04 below 2C = 20.
    for (label, r, c) in [("small_c", 1.0, 0.05), ("small_r", 0.1, 10.0), ("balanced", 0.5, 0.1)] {
        let (observed, bound) = sensitivity_case(r, c, 7);
        checks.push(Check::at_most(format!("{label}_max_distance"), observed, bound + 1e-9));
        checks.push(Check::at_most(format!("{label}_ratio_to_bound"), observed / bound, 1.0 + 1e-9));
    }
    Ok(SuiteReport { suite: "sensitivity".into(), checks })
}

/// Analytic per-record gradients against central finite differences.
pub fn gradients_suite(pairs: usize, seed: u64) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    let stream = RngStream::from_seed(seed).derive("gradients");
    let mut rng = stream.rng();
    for spec in [ModelSpec::LogisticRegression { d_in: 6, classes: 4 }, ModelSpec::Mlp { d_in: 6, hidden: 8, classes: 4 }] {
        let mut worst = 0.0f64;
        for k in 0..pairs {
            let theta = init_model(&spec, &stream.derive_indexed("theta", k as u64));
            let r = Record { features: (0..6).map(|_| rng.random_range(-2.0..2.0)).collect(), label: rng.random_range(0..4) };
            let g = per_record_grad(&theta, &r, &spec)?;
            let fd = fd_gradient_oracle(&theta, &r, &spec, 1e-5)?;
            worst = worst.max(g.distance(&fd) / g.l2_norm().max(1e-12));
        }
        let name = match spec {
            ModelSpec::LogisticRegression { .. } => "logistic_max_rel_error",
            ModelSpec::Mlp { .. } => "mlp_max_rel_error",
        };
        checks.push(Check::at_most(name, worst, 1e-5));
    }
    Ok(SuiteReport { suite: "gradients".into(), checks })
}

/// Momentum recursion against its unrolled weighted sum.
pub fn momentum_suite(sequences: usize, max_len: usize, seed: u64) -> SuiteReport {
    let mut rng = RngStream::from_seed(seed).derive("momentum").rng();
    let mut worst = 0.0f64;
    for _ in 0..sequences {
        let t = rng.random_range(1..=max_len);
        let d = rng.random_range(1..=16);
        let beta = rng.random_range(0.0..0.99);
        let gs: Vec<ParamVector> = (0..t).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let mut m = None;
        for g in &gs {
            m = Some(momentum_step(m.as_ref(), g, beta));
        }
        let mut closed = gs[0].scaled(beta.powi(t as i32 - 1));
        for (k, g) in gs.iter().enumerate().skip(1) {
            closed.axpy((1.0 - beta) * beta.powi((t - 1 - k) as i32), g);
        }
        worst = worst.max(m.unwrap().distance(&closed));
    }
    SuiteReport { suite: "momentum".into(), checks: vec![Check::at_most("max_abs_difference", worst, 1e-12)] }
}

/// Robust reconstruction for every `(q, e)` with `2q + e <= 6` at `n = 10,
/// t = 4, P = 257`, and plain round trips at `P = 2^61 - 1`.
pub fn shamir_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let cfg = SharingConfig::new(10, 4, 257)?;
    let stream = RngStream::from_seed(seed).derive("shamir");
    let mut rng = stream.rng();
    let (mut total, mut wrong) = (0usize, 0usize);
    for q in 0..=3usize {
        for e in 0..=(6 - 2 * q) {
            for k in 0..trials {
                let secret = rng.random_range(0..257);
                let mut shares = share(secret, &cfg, &stream.derive_indexed("deal", total as u64 * 1000 + k as u64));
                shares.shuffle(&mut rng);
                shares.truncate(10 - e);
                for s in shares.iter_mut().take(q) {
                    s.value = (s.value + rng.random_range(1..257)) % 257;
                }
                shares.shuffle(&mut rng);
                if robust_reconstruct(&shares, &cfg) != Ok(secret) {
                    wrong += 1;
                }
                total += 1;
            }
        }
    }
    let big = SharingConfig::new(10, 4, Field::MERSENNE_61)?;
    let f = big.field();
    let mut plain_wrong = 0usize;
    for k in 0..1000u64 {
        let secret = f.random(&mut rng);
        let mut shares = share(secret, &big, &stream.derive_indexed("plain", k));
        shares.shuffle(&mut rng);
        shares.truncate(4);
        if reconstruct(&shares, &big) != Ok(secret) {
            plain_wrong += 1;
        }
    }
    Ok(SuiteReport {
        suite: "shamir".into(),
        checks: vec![
            Check::at_most("robust_failures_p257", wrong as f64, 0.0),
            Check::at_most("plain_failures_mersenne61", plain_wrong as f64, 0.0),
        ],
    })
}

/// Epsilon values from a 40-digit evaluation of the same formulas, plus two
/// hand-checkable intermediate quantities.
pub fn accountant_suite() -> Result<SuiteReport> {
    const ORACLE: [(f64, f64); 3] =
        [(0.15, 1.060_672_431_047_971_6), (0.06, 2.990_514_459_466_594_7), (0.029, 7.988_356_228_889_395_8)];
    let mut checks = Vec::new();
    for (sigma, want) in ORACLE {
        let cfg = PrivacyConfig {
            rounds: 1000,
            q: 1.0,
            p: 0.05,
            n_records: 600,
            record_bound: 10.0,
            client_bound: 1.0,
            sigma,
            delta: 1e-6,
        };
        let eps = cfg.report()?.epsilon;
        checks.push(Check::at_most(format!("epsilon_sigma_{sigma}_rel_error"), (eps / want - 1.0).abs(), 1e-3));
    }
    let mu = gdp_mu(1000, 1.0, 0.05, 1.8);
    checks.push(Check::at_most("gdp_mu_rel_error", (mu / 0.645_881_908_811_461_2 - 1.0).abs(), 1e-12));
    checks.push(Check::at_most("cdf_tail_abs_error", (std_normal_cdf(-4.3217) - 7.741_580_787_629_532e-6).abs(), 1e-12));
    let eps = solve_epsilon(mu, 1e-6)?;
    checks.push(Check::at_most("solve_epsilon_round_trip", (crate::accountant::gdp_to_delta(mu, eps) / 1e-6 - 1.0).abs(), 1e-3));
    Ok(SuiteReport { suite: "accountant".into(), checks })
}

/// Secure rounds with mixed behaviors must reconstruct exactly the fixed-point
/// sum of valid inputs plus noise; the noise itself must look Gaussian.
pub fn secure_suite(rounds: usize, noise_coords: usize, seed: u64) -> Result<SuiteReport> {
    let stream = RngStream::from_seed(seed).derive("secure");
    let mut rng = stream.rng();
    let (mut mismatched, mut wrong_valid) = (0usize, 0usize);
    for round in 0..rounds {
        let n = rng.random_range(4..=10usize);
        let t = ((0.4 * n as f64).ceil() as usize).max(1);
        let d = rng.random_range(1..=8usize);
        let c = rng.random_range(0.5..3.0);
        let params = SecureParams::new(n, t, Field::MERSENNE_61, 16, 16)?;
        let backend = SimulatedBackend::new(params.sharing);
        let slack = n - t + 1;
        let q = rng.random_range(0..=(slack - 1) / 2);
        let e = rng.random_range(0..=slack - 1 - 2 * q);
        let mut behaviors = vec![Behavior::Honest; n];
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        for &i in &ids[..q] {
            behaviors[i] = Behavior::CorruptShares;
        }
        for &i in &ids[q..q + e] {
            behaviors[i] = Behavior::Dropout;
        }
        let malformed = rng.random_range(0..=(n - q - e).min(2));
        for &i in &ids[q + e..q + e + malformed] {
            behaviors[i] = Behavior::MalformedInput;
        }
        let inputs: Vec<ParamVector> = (0..n)
            .map(|i| {
                let v: ParamVector = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let v = clip_unchecked(&v.scaled(rng.random_range(0.1..2.0) * c), c);
                if behaviors[i] == Behavior::MalformedInput {
                    v.scaled(rng.random_range(1.5..3.0) * c / v.l2_norm().max(1e-12))
                } else {
                    v
                }
            })
            .collect();
        let out = secure_noisy_round(round, &inputs, &behaviors, c, 0.5, &params, &backend, &stream.derive_indexed("round", round as u64))?;
        let expected_valid: Vec<usize> =
            (0..n).filter(|&i| !matches!(behaviors[i], Behavior::Dropout | Behavior::MalformedInput)).collect();
        if out.valid != expected_valid {
            wrong_valid += 1;
        }
        let codec = params.codec()?;
        let mut plain = out.noise_raw.clone();
        for &i in &out.valid {
            for (o, &x) in plain.iter_mut().zip(inputs[i].iter()) {
                *o += codec.to_raw(x)?;
            }
        }
        if plain != out.aggregate_raw {
            mismatched += 1;
        }
    }

    let scale = 2.0;
    let params = SecureParams::new(5, 2, Field::MERSENNE_61, 16, 16)?;
    let backend = SimulatedBackend::new(params.sharing);
    let codec = params.codec()?;
    let mut xs = Vec::with_capacity(noise_coords);
    let chunk = 20_000usize;
    let mut k = 0u64;
    while xs.len() < noise_coords {
        let d = chunk.min(noise_coords - xs.len());
        let zeros = vec![ParamVector::zeros(d); 5];
        let out = secure_noisy_round(0, &zeros, &[Behavior::Honest; 5], 1.0, scale, &params, &backend, &stream.derive_indexed("noise", k))?;
        xs.extend(out.noise_raw.iter().map(|&r| r as f64 / codec.scale() / scale));
        k += 1;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    xs.sort_by(f64::total_cmp);
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = std_normal_cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    Ok(SuiteReport {
        suite: "secure".into(),
        checks: vec![
            Check::at_most("aggregate_mismatches", mismatched as f64, 0.0),
            Check::at_most("valid_set_mismatches", wrong_valid as f64, 0.0),
            Check::at_most("noise_mean_over_scale", mean.abs(), 0.01),
            Check::at_most("noise_variance_rel_error", (var - 1.0).abs(), 0.02),
            Check::at_most("noise_ks_statistic", ks, 0.006),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn broken_clip(v: &ParamVector, bound: f64) -> ParamVector {
        // Rescales to the bound but forgets the square root.
        let n = v.norm_sq();
        if n <= bound { v.clone() } else { v.scaled(bound / n) }
    }

    #[test]
    fn clipping_suite_passes_and_catches_broken_clip() {
        assert!(clipping_suite(5_000, 1, clip_unchecked).passed());
        assert!(!clipping_suite(5_000, 1, broken_clip).passed());
    }

    #[test]
    fn fast_suites_pass() {
        for name in ["momentum", "accountant", "gradients"] {
            let r = run_suite(name).unwrap();
            assert!(r.passed(), "{r}");
        }
        assert!(run_suite("nope").is_err());
    }

    #[test]
    fn sensitivity_bound_is_reached_in_small_r_regime() {
        let (observed, bound) = sensitivity_case(0.1, 10.0, 7);
        assert!(observed <= bound + 1e-9);
        // A record in every batch with a saturated gradient attains R / (p n).
        assert!(observed > 0.5 * bound);
    }
}
