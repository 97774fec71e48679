//! Byzantine model-poisoning attacks.
//!
//! An attacker sees only what its corrupted clients hold: their honestly
//! computed submissions (and, for label flipping, the submissions their
//! flipped data would produce) plus the public model and global momentum.
//! Benign statistics are estimated from the corrupted clients' own data.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::special::std_normal_quantile;
use crate::vector::{ParamVector, VectorSum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    Alie,
    Ipm,
    Lf,
    Mtb,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [AttackKind::None, AttackKind::Alie, AttackKind::Ipm, AttackKind::Lf, AttackKind::Mtb];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Alie => "alie",
            AttackKind::Ipm => "ipm",
            AttackKind::Lf => "lf",
            AttackKind::Mtb => "mtb",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attack {s:?}")))
    }
}

/// Perturbation direction for the min-max attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// `-mean / ||mean||`
    #[default]
    InverseUnit,
    /// `-std`
    InverseStd,
    /// `-sign(mean)`
    InverseSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Fraction of clients that are Byzantine.
    pub byz_fraction: f64,
    pub ipm_epsilon: f64,
    /// Overrides the ALIE z-score when set.
    pub alie_z: Option<f64>,
    pub alie_z_max: f64,
    pub lf_scale: f64,
    pub mtb_gamma_max: f64,
    pub mtb_iterations: usize,
    pub mtb_perturbation: Perturbation,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            byz_fraction: 0.0,
            ipm_epsilon: 1.0,
            alie_z: None,
            alie_z_max: f64::INFINITY,
            lf_scale: 1.0,
            mtb_gamma_max: 50.0,
            mtb_iterations: 20,
            mtb_perturbation: Perturbation::InverseUnit,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.byz_fraction) {
            return Err(Error::InvalidArgument(format!("Byzantine fraction {} not in [0, 0.5)", self.byz_fraction)));
        }
        if !(self.ipm_epsilon.is_finite() && self.lf_scale.is_finite()) {
            return Err(Error::InvalidArgument("attack scales must be finite".into()));
        }
        if !(self.mtb_gamma_max > 0.0 && self.mtb_gamma_max.is_finite()) || self.mtb_iterations == 0 {
            return Err(Error::InvalidArgument("min-max search needs a finite positive range and iterations".into()));
        }
        if !(self.alie_z_max > 0.0) || self.alie_z.is_some_and(|z| !z.is_finite()) {
            return Err(Error::InvalidArgument("ALIE z settings must be positive".into()));
        }
        Ok(())
    }

    /// `round(byz_fraction * n)`, or zero when no attack is configured.
    pub fn byzantine_count(&self, n: usize) -> usize {
        if self.kind == AttackKind::None {
            return 0;
        }
        (self.byz_fraction * n as f64).round() as usize
    }
}

/// An attack with its fixed set of corrupted clients.
#[derive(Debug, Clone, PartialEq)]
pub struct Adversary {
    pub config: AttackConfig,
    byzantine: Vec<usize>,
}

impl Adversary {
    /// Picks the corrupted clients uniformly at random once, at experiment start.
    pub fn new(config: AttackConfig, n: usize, stream: &RngStream) -> Result<Self> {
        config.validate()?;
        let b = config.byzantine_count(n);
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut stream.rng());
        ids.truncate(b);
        ids.sort_unstable();
        Ok(Self { config, byzantine: ids })
    }

    pub fn with_clients(config: AttackConfig, mut byzantine: Vec<usize>) -> Result<Self> {
        config.validate()?;
        byzantine.sort_unstable();
        byzantine.dedup();
        Ok(Self { config, byzantine })
    }

    /// Sorted ids of corrupted clients.
    pub fn byzantine(&self) -> &[usize] {
        &self.byzantine
    }

    /// Whether crafting needs the submissions a flipped-label local step would give.
    pub fn needs_replay(&self) -> bool {
        self.config.kind == AttackKind::Lf && !self.byzantine.is_empty()
    }

    /// One crafted vector per corrupted client, in id order.
    pub fn craft(&self, k: &ByzKnowledge, n: usize, _stream: &RngStream) -> Result<Vec<ParamVector>> {
        let b = self.byzantine.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        if k.submissions.len() != b {
            return Err(Error::InvalidArgument(format!("knowledge covers {} clients, expected {b}", k.submissions.len())));
        }
        let c = &self.config;
        let same = |v: ParamVector| vec![v; b];
        Ok(match c.kind {
            AttackKind::None => k.submissions.clone(),
            AttackKind::Alie => {
                let z = c.alie_z.unwrap_or_else(|| alie_z(n, b).min(c.alie_z_max));
                same(alie_craft(k, z)?)
            }
            AttackKind::Ipm => same(ipm_craft(k, c.ipm_epsilon)?),
            AttackKind::Lf => lf_craft(k, c.lf_scale)?,
            AttackKind::Mtb => same(mtb_craft(k, c.mtb_gamma_max, c.mtb_iterations, c.mtb_perturbation)?),
        })
    }
}

/// What the corrupted clients collectively know in one round.
#[derive(Debug, Clone)]
pub struct ByzKnowledge {
    /// Honest submissions of the corrupted clients.
    pub submissions: Vec<ParamVector>,
    /// Submissions the corrupted clients would send with flipped labels.
    pub flipped: Option<Vec<ParamVector>>,
    pub theta: ParamVector,
    /// Public global momentum from the previous round.
    pub reference: ParamVector,
}

impl ByzKnowledge {
    pub fn new(
        submissions: Vec<ParamVector>,
        flipped: Option<Vec<ParamVector>>,
        theta: ParamVector,
        reference: ParamVector,
    ) -> Result<Self> {
        let d = reference.len();
        for v in submissions.iter().chain(flipped.iter().flatten()) {
            v.check_dim(d)?;
        }
        if flipped.as_ref().is_some_and(|f| f.len() != submissions.len()) {
            return Err(Error::InvalidArgument("flipped submissions must match corrupted clients".into()));
        }
        Ok(Self { submissions, flipped, theta, reference })
    }

    fn dim(&self) -> usize {
        self.reference.len()
    }
}

/// Coordinatewise mean and population standard deviation of the corrupted
/// clients' honest submissions.
pub fn estimate_benign(k: &ByzKnowledge) -> Result<(ParamVector, ParamVector)> {
    let b = k.submissions.len();
    if b == 0 {
        return Err(Error::NoSubmissions);
    }
    let d = k.dim();
    let mut sum = VectorSum::new(d);
    for v in &k.submissions {
        sum.add(v);
    }
    let mean = sum.finish().scaled(1.0 / b as f64);
    let mut var = VectorSum::new(d);
    for v in &k.submissions {
        let dev: ParamVector = v.iter().zip(mean.iter()).map(|(x, m)| (x - m) * (x - m)).collect();
        var.add(&dev);
    }
    let std = var.finish().iter().map(|s| (s / b as f64).sqrt()).collect();
    Ok((mean, std))
}

/// ALIE z-score for `n` clients of which `b` are corrupted:
/// `s = floor(n/2 + 1) - b`, `z = Phi^-1((n - b - s) / (n - b))`. When `s <= 0`
/// the quantile argument is capped at `1 - 1/(n - b)`.
pub fn alie_z(n: usize, b: usize) -> f64 {
    assert!(b < n, "need at least one honest client");
    let honest = (n - b) as f64;
    let s = (n / 2 + 1) as f64 - b as f64;
    let cap = 1.0 - 1.0 / honest;
    let arg = if s <= 0.0 { cap } else { (honest - s) / honest };
    if arg <= 0.0 {
        return 0.0;
    }
    std_normal_quantile(arg.min(cap).max(f64::MIN_POSITIVE)).max(0.0)
}

/// `mean + z * std`.
pub fn alie_craft(k: &ByzKnowledge, z: f64) -> Result<ParamVector> {
    let (mean, std) = estimate_benign(k)?;
    let mut out = mean;
    out.axpy(z, &std);
    Ok(out)
}

/// `-epsilon * mean`.
pub fn ipm_craft(k: &ByzKnowledge, epsilon: f64) -> Result<ParamVector> {
    let (mean, _) = estimate_benign(k)?;
    Ok(mean.scaled(-epsilon))
}

/// `scale * (g_flipped - g_honest)` per corrupted client.
pub fn lf_craft(k: &ByzKnowledge, scale: f64) -> Result<Vec<ParamVector>> {
    let flipped = k.flipped.as_ref().ok_or_else(|| Error::InvalidArgument("label flipping needs flipped submissions".into()))?;
    Ok(flipped.iter().zip(&k.submissions).map(|(bad, good)| bad.sub(good).scaled(scale)).collect())
}

pub fn perturbation(kind: Perturbation, mean: &ParamVector, std: &ParamVector) -> ParamVector {
    match kind {
        Perturbation::InverseUnit => {
            let n = mean.l2_norm();
            if n == 0.0 {
                ParamVector::zeros(mean.len())
            } else {
                mean.scaled(-1.0 / n)
            }
        }
        Perturbation::InverseStd => std.scaled(-1.0),
        Perturbation::InverseSign => mean.iter().map(|&x| if x > 0.0 { -1.0 } else if x < 0.0 { 1.0 } else { 0.0 }).collect(),
    }
}

/// Largest `gamma` in `[0, gamma_max]` found by bisection such that
/// `max_i ||reference + gamma p - b_i|| <= max_{i,j} ||b_i - b_j||`.
pub fn mtb_gamma(benign: &[ParamVector], reference: &ParamVector, p: &ParamVector, gamma_max: f64, iterations: usize) -> f64 {
    let mut diameter = 0.0f64;
    for (i, a) in benign.iter().enumerate() {
        for b in &benign[i + 1..] {
            diameter = diameter.max(a.distance(b));
        }
    }
    let feasible = |g: f64| {
        let mut cand = reference.clone();
        cand.axpy(g, p);
        benign.iter().all(|b| cand.distance(b) <= diameter)
    };
    if feasible(gamma_max) {
        return gamma_max;
    }
    let (mut lo, mut hi) = (0.0, gamma_max);
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Min-max attack around the estimated benign mean.
pub fn mtb_craft(k: &ByzKnowledge, gamma_max: f64, iterations: usize, kind: Perturbation) -> Result<ParamVector> {
    let (mean, std) = estimate_benign(k)?;
    let p = perturbation(kind, &mean, &std);
    let gamma = mtb_gamma(&k.submissions, &mean, &p, gamma_max, iterations);
    let mut out = mean;
    out.axpy(gamma, &p);
    Ok(out)
}
