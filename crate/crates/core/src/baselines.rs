//! Aggregation rules compared against DP-BREM, all behind [`AggregationRule`].
//!
//! Every rule takes the same per-round inputs (previous model, client states,
//! sampled set, possibly crafted submissions) and produces the next model plus
//! diagnostics. Noise parameters carry rule-specific units:
//!
//! | rule        | noise                                   |
//! |-------------|-----------------------------------------|
//! | `dp_brem`   | `N(0, (R sigma)^2)` on the clipped sum  |
//! | `dp_fedsgd` | `N(0, (R sigma)^2)` on the clipped sum  |
//! | `dp_cm`     | `N(0, (R sigma)^2)` on the median       |
//! | `dp_lfh`    | `N(0, (R sigma_local)^2)` per client    |
//! | `dp_rsa`    | `N(0, sigma_local^2)` per client        |
//! | `ddp_rp`    | `N(0, (R sigma_local)^2 / tau)` per client |

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::learner::{per_record_grad_unchecked, ModelSpec};
use crate::protocol::{
    batch_gradient_sums, canonical, centered_clip_sum, check_model, client_batch, dp_brem_client_update,
    momentum_step, noise_std, server_aggregate, ClientState, Diagnostics, RoundOutput, ServerState,
};
use crate::rng::{gaussian_vector, RngStream};
use crate::vector::{clip_unchecked, ParamVector, VectorSum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    DpBrem,
    Lfh,
    DpLfh,
    #[serde(rename = "dp_fedsgd")]
    DpFedSgd,
    DpCm,
    DpRsa,
    DdpRp,
}

impl RuleKind {
    pub const ALL: [RuleKind; 7] =
        [RuleKind::DpBrem, RuleKind::Lfh, RuleKind::DpLfh, RuleKind::DpFedSgd, RuleKind::DpCm, RuleKind::DpRsa, RuleKind::DdpRp];

    pub fn name(self) -> &'static str {
        match self {
            RuleKind::DpBrem => "dp_brem",
            RuleKind::Lfh => "lfh",
            RuleKind::DpLfh => "dp_lfh",
            RuleKind::DpFedSgd => "dp_fedsgd",
            RuleKind::DpCm => "dp_cm",
            RuleKind::DpRsa => "dp_rsa",
            RuleKind::DdpRp => "ddp_rp",
        }
    }

    /// Clients keep momentum and the server applies centered clipping.
    pub fn uses_momentum(self) -> bool {
        matches!(self, RuleKind::DpBrem | RuleKind::Lfh | RuleKind::DpLfh)
    }

    /// Noise is added by clients rather than the server.
    pub fn local_noise(self) -> bool {
        matches!(self, RuleKind::DpLfh | RuleKind::DpRsa | RuleKind::DdpRp)
    }

    pub fn is_private(self) -> bool {
        self != RuleKind::Lfh
    }
}

impl std::str::FromStr for RuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RuleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown aggregation rule {s:?}")))
    }
}

impl std::fmt::Display for RuleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationRule {
    pub kind: RuleKind,
    /// Central noise multiplier.
    pub sigma: f64,
    /// Per-client noise multiplier.
    pub sigma_local: f64,
    /// Acceptance range `[-r, r]` per coordinate for `ddp_rp`.
    pub range_bound: f64,
    /// Honest clients assumed by `ddp_rp` when splitting noise.
    pub tau: usize,
}

impl AggregationRule {
    pub fn new(kind: RuleKind) -> Self {
        Self { kind, sigma: 0.0, sigma_local: 0.0, range_bound: f64::INFINITY, tau: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma", self.sigma), ("sigma_local", self.sigma_local)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be finite and nonnegative")));
            }
        }
        if !(self.range_bound > 0.0) {
            return Err(Error::InvalidArgument(format!("range bound {} must be positive", self.range_bound)));
        }
        if self.tau == 0 {
            return Err(Error::InvalidArgument("tau must be at least 1".into()));
        }
        Ok(())
    }

    /// Honest local computation for client `c` this round. Momentum rules
    /// update the client's momentum in place.
    pub fn client_update(
        &self,
        c: &mut ClientState,
        theta_prev: &ParamVector,
        record_bound: f64,
        spec: &ModelSpec,
        stream: &RngStream,
        track_raw: bool,
    ) -> Result<ClientUpdate> {
        match self.kind {
            RuleKind::DpBrem => dp_brem_client_update(c, theta_prev, record_bound, spec, stream, track_raw),
            RuleKind::Lfh | RuleKind::DpLfh => {
                check_model(theta_prev, spec, &c.data)?;
                let batch = client_batch(c, stream);
                let (g, clipped) = if self.kind == RuleKind::Lfh {
                    (lfh_gradient(theta_prev, &c.data, &batch, spec), 0)
                } else {
                    let noise = stream.derive("local_noise");
                    dp_lfh_gradient(theta_prev, &c.data, &batch, record_bound, self.sigma_local, spec, &noise)
                };
                c.momentum = Some(momentum_step(c.momentum.as_ref(), &g, c.beta));
                if track_raw {
                    let raw = batch_gradient_sums(theta_prev, &c.data, &batch, f64::INFINITY, spec, false).clipped;
                    let raw = raw.scaled(1.0 / (c.p * c.data.len() as f64));
                    c.raw_momentum = Some(momentum_step(c.raw_momentum.as_ref(), &raw, c.beta));
                }
                Ok(ClientUpdate { submission: c.momentum.clone().unwrap(), batch_size: batch.len(), clipped_records: clipped })
            }
            RuleKind::DpFedSgd | RuleKind::DpCm | RuleKind::DpRsa | RuleKind::DdpRp => {
                check_model(theta_prev, spec, &c.data)?;
                let batch = client_batch(c, stream);
                let sums = batch_gradient_sums(theta_prev, &c.data, &batch, record_bound, spec, false);
                let g = sums.clipped.scaled(1.0 / (c.p * c.data.len() as f64));
                let noise = stream.derive("local_noise");
                let submission = match self.kind {
                    RuleKind::DpRsa => dp_rsa_submission(&g, self.sigma_local, &noise),
                    RuleKind::DdpRp => ddp_rp_submission(&g, record_bound, self.sigma_local, self.tau, &noise),
                    _ => g,
                };
                Ok(ClientUpdate { submission, batch_size: sums.batch_size, clipped_records: sums.clipped_count })
            }
        }
    }

    /// Server side: combines the sampled submissions, updates
    /// `server.noisy_momentum` and returns the direction for the model step.
    pub fn aggregate(
        &self,
        server: &mut ServerState,
        t: usize,
        submissions: &[(usize, ParamVector)],
        stream: &RngStream,
    ) -> Result<AggregateOutput> {
        let (r, c, _) = server.bounds(t);
        let d = server.theta.len();
        let subs = canonical(submissions, d)?;
        let sampled: Vec<usize> = subs.iter().map(|(i, _)| *i).collect();
        let skipped = |server: &ServerState| AggregateOutput {
            output: RoundOutput {
                round: t,
                sampled: sampled.clone(),
                aggregate_pre_noise: ParamVector::zeros(d),
                noise: ParamVector::zeros(d),
                noisy_momentum: server.noisy_momentum.clone(),
                diagnostics: Diagnostics::default(),
            },
            updated: false,
        };
        if subs.is_empty() {
            return Ok(skipped(server));
        }
        let vectors: Vec<&ParamVector> = subs.iter().map(|(_, v)| *v).collect();
        let k = vectors.len() as f64;
        let (pre, noise, direction, diagnostics) = match self.kind {
            RuleKind::DpBrem => {
                let (m, out) = server_aggregate(server, t, submissions, stream)?;
                server.noisy_momentum = m;
                return Ok(AggregateOutput { output: out, updated: true });
            }
            RuleKind::Lfh | RuleKind::DpLfh => {
                let (sum, diag) = centered_clip_sum(&server.noisy_momentum, submissions, c)?;
                let mut m = server.noisy_momentum.clone();
                m.axpy(1.0 / k, &sum);
                (sum, ParamVector::zeros(d), m, diag)
            }
            RuleKind::DpFedSgd => {
                let (sum, diag) = centered_clip_sum(&ParamVector::zeros(d), submissions, c)?;
                let noise = gaussian_vector(&stream.derive("noise"), d, noise_std(r, self.sigma));
                (sum.clone(), noise.clone(), sum.add(&noise).scaled(1.0 / k), diag)
            }
            RuleKind::DpCm => {
                let med = coordinate_median(&vectors)?;
                let noise = gaussian_vector(&stream.derive("noise"), d, noise_std(r, self.sigma));
                let diag = Diagnostics { accepted: vectors.len(), ..Diagnostics::default() };
                (med.clone(), noise.clone(), med.add(&noise), diag)
            }
            RuleKind::DpRsa => {
                let mean = mean_of(&vectors, d);
                let diag = Diagnostics { accepted: vectors.len(), ..Diagnostics::default() };
                (mean.clone(), ParamVector::zeros(d), mean, diag)
            }
            RuleKind::DdpRp => match ddp_rp_aggregate(&vectors, self.range_bound, d) {
                None => return Ok(skipped(server)),
                Some((mean, accepted)) => {
                    let diag = Diagnostics { accepted, ..Diagnostics::default() };
                    (mean.clone(), ParamVector::zeros(d), mean, diag)
                }
            },
        };
        server.noisy_momentum = direction.clone();
        Ok(AggregateOutput {
            output: RoundOutput { round: t, sampled, aggregate_pre_noise: pre, noise, noisy_momentum: direction, diagnostics },
            updated: true,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    /// What an honest client sends: its momentum, gradient or privatized gradient.
    pub submission: ParamVector,
    pub batch_size: usize,
    pub clipped_records: usize,
}

#[derive(Debug, Clone)]
pub struct AggregateOutput {
    pub output: RoundOutput,
    /// False when the model must not move this round.
    pub updated: bool,
}

/// Unclipped batch-mean gradient; zero on an empty batch.
pub fn lfh_gradient(theta: &ParamVector, data: &Dataset, batch: &[usize], spec: &ModelSpec) -> ParamVector {
    let mut sum = VectorSum::new(theta.len());
    for &i in batch {
        sum.add(&per_record_grad_unchecked(theta, &data.records[i], spec));
    }
    sum.finish().scaled(1.0 / batch.len().max(1) as f64)
}

/// `(1/|batch|) sum clip(grad, R) + N(0, (R sigma_local)^2)`. An empty batch
/// gives pure noise. Returns the gradient and the number of clipped records.
pub fn dp_lfh_gradient(
    theta: &ParamVector,
    data: &Dataset,
    batch: &[usize],
    record_bound: f64,
    sigma_local: f64,
    spec: &ModelSpec,
    noise: &RngStream,
) -> (ParamVector, usize) {
    let sums = batch_gradient_sums(theta, data, batch, record_bound, spec, false);
    let mut g = sums.clipped.scaled(1.0 / batch.len().max(1) as f64);
    g.axpy(1.0, &gaussian_vector(noise, theta.len(), noise_std(record_bound, sigma_local)));
    (g, sums.clipped_count)
}

/// Lower median per coordinate.
pub fn coordinate_median(vectors: &[&ParamVector]) -> Result<ParamVector> {
    let first = vectors.first().ok_or(Error::NoSubmissions)?;
    let d = first.len();
    let mut col = Vec::with_capacity(vectors.len());
    let mut out = Vec::with_capacity(d);
    for k in 0..d {
        col.clear();
        for v in vectors {
            v.check_dim(d)?;
            col.push(v[k]);
        }
        col.sort_by(f64::total_cmp);
        out.push(col[(col.len() - 1) / 2]);
    }
    Ok(ParamVector::new(out))
}

/// Coordinatewise sign with `sign(0) = 0`.
pub fn sign_vector(g: &ParamVector) -> ParamVector {
    g.iter().map(|&x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }).collect()
}

/// `sign(g) + N(0, sigma_local^2)`.
pub fn dp_rsa_submission(g: &ParamVector, sigma_local: f64, noise: &RngStream) -> ParamVector {
    sign_vector(g).add(&gaussian_vector(noise, g.len(), sigma_local))
}

/// `g + N(0, (R sigma_local)^2 / tau)`.
pub fn ddp_rp_submission(g: &ParamVector, record_bound: f64, sigma_local: f64, tau: usize, noise: &RngStream) -> ParamVector {
    let std = noise_std(record_bound, sigma_local) / (tau as f64).sqrt();
    g.add(&gaussian_vector(noise, g.len(), std))
}

/// Every coordinate lies in `[-r, r]`.
pub fn ddp_rp_accepts(v: &ParamVector, range_bound: f64) -> bool {
    v.iter().all(|x| x.abs() <= range_bound)
}

/// Mean of the accepted submissions and their count; `None` if all are rejected.
pub fn ddp_rp_aggregate(vectors: &[&ParamVector], range_bound: f64, d: usize) -> Option<(ParamVector, usize)> {
    let accepted: Vec<&ParamVector> = vectors.iter().copied().filter(|v| ddp_rp_accepts(v, range_bound)).collect();
    if accepted.is_empty() {
        return None;
    }
    Some((mean_of(&accepted, d), accepted.len()))
}

fn mean_of(vectors: &[&ParamVector], d: usize) -> ParamVector {
    let mut sum = VectorSum::new(d);
    for v in vectors {
        sum.add(v);
    }
    sum.finish().scaled(1.0 / vectors.len().max(1) as f64)
}

/// `(sum clip(g_i, C) + noise) / k`, the DP-FedSGD server step direction.
pub fn dp_fedsgd_direction(vectors: &[&ParamVector], client_bound: f64, noise: &ParamVector) -> Result<ParamVector> {
    if vectors.is_empty() {
        return Err(Error::NoSubmissions);
    }
    let mut sum = VectorSum::new(noise.len());
    for v in vectors {
        v.check_dim(noise.len())?;
        sum.add(&clip_unchecked(v, client_bound));
    }
    sum.add(noise);
    Ok(sum.finish().scaled(1.0 / vectors.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;
    use crate::protocol::{run_round, RoundEnv};

    fn server(d: usize, rounds: usize) -> ServerState {
        ServerState::new(ParamVector::zeros(d), vec![1.0; rounds], vec![1.0; rounds], vec![0.1; rounds], 0.0, 1.0).unwrap()
    }

    fn v(x: &[f64]) -> ParamVector {
        ParamVector::new(x.to_vec())
    }

    #[test]
    fn names_round_trip() {
        for k in RuleKind::ALL {
            assert_eq!(k.name().parse::<RuleKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("fedavg".parse::<RuleKind>().is_err());
    }

    #[test]
    fn median_odd_even() {
        let a = v(&[1.0, 5.0]);
        let b = v(&[3.0, -1.0]);
        let c = v(&[2.0, 0.0]);
        assert_eq!(coordinate_median(&[&a, &b, &c]).unwrap(), v(&[2.0, 0.0]));
        assert_eq!(coordinate_median(&[&a, &b]).unwrap(), v(&[1.0, -1.0]));
        assert!(coordinate_median(&[]).is_err());
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign_vector(&v(&[-0.5, 0.0, 2.0, -0.0])), v(&[-1.0, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn ddp_rp_rejects_whole_submission() {
        let ok = v(&[0.5, -0.5]);
        let bad = v(&[0.1, 2.0]);
        assert!(ddp_rp_accepts(&ok, 1.0));
        assert!(!ddp_rp_accepts(&bad, 1.0));
        let (mean, n) = ddp_rp_aggregate(&[&ok, &bad], 1.0, 2).unwrap();
        assert_eq!((mean, n), (ok.clone(), 1));
        assert!(ddp_rp_aggregate(&[&bad], 1.0, 2).is_none());
    }

    #[test]
    fn ddp_rp_all_rejected_skips_update() {
        let mut s = server(2, 3);
        let mut rule = AggregationRule::new(RuleKind::DdpRp);
        rule.range_bound = 0.1;
        let out = rule.aggregate(&mut s, 1, &[(0, v(&[5.0, 0.0]))], &RngStream::from_seed(1)).unwrap();
        assert!(!out.updated);
    }

    #[test]
    fn fedsgd_direction_matches_formula() {
        let a = v(&[3.0, 4.0]);
        let b = v(&[0.1, 0.0]);
        let noise = v(&[0.0, 0.0]);
        let got = dp_fedsgd_direction(&[&a, &b], 1.0, &noise).unwrap();
        assert!(got.distance(&v(&[(0.6 + 0.1) / 2.0, 0.4])) < 1e-15);

        let mut s = server(2, 3);
        let out = AggregationRule::new(RuleKind::DpFedSgd).aggregate(&mut s, 1, &[(0, a), (1, b)], &RngStream::from_seed(2)).unwrap();
        assert!(out.output.noisy_momentum.distance(&got) < 1e-15);
        assert_eq!(out.output.diagnostics.clip_fraction_client, 0.5);
    }

    #[test]
    fn lfh_centered_clipping() {
        let mut s = server(2, 3);
        s.noisy_momentum = v(&[1.0, 1.0]);
        let out = AggregationRule::new(RuleKind::Lfh).aggregate(&mut s, 1, &[(0, v(&[1.0, 11.0]))], &RngStream::from_seed(3)).unwrap();
        assert!(s.noisy_momentum.distance(&v(&[1.0, 2.0])) < 1e-15);
        assert_eq!(out.output.noise, ParamVector::zeros(2));
    }

    #[test]
    fn rsa_aggregate_is_mean() {
        let mut s = server(2, 3);
        let subs = [(0, v(&[1.0, -1.0])), (1, v(&[1.0, 1.0]))];
        let out = AggregationRule::new(RuleKind::DpRsa).aggregate(&mut s, 1, &subs, &RngStream::from_seed(4)).unwrap();
        assert_eq!(out.output.noisy_momentum, v(&[1.0, 0.0]));
    }

    #[test]
    fn dp_lfh_empty_batch_is_noise_only() {
        let data = Dataset::new(vec![Record { features: vec![1.0], label: 0 }], 2).unwrap();
        let spec = ModelSpec::LogisticRegression { d_in: 1, classes: 2 };
        let theta = ParamVector::zeros(4);
        let s = RngStream::from_seed(5);
        let (g, _) = dp_lfh_gradient(&theta, &data, &[], 2.0, 0.5, &spec, &s);
        assert_eq!(g, gaussian_vector(&s, 4, 1.0));
    }

    fn clients(n: usize, spec: &ModelSpec) -> Vec<ClientState> {
        let task = crate::data::SyntheticTask::new(&RngStream::from_seed(9), spec.d_in(), spec.classes(), 3.0).unwrap();
        (0..n)
            .map(|i| {
                let d = task.sample(&RngStream::from_seed(100 + i as u64), 40, 0.0).unwrap();
                ClientState::new(i, d, 0.25, 0.9).unwrap()
            })
            .collect()
    }

    #[test]
    fn every_rule_runs_and_is_deterministic() {
        let spec = ModelSpec::LogisticRegression { d_in: 4, classes: 3 };
        for kind in RuleKind::ALL {
            let mut rule = AggregationRule::new(kind);
            rule.sigma = 0.5;
            rule.sigma_local = 0.05;
            rule.range_bound = 100.0;
            rule.tau = 3;
            let run = || {
                let mut s = ServerState::new(
                    ParamVector::zeros(spec.param_count()),
                    vec![1.0; 5],
                    vec![0.5; 5],
                    vec![0.1; 5],
                    rule.sigma,
                    1.0,
                )
                .unwrap();
                let mut cs = clients(4, &spec);
                let env = RoundEnv { rule: &rule, spec: &spec, adversary: None, secure: None, track_aggregation_error: true };
                for t in 1..=5 {
                    let rep = run_round(&mut s, &mut cs, &env, t, &RngStream::from_seed(7).derive_indexed("round", t as u64)).unwrap();
                    assert_eq!(rep.agg_error_sq.is_some(), kind.uses_momentum());
                }
                s.theta
            };
            let a = run();
            assert!(a.is_finite(), "{kind}");
            assert_eq!(a, run(), "{kind}");
        }
    }
}
