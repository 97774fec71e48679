//! The DP-BREM round: clients keep momentum over record-clipped gradients, the
//! server clips each momentum's deviation from the previous noisy global
//! momentum, adds Gaussian noise to the sum and steps the model.
//!
//! [`run_round`] is the shared round engine; the aggregation rule, attack and
//! secure-aggregation mode plug into it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{Adversary, ByzKnowledge};
use crate::baselines::{AggregationRule, ClientUpdate};
use crate::data::{poisson_indices, Dataset};
use crate::error::{Error, Result};
use crate::learner::{per_record_grad_unchecked, ModelSpec};
use crate::rng::{gaussian_vector, RngStream};
use crate::secure_agg::{self, Behavior, SecureParams, SimulatedBackend, TranscriptEntry};
use crate::vector::{clip_unchecked, exceeds, ParamVector, VectorSum};

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: Dataset,
    /// Record sampling rate `p_i`.
    pub p: f64,
    pub beta: f64,
    /// `None` before the first round.
    pub momentum: Option<ParamVector>,
    /// Momentum of unclipped gradients, kept only when aggregation error is tracked.
    pub raw_momentum: Option<ParamVector>,
}

impl ClientState {
    pub fn new(id: usize, data: Dataset, p: f64, beta: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidArgument(format!("record sampling rate {p} not in (0,1]")));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidArgument(format!("momentum parameter {beta} not in [0,1)")));
        }
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { id, data, p, beta, momentum: None, raw_momentum: None })
    }
}

/// Summed per-record gradients over a batch.
#[derive(Debug, Clone)]
pub struct BatchSums {
    pub clipped: ParamVector,
    /// Present when requested.
    pub raw: Option<ParamVector>,
    pub batch_size: usize,
    /// Records whose gradient norm exceeded the bound.
    pub clipped_count: usize,
}

pub fn batch_gradient_sums(
    theta: &ParamVector,
    data: &Dataset,
    batch: &[usize],
    record_bound: f64,
    spec: &ModelSpec,
    with_raw: bool,
) -> BatchSums {
    let d = theta.len();
    let mut clipped = VectorSum::new(d);
    let mut raw = with_raw.then(|| VectorSum::new(d));
    let mut clipped_count = 0;
    for &i in batch {
        let g = per_record_grad_unchecked(theta, &data.records[i], spec);
        if exceeds(&g, record_bound) {
            clipped_count += 1;
        }
        clipped.add(&clip_unchecked(&g, record_bound));
        if let Some(r) = raw.as_mut() {
            r.add(&g);
        }
    }
    BatchSums { clipped: clipped.finish(), raw: raw.map(VectorSum::finish), batch_size: batch.len(), clipped_count }
}

/// `m_1 = g_1`, then `m_t = (1 - beta) g_t + beta m_{t-1}`.
pub fn momentum_step(prev: Option<&ParamVector>, g: &ParamVector, beta: f64) -> ParamVector {
    match prev {
        None => g.clone(),
        Some(m) => {
            let mut out = g.scaled(1.0 - beta);
            out.axpy(beta, m);
            out
        }
    }
}

pub(crate) fn check_model(theta: &ParamVector, spec: &ModelSpec, data: &Dataset) -> Result<()> {
    theta.check_dim(spec.param_count())?;
    if data.feature_dim() != spec.d_in() {
        return Err(Error::DimensionMismatch { expected: spec.d_in(), actual: data.feature_dim() });
    }
    Ok(())
}

/// The Poisson batch a client draws in a round.
pub fn client_batch(c: &ClientState, stream: &RngStream) -> Vec<usize> {
    poisson_indices(c.data.len(), c.p, &mut stream.derive("batch").rng())
}

/// Local step of a DP-BREM client: Poisson batch, record-clipped gradient
/// scaled by `1 / (p |D|)`, momentum update. Returns the new momentum.
pub fn client_local_update(
    c: &mut ClientState,
    theta_prev: &ParamVector,
    record_bound: f64,
    spec: &ModelSpec,
    stream: &RngStream,
) -> Result<ParamVector> {
    Ok(dp_brem_client_update(c, theta_prev, record_bound, spec, stream, false)?.submission)
}

pub(crate) fn dp_brem_client_update(
    c: &mut ClientState,
    theta_prev: &ParamVector,
    record_bound: f64,
    spec: &ModelSpec,
    stream: &RngStream,
    track_raw: bool,
) -> Result<ClientUpdate> {
    if !(record_bound > 0.0) {
        return Err(Error::NonPositiveBound(record_bound));
    }
    check_model(theta_prev, spec, &c.data)?;
    let batch = client_batch(c, stream);
    let sums = batch_gradient_sums(theta_prev, &c.data, &batch, record_bound, spec, track_raw);
    let scale = 1.0 / (c.p * c.data.len() as f64);
    let m = momentum_step(c.momentum.as_ref(), &sums.clipped.scaled(scale), c.beta);
    c.momentum = Some(m.clone());
    if let Some(raw) = &sums.raw {
        c.raw_momentum = Some(momentum_step(c.raw_momentum.as_ref(), &raw.scaled(scale), c.beta));
    }
    Ok(ClientUpdate { submission: m, batch_size: sums.batch_size, clipped_records: sums.clipped_count })
}

/// Independent Bernoulli(q) selection of client indices `0..n`.
pub fn sample_clients(n: usize, q: f64, stream: &RngStream) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!("client sampling rate {q} not in (0,1]")));
    }
    Ok(poisson_indices(n, q, &mut stream.rng()))
}

/// `v_start + (t - 1) / (T - 1) * (v_end - v_start)` for `1 <= t <= T`.
pub fn linear_schedule(v_start: f64, v_end: f64, t: usize, rounds: usize) -> f64 {
    assert!(t >= 1 && t <= rounds.max(1), "round {t} outside 1..={rounds}");
    if rounds <= 1 || v_start == v_end || v_start.is_infinite() {
        return v_start;
    }
    v_start + (t - 1) as f64 / (rounds - 1) as f64 * (v_end - v_start)
}

pub fn schedule(v_start: f64, v_end: f64, rounds: usize) -> Vec<f64> {
    (1..=rounds).map(|t| linear_schedule(v_start, v_end, t, rounds)).collect()
}

pub fn model_update(theta_prev: &ParamVector, direction: &ParamVector, eta: f64) -> ParamVector {
    let mut out = theta_prev.clone();
    out.axpy(-eta, direction);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub theta: ParamVector,
    /// Global (noisy) momentum; for rules without momentum, the last applied direction.
    pub noisy_momentum: ParamVector,
    pub record_bounds: Vec<f64>,
    pub client_bounds: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub sigma: f64,
    pub q: f64,
    pub rounds: usize,
}

impl ServerState {
    pub fn new(
        theta: ParamVector,
        record_bounds: Vec<f64>,
        client_bounds: Vec<f64>,
        learning_rates: Vec<f64>,
        sigma: f64,
        q: f64,
    ) -> Result<Self> {
        let rounds = record_bounds.len();
        if rounds == 0 || client_bounds.len() != rounds || learning_rates.len() != rounds {
            return Err(Error::InvalidArgument("schedules must be nonempty and of equal length".into()));
        }
        if let Some(v) = record_bounds.iter().chain(&client_bounds).find(|v| !(**v > 0.0)) {
            return Err(Error::NonPositiveBound(*v));
        }
        if let Some(v) = learning_rates.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("learning rate {v} must be positive")));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise multiplier {sigma} must be nonnegative")));
        }
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::InvalidArgument(format!("client sampling rate {q} not in (0,1]")));
        }
        let d = theta.len();
        Ok(Self { theta, noisy_momentum: ParamVector::zeros(d), record_bounds, client_bounds, learning_rates, sigma, q, rounds })
    }

    /// `(R, C, eta)` for 1-based round `t`.
    pub fn bounds(&self, t: usize) -> (f64, f64, f64) {
        (self.record_bounds[t - 1], self.client_bounds[t - 1], self.learning_rates[t - 1])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Share of sampled submissions whose clipped quantity exceeded `C`.
    pub clip_fraction_client: f64,
    /// Mean norm of submissions' deviation from the clipping center.
    pub mean_deviation_norm: f64,
    /// Submissions that entered the aggregate (after any acceptance test).
    pub accepted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutput {
    pub round: usize,
    pub sampled: Vec<usize>,
    pub aggregate_pre_noise: ParamVector,
    pub noise: ParamVector,
    /// `m~_t` for momentum rules; the applied update direction otherwise.
    pub noisy_momentum: ParamVector,
    pub diagnostics: Diagnostics,
}

/// Sorts submissions by client id and rejects duplicates and wrong dimensions.
pub(crate) fn canonical(submissions: &[(usize, ParamVector)], d: usize) -> Result<Vec<(usize, &ParamVector)>> {
    let mut out: Vec<(usize, &ParamVector)> = submissions.iter().map(|(i, v)| (*i, v)).collect();
    out.sort_by_key(|(i, _)| *i);
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidArgument(format!("duplicate submission from client {}", w[0].0)));
    }
    for (_, v) in &out {
        v.check_dim(d)?;
        if !v.is_finite() {
            return Err(Error::NonFinite);
        }
    }
    Ok(out)
}

/// `sum_i clip(v_i - center, C)` in client-id order, with diagnostics.
pub fn centered_clip_sum(center: &ParamVector, submissions: &[(usize, ParamVector)], client_bound: f64) -> Result<(ParamVector, Diagnostics)> {
    let subs = canonical(submissions, center.len())?;
    let mut sum = VectorSum::new(center.len());
    let mut clipped = 0;
    let mut dev_norm = 0.0;
    for (_, v) in &subs {
        let dev = v.sub(center);
        let norm = dev.l2_norm();
        dev_norm += norm;
        if norm > client_bound {
            clipped += 1;
        }
        sum.add(&clip_unchecked(&dev, client_bound));
    }
    let k = subs.len().max(1) as f64;
    Ok((sum.finish(), Diagnostics { clip_fraction_client: clipped as f64 / k, mean_deviation_norm: dev_norm / k, accepted: subs.len() }))
}

/// Centered-clipping aggregation with noise `N(0, (R sigma)^2)` on the sum.
/// With no submissions the momentum is returned unchanged.
pub fn server_aggregate(
    s: &ServerState,
    t: usize,
    submissions: &[(usize, ParamVector)],
    stream: &RngStream,
) -> Result<(ParamVector, RoundOutput)> {
    let (r, c, _) = s.bounds(t);
    let d = s.theta.len();
    let mut sampled: Vec<usize> = submissions.iter().map(|(i, _)| *i).collect();
    sampled.sort_unstable();
    if submissions.is_empty() {
        let out = RoundOutput {
            round: t,
            sampled,
            aggregate_pre_noise: ParamVector::zeros(d),
            noise: ParamVector::zeros(d),
            noisy_momentum: s.noisy_momentum.clone(),
            diagnostics: Diagnostics::default(),
        };
        return Ok((s.noisy_momentum.clone(), out));
    }
    let (sum, diagnostics) = centered_clip_sum(&s.noisy_momentum, submissions, c)?;
    let noise = gaussian_vector(&stream.derive("noise"), d, noise_std(r, s.sigma));
    let mut m = s.noisy_momentum.clone();
    m.axpy(1.0 / submissions.len() as f64, &sum.add(&noise));
    let out = RoundOutput { round: t, sampled, aggregate_pre_noise: sum, noise, noisy_momentum: m.clone(), diagnostics };
    Ok((m, out))
}

/// `R * sigma`, treating `sigma = 0` as no noise even when `R` is infinite.
pub(crate) fn noise_std(record_bound: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        record_bound * sigma
    }
}

/// Settings for running DP-BREM aggregation through secret sharing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecureMode {
    /// Threshold `t = ceil(fraction * |I_t|)`.
    pub threshold_fraction: f64,
    pub modulus: u64,
    pub frac_bits: u32,
    pub uniform_bits: u32,
}

impl Default for SecureMode {
    fn default() -> Self {
        Self { threshold_fraction: 0.4, modulus: secure_agg::Field::MERSENNE_61, frac_bits: 16, uniform_bits: 16 }
    }
}

impl SecureMode {
    pub fn params(&self, n: usize) -> Result<SecureParams> {
        let sharing = secure_agg::SharingConfig::with_threshold_fraction(n, self.threshold_fraction, self.modulus)?;
        Ok(SecureParams::new(n, sharing.t(), self.modulus, self.frac_bits, self.uniform_bits)?)
    }
}

/// Everything a round needs besides mutable state.
#[derive(Debug, Clone, Copy)]
pub struct RoundEnv<'a> {
    pub rule: &'a AggregationRule,
    pub spec: &'a ModelSpec,
    pub adversary: Option<&'a Adversary>,
    pub secure: Option<&'a SecureMode>,
    pub track_aggregation_error: bool,
}

#[derive(Debug, Clone)]
pub struct RoundReport {
    pub output: RoundOutput,
    /// False when the model was left unchanged (no usable submissions).
    pub updated: bool,
    pub clip_fraction_record: f64,
    /// `||m~_t - m*_t||^2` against the honest unclipped momentum mean.
    pub agg_error_sq: Option<f64>,
    pub transcript: Vec<TranscriptEntry>,
}

/// One full round: every client updates locally, clients are sampled, the
/// sampled Byzantine clients replace their submissions with crafted vectors,
/// and the rule aggregates and steps the model.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    env: &RoundEnv,
    t: usize,
    stream: &RngStream,
) -> Result<RoundReport> {
    if t == 0 || t > server.rounds {
        return Err(Error::InvalidArgument(format!("round {t} outside 1..={}", server.rounds)));
    }
    let (r, _, eta) = server.bounds(t);
    let theta_prev = server.theta.clone();
    let byzantine: &[usize] = env.adversary.map_or(&[], |a| a.byzantine());
    let is_byz = |id: usize| byzantine.binary_search(&id).is_ok();

    // Corrupted clients' pre-round state, for attacks that replay the local step.
    let byz_snapshot: Vec<ClientState> = match env.adversary {
        Some(a) if a.needs_replay() => clients.iter().filter(|c| is_byz(c.id)).cloned().collect(),
        _ => Vec::new(),
    };

    let track = env.track_aggregation_error && env.rule.kind.uses_momentum();
    let updates: Vec<ClientUpdate> = clients
        .par_iter_mut()
        .map(|c| {
            let s = stream.derive_indexed("client", c.id as u64);
            env.rule.client_update(c, &theta_prev, r, env.spec, &s, track)
        })
        .collect::<Result<_>>()?;

    let (mut records, mut clipped) = (0, 0);
    for (c, u) in clients.iter().zip(&updates) {
        if !is_byz(c.id) {
            records += u.batch_size;
            clipped += u.clipped_records;
        }
    }
    let clip_fraction_record = if records == 0 { 0.0 } else { clipped as f64 / records as f64 };

    let sampled = sample_clients(clients.len(), server.q, &stream.derive("sample"))?;

    let crafted: Vec<(usize, ParamVector)> = match env.adversary {
        Some(adv) if !byzantine.is_empty() => {
            let honest_view: Vec<ParamVector> =
                clients.iter().zip(&updates).filter(|(c, _)| is_byz(c.id)).map(|(_, u)| u.submission.clone()).collect();
            let flipped = if adv.needs_replay() {
                let replays: Vec<ParamVector> = byz_snapshot
                    .into_iter()
                    .map(|mut c| {
                        c.data = c.data.label_flipped();
                        let s = stream.derive_indexed("client", c.id as u64);
                        env.rule.client_update(&mut c, &theta_prev, r, env.spec, &s, false).map(|u| u.submission)
                    })
                    .collect::<Result<_>>()?;
                Some(replays)
            } else {
                None
            };
            let knowledge = ByzKnowledge::new(honest_view, flipped, theta_prev.clone(), server.noisy_momentum.clone())?;
            let vectors = adv.craft(&knowledge, clients.len(), &stream.derive("attack"))?;
            byzantine.iter().copied().zip(vectors).collect()
        }
        _ => Vec::new(),
    };

    let submissions: Vec<(usize, ParamVector)> = sampled
        .iter()
        .map(|&i| {
            let id = clients[i].id;
            match crafted.iter().find(|(b, _)| *b == id) {
                Some((_, v)) => (id, v.clone()),
                None => (id, updates[i].submission.clone()),
            }
        })
        .collect();

    let (output, updated, transcript) = match env.secure {
        Some(mode) => secure_round(server, t, &submissions, mode, stream)?,
        None => {
            let agg = env.rule.aggregate(server, t, &submissions, &stream.derive("aggregate"))?;
            (agg.output, agg.updated, Vec::new())
        }
    };
    if updated {
        server.theta = model_update(&theta_prev, &output.noisy_momentum, eta);
    }

    let agg_error_sq = if track {
        let honest: Vec<&ParamVector> =
            clients.iter().filter(|c| !is_byz(c.id)).filter_map(|c| c.raw_momentum.as_ref()).collect();
        if honest.is_empty() {
            None
        } else {
            let mut mean = crate::vector::sum_vectors(server.theta.len(), honest.iter().copied());
            mean.scale_in_place(1.0 / honest.len() as f64);
            Some(server.noisy_momentum.sub(&mean).norm_sq())
        }
    } else {
        None
    };
    Ok(RoundReport { output, updated, clip_fraction_record, agg_error_sq, transcript })
}

/// DP-BREM aggregation where the server only ever sees the noisy sum.
fn secure_round(
    server: &mut ServerState,
    t: usize,
    submissions: &[(usize, ParamVector)],
    mode: &SecureMode,
    stream: &RngStream,
) -> Result<(RoundOutput, bool, Vec<TranscriptEntry>)> {
    let (r, c_bound, _) = server.bounds(t);
    let d = server.theta.len();
    let subs = canonical(submissions, d)?;
    let sampled: Vec<usize> = subs.iter().map(|(i, _)| *i).collect();
    if subs.is_empty() {
        let output = RoundOutput {
            round: t,
            sampled,
            aggregate_pre_noise: ParamVector::zeros(d),
            noise: ParamVector::zeros(d),
            noisy_momentum: server.noisy_momentum.clone(),
            diagnostics: Diagnostics::default(),
        };
        return Ok((output, false, Vec::new()));
    }
    // Each client clips its own deviation; the aggregate then needs no server-side clipping.
    let (_, diag) = centered_clip_sum(&server.noisy_momentum, submissions, c_bound)?;
    let inputs: Vec<ParamVector> = subs.iter().map(|(_, v)| clip_unchecked(&v.sub(&server.noisy_momentum), c_bound)).collect();
    let params = mode.params(inputs.len())?;
    let backend = SimulatedBackend::new(params.sharing);
    let behaviors = vec![Behavior::Honest; inputs.len()];
    let out = secure_agg::secure_noisy_round(
        t,
        &inputs,
        &behaviors,
        c_bound,
        noise_std(r, server.sigma),
        &params,
        &backend,
        &stream.derive("secure"),
    )?;
    let mut pre_noise = out.aggregate.clone();
    pre_noise.axpy(-1.0, &out.noise);
    let mut m = server.noisy_momentum.clone();
    m.axpy(1.0 / inputs.len() as f64, &out.aggregate);
    server.noisy_momentum = m.clone();
    let diagnostics = Diagnostics { accepted: out.valid.len(), ..diag };
    let output = RoundOutput { round: t, sampled, aggregate_pre_noise: pre_noise, noise: out.noise, noisy_momentum: m, diagnostics };
    Ok((output, true, out.transcript))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;
    use crate::vector::clip;
    use proptest::prelude::*;

    fn toy_data(n: usize) -> Dataset {
        let records = (0..n).map(|i| Record { features: vec![i as f64 / n as f64, 1.0 - i as f64 / n as f64], label: i % 2 }).collect();
        Dataset::new(records, 2).unwrap()
    }

    fn server(d: usize, sigma: f64, c: f64) -> ServerState {
        ServerState::new(ParamVector::zeros(d), vec![1.0; 5], vec![c; 5], vec![0.1; 5], sigma, 1.0).unwrap()
    }

    #[test]
    fn beta_zero_momentum_is_gradient() {
        let g = ParamVector::new(vec![1.0, -2.0]);
        let prev = ParamVector::new(vec![5.0, 5.0]);
        assert_eq!(momentum_step(Some(&prev), &g, 0.0), g);
        assert_eq!(momentum_step(None, &g, 0.9), g);
    }

    #[test]
    fn two_step_unrolling() {
        let g1 = ParamVector::new(vec![1.0, 2.0]);
        let g2 = ParamVector::new(vec![-3.0, 0.5]);
        let m2 = momentum_step(Some(&momentum_step(None, &g1, 0.9)), &g2, 0.9);
        let want = g2.scaled(0.1).add(&g1.scaled(0.9));
        assert!(m2.distance(&want) < 1e-15);
    }

    /// `(1 - beta) (g_t + beta g_{t-1} + ... + beta^{t-2} g_2) + beta^{t-1} g_1`.
    fn momentum_closed_form(gs: &[ParamVector], beta: f64) -> ParamVector {
        let t = gs.len();
        let mut out = gs[0].scaled(beta.powi(t as i32 - 1));
        for (k, g) in gs.iter().enumerate().skip(1) {
            out.axpy((1.0 - beta) * beta.powi((t - 1 - k) as i32), g);
        }
        out
    }

    proptest! {
        #[test]
        fn momentum_matches_closed_form(
            beta in 0.0f64..0.99,
            gs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..50),
        ) {
            let gs: Vec<ParamVector> = gs.into_iter().map(ParamVector::new).collect();
            let mut m = None;
            for g in &gs {
                m = Some(momentum_step(m.as_ref(), g, beta));
            }
            let want = momentum_closed_form(&gs, beta);
            prop_assert!(m.unwrap().distance(&want) <= 1e-12 * (1.0 + want.l2_norm()));
        }
    }

    #[test]
    fn empty_batch_still_updates_momentum() {
        let spec = ModelSpec::LogisticRegression { d_in: 2, classes: 2 };
        let mut c = ClientState::new(0, toy_data(3), 1e-9, 0.5).unwrap();
        let theta = ParamVector::zeros(spec.param_count());
        c.momentum = Some(ParamVector::new(vec![2.0; 6]));
        let m = client_local_update(&mut c, &theta, 1.0, &spec, &RngStream::from_seed(1)).unwrap();
        assert_eq!(m.as_slice(), &[1.0; 6]);
    }

    #[test]
    fn local_update_uses_p_times_size_divisor() {
        let spec = ModelSpec::LogisticRegression { d_in: 2, classes: 2 };
        let data = toy_data(10);
        let mut c = ClientState::new(0, data.clone(), 1.0, 0.0).unwrap();
        let theta = ParamVector::zeros(spec.param_count());
        let m = client_local_update(&mut c, &theta, f64::INFINITY, &spec, &RngStream::from_seed(2)).unwrap();
        let mean = crate::learner::mean_gradient(&theta, &data, &spec).unwrap();
        assert!(m.distance(&mean) < 1e-15);
    }

    #[test]
    fn sample_clients_rates() {
        assert_eq!(sample_clients(7, 1.0, &RngStream::from_seed(3)).unwrap(), (0..7).collect::<Vec<_>>());
        let s = RngStream::from_seed(4);
        let trials = 10_000;
        let total: usize = (0..trials).map(|k| sample_clients(100, 0.5, &s.derive_indexed("t", k)).unwrap().len()).sum();
        let mean = total as f64 / trials as f64;
        assert!((mean - 50.0).abs() < 1.5, "mean {mean}");
        assert_eq!(sample_clients(100, 0.5, &s).unwrap(), sample_clients(100, 0.5, &s).unwrap());
        assert!(sample_clients(10, 0.0, &s).is_err());
    }

    #[test]
    fn aggregate_single_client_within_bound() {
        let s = server(3, 0.0, 10.0);
        let m = ParamVector::new(vec![1.0, 2.0, -1.0]);
        let (out, _) = server_aggregate(&s, 1, &[(4, m.clone())], &RngStream::from_seed(5)).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn aggregate_saturates_colinear_deviations() {
        let s = server(2, 0.0, 0.5);
        let u = ParamVector::new(vec![0.6, 0.8]);
        let subs: Vec<_> = (0..4).map(|i| (i, u.scaled(100.0 + i as f64))).collect();
        let (out, o) = server_aggregate(&s, 1, &subs, &RngStream::from_seed(6)).unwrap();
        assert!(out.distance(&u.scaled(0.5)) < 1e-12);
        assert_eq!(o.diagnostics.clip_fraction_client, 1.0);
    }

    #[test]
    fn aggregate_noise_variance() {
        let mut s = server(1, 0.7, 1.0);
        s.record_bounds = vec![2.0; 5];
        s.noisy_momentum = ParamVector::new(vec![0.3]);
        let subs: Vec<_> = (0..4).map(|i| (i, ParamVector::new(vec![0.3]))).collect();
        let base = RngStream::from_seed(7);
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|k| server_aggregate(&s, 1, &subs, &base.derive_indexed("t", k)).unwrap().0[0] - 0.3)
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let want = (2.0 * 0.7 / 4.0f64).powi(2);
        assert!((var / want - 1.0).abs() < 0.05, "var {var} want {want}");
    }

    #[test]
    fn aggregate_rejects_bad_submissions() {
        let s = server(2, 0.0, 1.0);
        let bad = [(0, ParamVector::zeros(3))];
        assert!(matches!(server_aggregate(&s, 1, &bad, &RngStream::from_seed(8)), Err(Error::DimensionMismatch { .. })));
        let dup = [(1, ParamVector::zeros(2)), (1, ParamVector::zeros(2))];
        assert!(server_aggregate(&s, 1, &dup, &RngStream::from_seed(8)).is_err());
    }

    #[test]
    fn empty_sample_keeps_momentum() {
        let mut s = server(2, 1.0, 1.0);
        s.noisy_momentum = ParamVector::new(vec![1.0, 1.0]);
        let (m, o) = server_aggregate(&s, 2, &[], &RngStream::from_seed(9)).unwrap();
        assert_eq!(m, s.noisy_momentum);
        assert!(o.sampled.is_empty());
    }

    #[test]
    fn bounded_influence_of_one_submission() {
        let mut rng = RngStream::from_seed(10).rng();
        use rand::Rng;
        for _ in 0..200 {
            let c = rng.random_range(0.1..3.0);
            let mut s = server(4, 0.0, c);
            s.noisy_momentum = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut subs: Vec<(usize, ParamVector)> =
                (0..5).map(|i| (i, (0..4).map(|_| rng.random_range(-5.0..5.0)).collect())).collect();
            let st = RngStream::from_seed(11);
            let (a, _) = server_aggregate(&s, 1, &subs, &st).unwrap();
            subs[2].1 = (0..4).map(|_| rng.random_range(-1e3..1e3)).collect();
            let (b, _) = server_aggregate(&s, 1, &subs, &st).unwrap();
            assert!(a.distance(&b) <= 2.0 * c / 5.0 + 1e-12);
        }
    }

    #[test]
    fn model_update_cases() {
        let th = ParamVector::new(vec![1.0, -2.0]);
        assert_eq!(model_update(&th, &ParamVector::zeros(2), 0.5), th);
        assert_eq!(model_update(&th, &th, 1.0), ParamVector::zeros(2));
        let m = ParamVector::new(vec![0.25, 0.5]);
        let twice = model_update(&model_update(&th, &m, 0.1), &m, 0.2);
        assert!(twice.distance(&model_update(&th, &m, 0.3)) < 1e-15);
    }

    #[test]
    fn schedules() {
        assert_eq!(linear_schedule(0.1, 0.01, 1, 50), 0.1);
        assert!((linear_schedule(0.1, 0.01, 50, 50) - 0.01).abs() < 1e-15);
        assert!((linear_schedule(10.0, 3.0, 1000, 1000) - 3.0).abs() < 1e-12);
        assert!((linear_schedule(2.0, 4.0, 3, 5) - 3.0).abs() < 1e-15);
        assert_eq!(linear_schedule(7.0, 1.0, 1, 1), 7.0);
        assert_eq!(linear_schedule(f64::INFINITY, f64::INFINITY, 3, 5), f64::INFINITY);
    }

    #[test]
    fn client_state_validation() {
        assert!(ClientState::new(0, toy_data(4), 0.0, 0.5).is_err());
        assert!(ClientState::new(0, toy_data(4), 0.5, 1.0).is_err());
        assert!(clip(&ParamVector::zeros(1), 1.0).is_ok());
    }
}
