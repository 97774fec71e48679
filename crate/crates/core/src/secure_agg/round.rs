//! One noisy aggregation round with verified inputs over Shamir shares.
//!
//! Every sampled client is both a dealer of its own input and a share holder
//! for everyone else. Holder `j` (0-based) owns evaluation point `j + 1`.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::backend::MpcBackend;
use super::field::Field;
use super::fixed_point::FixedPoint;
use super::noise::{box_muller_shared, joint_uniform, party_bits};
use super::shamir::{reconstruct, share_with_rng, Reconstructor, Share};
use super::{SharingConfig, SharingError};
use crate::rng::RngStream;
use crate::vector::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Honest,
    /// Follows the protocol but submits whatever input it likes, with a
    /// squared-norm witness claiming to be within bound.
    MalformedInput,
    /// Input is honest, but every share it forwards is altered.
    CorruptShares,
    /// Sends nothing this round.
    Dropout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecureParams {
    pub sharing: SharingConfig,
    pub frac_bits: u32,
    /// Random bits per uniform in the noise generation; at most `frac_bits`.
    pub uniform_bits: u32,
}

impl SecureParams {
    pub fn new(n: usize, t: usize, modulus: u64, frac_bits: u32, uniform_bits: u32) -> Result<Self, SharingError> {
        let sharing = SharingConfig::new(n, t, modulus)?;
        if uniform_bits == 0 || uniform_bits > frac_bits {
            return Err(SharingError::InvalidConfig(format!("uniform bits {uniform_bits} not in 1..={frac_bits}")));
        }
        Ok(Self { sharing, frac_bits, uniform_bits })
    }

    /// Codec sized so that `n` inputs plus the noise sum without wrapping.
    pub fn codec(&self) -> Result<FixedPoint, SharingError> {
        FixedPoint::new(self.sharing.field(), self.frac_bits, self.sharing.n() + 1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub round: usize,
    pub step: u8,
    pub name: String,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct SecureRoundOutput {
    /// `sum_{i in valid} z_i + xi`, decoded.
    pub aggregate: ParamVector,
    pub aggregate_raw: Vec<i128>,
    /// Reconstructed noise, kept for auditing the simulation.
    pub noise: ParamVector,
    pub noise_raw: Vec<i128>,
    pub valid: Vec<usize>,
    pub transcript: Vec<TranscriptEntry>,
}

/// How shares travel from holders to whoever consumes them.
pub trait Channel {
    fn send(&mut self, shares: &[Share]) -> Vec<Share>;
}

/// Delivers every share unchanged.
pub struct PerfectChannel;

impl Channel for PerfectChannel {
    fn send(&mut self, shares: &[Share]) -> Vec<Share> {
        shares.to_vec()
    }
}

/// Drops shares held by dropouts and perturbs those held by corrupt holders.
struct FaultyChannel<'a, R> {
    behaviors: &'a [Behavior],
    field: Field,
    rng: R,
}

impl<R: RngCore> Channel for FaultyChannel<'_, R> {
    fn send(&mut self, shares: &[Share]) -> Vec<Share> {
        shares
            .iter()
            .filter_map(|s| match self.behaviors[s.point as usize - 1] {
                Behavior::Dropout => None,
                Behavior::CorruptShares => {
                    let offset = self.rng.random_range(1..self.field.modulus());
                    Some(Share { point: s.point, value: self.field.add(s.value, offset) })
                }
                _ => Some(*s),
            })
            .collect()
    }
}

/// Plaintext validity predicate `||z|| <= C` (closed).
pub fn validate_input(z: &ParamVector, clip_bound: f64) -> bool {
    z.is_finite() && z.l2_norm() <= clip_bound
}

/// Acceptance threshold for the raw squared norm. Rounding each coordinate to
/// the fixed-point grid can raise the squared norm by up to
/// `C 2^f sqrt(d) + d / 4` raw units, so that much slack is granted; inputs
/// within this guard band of the boundary may be classified either way.
pub fn squared_norm_threshold(clip_bound: f64, d: usize, codec: &FixedPoint) -> i128 {
    let c = clip_bound * codec.scale();
    (c * c + c * (d as f64).sqrt() + d as f64 / 4.0).floor() as i128
}

fn check_norm_capacity(clip_bound: f64, d: usize, codec: &FixedPoint) -> Result<(), SharingError> {
    let c = (clip_bound * codec.scale()).round();
    let worst = d as f64 * c * c;
    let cap = (codec.field.modulus() / 2) as f64;
    if !(clip_bound > 0.0) || worst >= cap || squared_norm_threshold(clip_bound, d, codec) as f64 >= cap {
        return Err(SharingError::InvalidConfig(format!(
            "squared norms up to {worst:e} do not fit the field; lower C, d or the fractional bits"
        )));
    }
    Ok(())
}

fn pointwise(field: &Field, a: &[Share], b: &[Share], sub: bool) -> Vec<Share> {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            debug_assert_eq!(x.point, y.point);
            let value = if sub { field.sub(x.value, y.value) } else { field.add(x.value, y.value) };
            Share { point: x.point, value }
        })
        .collect()
}

/// Validity check on shared data. `z` holds one full sharing per coordinate and
/// `witness` a sharing of the claimed raw squared norm. Every opening goes
/// through `channel`.
///
/// The check reveals three kinds of bits: each coordinate lies within
/// `[-C, C]` (which rules out wrap-around in the squared norm), the witness
/// equals the squared norm computed on shares, and the witness is below the
/// threshold of [`squared_norm_threshold`].
pub fn validate_input_shared(
    z: &[Vec<Share>],
    witness: &[Share],
    clip_bound: f64,
    codec: &FixedPoint,
    backend: &dyn MpcBackend,
    channel: &mut dyn Channel,
    rng: &mut dyn RngCore,
) -> Result<bool, SharingError> {
    let n = backend.config().n();
    if witness.len() != n || z.iter().any(|s| s.len() != n) {
        return Err(SharingError::InvalidConfig("share sets must cover every holder".into()));
    }
    check_norm_capacity(clip_bound, z.len(), codec)?;
    let field = codec.field;
    let c_raw = (clip_bound * codec.scale()).round() as i128;
    for zk in z {
        let neg: Vec<Share> = zk.iter().map(|s| Share { point: s.point, value: field.neg(s.value) }).collect();
        if !backend.reveal_le(&channel.send(zk), c_raw)? || !backend.reveal_le(&channel.send(&neg), c_raw)? {
            return Ok(false);
        }
    }
    let mut sq: Vec<Share> = (1..=n as u32).map(|point| Share { point, value: 0 }).collect();
    for zk in z {
        let prod = backend.mul(&channel.send(zk), &channel.send(zk), rng)?;
        sq = pointwise(&field, &sq, &prod, false);
    }
    let over = pointwise(&field, &sq, witness, true);
    let under = pointwise(&field, witness, &sq, true);
    Ok(backend.reveal_le(&channel.send(&over), 0)?
        && backend.reveal_le(&channel.send(&under), 0)?
        && backend.reveal_le(&channel.send(witness), squared_norm_threshold(clip_bound, z.len(), codec))?)
}

/// Runs the seven-step noisy aggregation among `inputs.len()` clients.
///
/// Returns `sum_{i in valid} z_i + xi` with `xi ~ N(0, noise_scale^2 I_d)`,
/// where a client is valid when it did not drop out and its input passes
/// [`validate_input_shared`]. Corrupt holders and dropouts are absorbed by
/// robust reconstruction as long as `2 * corrupt + dropouts < n - t + 1`.
#[allow(clippy::too_many_arguments)]
pub fn secure_noisy_round(
    round: usize,
    inputs: &[ParamVector],
    behaviors: &[Behavior],
    clip_bound: f64,
    noise_scale: f64,
    params: &SecureParams,
    backend: &dyn MpcBackend,
    stream: &RngStream,
) -> Result<SecureRoundOutput, SharingError> {
    let cfg = params.sharing;
    let n = cfg.n();
    if inputs.len() != n || behaviors.len() != n {
        return Err(SharingError::DimensionMismatch { expected: n, actual: inputs.len().min(behaviors.len()) });
    }
    let d = inputs.first().map_or(0, ParamVector::len);
    if let Some(bad) = inputs.iter().find(|z| z.len() != d) {
        return Err(SharingError::DimensionMismatch { expected: d, actual: bad.len() });
    }
    let corrupt = behaviors.iter().filter(|&&b| b == Behavior::CorruptShares).count();
    let dropped = behaviors.iter().filter(|&&b| b == Behavior::Dropout).count();
    if !cfg.decodable(corrupt, dropped) {
        return Err(SharingError::BoundExceeded { errors: corrupt, erasures: dropped });
    }
    let codec = params.codec()?;
    check_norm_capacity(clip_bound, d, &codec)?;
    let field = cfg.field();
    let threshold = squared_norm_threshold(clip_bound, d, &codec);
    let mut log = Vec::new();
    let mut note = |step: u8, name: &str, detail: serde_json::Value| {
        log.push(TranscriptEntry { round, step, name: name.to_string(), detail });
    };
    let mut channel = FaultyChannel { behaviors, field, rng: stream.derive("network").rng() };
    let mut mpc_rng = stream.derive("mpc").rng();

    // 1. Inputs and squared-norm witnesses are shared among all holders.
    let mut dealt: Vec<Option<(Vec<Vec<Share>>, Vec<Share>)>> = Vec::with_capacity(n);
    for (i, (z, &b)) in inputs.iter().zip(behaviors).enumerate() {
        if b == Behavior::Dropout {
            dealt.push(None);
            continue;
        }
        let mut rng = stream.derive_indexed("deal", i as u64).rng();
        let bound = codec.raw_bound() - 1;
        let raws: Vec<i128> = z.iter().map(|&x| codec.to_raw(x).unwrap_or(if x < 0.0 { -bound } else { bound })).collect();
        let true_sq = raws.iter().fold(0i128, |acc, &r| acc.saturating_add(r.saturating_mul(r)));
        let claimed = match b {
            Behavior::MalformedInput => true_sq.min(threshold),
            _ => true_sq,
        };
        let witness_value = field.from_signed(claimed.rem_euclid(field.modulus() as i128));
        let shares = raws.iter().map(|&r| share_with_rng(field.from_signed(r), &cfg, &mut rng)).collect();
        dealt.push(Some((shares, share_with_rng(witness_value, &cfg, &mut rng))));
    }
    let dealers: Vec<usize> = (0..n).filter(|&i| dealt[i].is_some()).collect();
    note(1, "proof_and_shares", json!({ "dealers": dealers, "coordinates": d }));

    // 2-3. Holders evaluate the validity predicate on shares; the server opens
    // only the resulting bits.
    let mut valid = Vec::new();
    let mut rejected = Vec::new();
    for &i in &dealers {
        let (z, w) = dealt[i].as_ref().expect("dealer has shares");
        if validate_input_shared(z, w, clip_bound, &codec, backend, &mut channel, &mut mpc_rng)? {
            valid.push(i);
        } else {
            rejected.push(i);
        }
    }
    let responders: Vec<usize> = (0..n).filter(|&j| behaviors[j] != Behavior::Dropout).collect();
    note(2, "proof_summary_shares", json!({ "responders": responders }));
    note(3, "proof_summary_verification", json!({ "valid": valid, "rejected": rejected, "threshold_raw": threshold.to_string() }));

    // 4. Uniform pairs from XOR-combined party bits.
    let l = params.uniform_bits;
    let pairs = d.div_ceil(2);
    let mut party_rngs: Vec<_> = responders.iter().map(|&j| stream.derive_indexed("bits", j as u64).rng()).collect();
    let mut deal_rngs: Vec<_> = responders.iter().map(|&j| stream.derive_indexed("bits-deal", j as u64).rng()).collect();
    let mut uniforms = Vec::with_capacity(2 * pairs);
    for _ in 0..2 * pairs {
        let contribs: Vec<Vec<Share>> = party_rngs
            .iter_mut()
            .zip(deal_rngs.iter_mut())
            .map(|(pr, dr)| {
                let bits = party_bits(pr, l);
                channel.send(&share_with_rng(bits, &cfg, dr))
            })
            .collect();
        uniforms.push(joint_uniform(&contribs, l, &codec, backend, &mut mpc_rng)?);
    }
    note(4, "random_numbers_generation", json!({ "pairs": pairs, "bits": l, "contributors": responders.len() }));

    // 5. Box-Muller on shares, scaled to the noise level.
    let mut noise_shares = Vec::with_capacity(2 * pairs);
    for k in 0..pairs {
        let (u, v) = (channel.send(&uniforms[2 * k]), channel.send(&uniforms[2 * k + 1]));
        let (a, b) = box_muller_shared(&u, &v, l, noise_scale, &codec, backend, &mut mpc_rng)?;
        noise_shares.push(a);
        noise_shares.push(b);
    }
    noise_shares.truncate(d);
    note(5, "gaussian_transformation", json!({ "scale": noise_scale, "coordinates": d }));

    // 6. Each holder adds its shares of the valid inputs and of the noise.
    let mut agg_shares = noise_shares.clone();
    for &i in &valid {
        let (z, _) = dealt[i].as_ref().expect("valid client dealt");
        for (acc, zk) in agg_shares.iter_mut().zip(z) {
            *acc = pointwise(&field, acc, zk, false);
        }
    }
    note(6, "shares_aggregation", json!({ "valid": valid.len(), "holders": responders.len() }));

    // 7. The server robustly reconstructs every coordinate.
    let points: Vec<u32> = responders.iter().map(|&j| j as u32 + 1).collect();
    let rec = Reconstructor::new(&cfg, &points)?;
    let mut aggregate_raw = Vec::with_capacity(d);
    for shares in &agg_shares {
        let received = channel.send(shares);
        let values: Vec<u64> = received.iter().map(|s| s.value).collect();
        aggregate_raw.push(codec.raw(rec.reconstruct(&values)?));
    }
    note(7, "noisy_aggregate_reconstruction", json!({ "coordinates": d, "received": points.len(), "correctable": rec.max_errors() }));

    let noise_raw: Vec<i128> = noise_shares
        .iter()
        .map(|s| reconstruct(s, &cfg).map(|v| codec.raw(v)))
        .collect::<Result<_, _>>()?;
    let decode = |raw: &[i128]| raw.iter().map(|&r| r as f64 / codec.scale()).collect::<ParamVector>();
    Ok(SecureRoundOutput {
        aggregate: decode(&aggregate_raw),
        noise: decode(&noise_raw),
        aggregate_raw,
        noise_raw,
        valid,
        transcript: log,
    })
}
