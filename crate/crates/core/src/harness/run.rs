//! The round loop, privacy bookkeeping and output files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma_eff, solve_epsilon, PrivacyConfig};
use crate::attacks::{Adversary, AttackKind};
use crate::baselines::{AggregationRule, RuleKind};
use crate::data::{load_idx_dataset, Dataset, SyntheticTask};
use crate::error::{Error, Result};
use crate::learner::{accuracy, init_model, loss, ModelSpec};
use crate::protocol::{run_round, schedule, ClientState, RoundEnv, ServerState};
use crate::rng::RngStream;
use crate::secure_agg::TranscriptEntry;

use super::config::{DataConfig, ExperimentConfig};

pub const METRICS_HEADER: [&str; 7] =
    ["round", "test_accuracy", "train_loss", "epsilon_spent", "clip_fraction_record", "clip_fraction_client", "agg_error_sq"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub test_accuracy: f64,
    pub train_loss: f64,
    pub epsilon_spent: f64,
    pub clip_fraction_record: f64,
    pub clip_fraction_client: f64,
    /// Empty unless aggregation error is tracked.
    pub agg_error_sq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rule: RuleKind,
    pub attack: AttackKind,
    pub rounds: usize,
    /// Mean test accuracy over rounds `ceil(0.9 T)..=T`.
    pub final_accuracy: f64,
    pub final_window: (usize, usize),
    pub epsilon_final: f64,
    pub noise: NoiseCalibration,
    pub byzantine: Vec<usize>,
    pub n_clients: usize,
    pub param_count: usize,
    pub rounds_skipped: usize,
}

/// How the configured privacy level maps onto each rule's noise parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalibration {
    /// Noise standard deviation over sensitivity, shared by all private rules.
    pub multiplier: f64,
    pub sigma: f64,
    pub sigma_local: f64,
    /// Smallest client dataset, which sets the sensitivity.
    pub n_min: usize,
}

/// First round of the final-accuracy window.
pub fn final_window_start(rounds: usize) -> usize {
    ((0.9 * rounds as f64).ceil() as usize).max(1)
}

pub fn final_accuracy(rows: &[MetricsRow], rounds: usize) -> f64 {
    let start = final_window_start(rounds);
    let window: Vec<f64> = rows.iter().filter(|r| r.round >= start).map(|r| r.test_accuracy).collect();
    window.iter().sum::<f64>() / window.len().max(1) as f64
}

/// Client sampling rate seen by the accountant: local randomizers give no
/// amplification from client sampling for DP-LFH.
fn accountant_q(kind: RuleKind, q: f64) -> f64 {
    if kind == RuleKind::DpLfh {
        1.0
    } else {
        q
    }
}

/// `max(R / 2C, p n)`, the factor between the DP-BREM `sigma` and its effective multiplier.
fn brem_factor(record_bound: f64, client_bound: f64, p: f64, n: usize) -> f64 {
    (record_bound / (2.0 * client_bound)).max(p * n as f64)
}

/// Resolves `privacy.sigma` / `privacy.target_epsilon` into rule parameters.
pub fn calibrate(cfg: &ExperimentConfig, n_min: usize, d: usize) -> Result<NoiseCalibration> {
    let r = &cfg.rule;
    let kind = r.kind;
    let pn = r.p * n_min as f64;
    let factor = brem_factor(r.record_bound, r.client_bound, r.p, n_min);
    let multiplier = match (cfg.privacy.sigma, cfg.privacy.target_epsilon) {
        _ if !kind.is_private() => 0.0,
        (_, Some(eps)) => calibrate_sigma_eff(eps, cfg.privacy.delta, cfg.rounds, accountant_q(kind, r.q), r.p)?,
        (Some(s), None) if s > 0.0 => s * factor,
        (Some(_), None) => 0.0,
        (None, None) => 0.0,
    };
    let (sigma, sigma_local) = match kind {
        RuleKind::Lfh => (0.0, 0.0),
        RuleKind::DpBrem | RuleKind::DpFedSgd => (multiplier / factor, 0.0),
        RuleKind::DpCm => (multiplier / pn, 0.0),
        RuleKind::DpLfh | RuleKind::DdpRp => (0.0, multiplier / pn),
        RuleKind::DpRsa => (0.0, 2.0 * (d as f64).sqrt() * multiplier),
    };
    Ok(NoiseCalibration { multiplier, sigma, sigma_local, n_min })
}

/// Accountant inputs matching the calibrated noise, with `sigma` in DP-BREM units.
pub fn accountant_config(cfg: &ExperimentConfig, cal: &NoiseCalibration) -> PrivacyConfig {
    let r = &cfg.rule;
    PrivacyConfig {
        rounds: cfg.rounds,
        q: accountant_q(r.kind, r.q),
        p: r.p,
        n_records: cal.n_min,
        record_bound: r.record_bound,
        client_bound: r.client_bound,
        sigma: cal.multiplier / brem_factor(r.record_bound, r.client_bound, r.p, cal.n_min),
        delta: cfg.privacy.delta,
    }
}

/// Per-round composition of the effective multipliers into `epsilon_spent`.
#[derive(Debug, Clone)]
pub struct EpsilonTracker {
    q: f64,
    p: f64,
    delta: f64,
    /// `sum_s (exp(1 / (2 sigma_s^2)) - 1)` per distinct client size.
    acc: Vec<(usize, f64)>,
    private: bool,
}

impl EpsilonTracker {
    pub fn new(cfg: &ExperimentConfig, sizes: &[usize]) -> Self {
        let mut distinct: Vec<usize> = sizes.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        Self {
            q: accountant_q(cfg.rule.kind, cfg.rule.q),
            p: cfg.rule.p,
            delta: cfg.privacy.delta,
            acc: distinct.into_iter().map(|n| (n, 0.0)).collect(),
            private: cfg.rule.kind.is_private(),
        }
    }

    /// Adds one round and returns the worst client's epsilon so far.
    pub fn step(&mut self, cal: &NoiseCalibration, kind: RuleKind, record_bound: f64, client_bound: f64, d: usize) -> Result<f64> {
        if !self.private || cal.multiplier == 0.0 {
            return Ok(f64::INFINITY);
        }
        let mut worst = 0.0f64;
        for (n, acc) in self.acc.iter_mut() {
            let z = match kind {
                RuleKind::DpBrem | RuleKind::DpFedSgd => cal.sigma * brem_factor(record_bound, client_bound, self.p, *n),
                RuleKind::DpCm => cal.sigma * self.p * *n as f64,
                RuleKind::DpLfh | RuleKind::DdpRp => cal.sigma_local * self.p * *n as f64,
                RuleKind::DpRsa => cal.sigma_local / (2.0 * (d as f64).sqrt()),
                RuleKind::Lfh => unreachable!("non-private rule"),
            };
            *acc += (1.0 / (2.0 * z * z)).exp_m1();
            let mu = self.q * self.p * acc.sqrt();
            worst = worst.max(if mu.is_finite() { solve_epsilon(mu, self.delta)? } else { f64::INFINITY });
        }
        Ok(worst)
    }
}

/// Everything built from a config before the first round.
pub struct Setup {
    pub spec: ModelSpec,
    pub clients: Vec<ClientState>,
    pub test: Dataset,
    pub server: ServerState,
    pub rule: AggregationRule,
    pub adversary: Adversary,
    pub calibration: NoiseCalibration,
}

fn load_data(cfg: &ExperimentConfig, root: &RngStream) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataConfig::Synthetic { n_train, n_test, d_in, classes, class_separation, label_noise } => {
            let task = SyntheticTask::new(&root.derive("task"), *d_in, *classes, *class_separation)?;
            let train = task.sample(&root.derive("train"), *n_train, *label_noise)?;
            let test = task.sample(&root.derive("test"), (*n_test).max(*classes), 0.0)?;
            Ok((train, test))
        }
        DataConfig::Idx { train_images, train_labels, test_images, test_labels, classes } => {
            Ok((load_idx_dataset(train_images, train_labels, *classes)?, load_idx_dataset(test_images, test_labels, *classes)?))
        }
    }
}

pub fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    cfg.validate()?;
    let root = RngStream::from_seed(cfg.seed);
    let (train, test) = load_data(cfg, &root.derive("data"))?;
    let spec = cfg.model.spec(train.feature_dim(), train.classes);
    let parts = cfg.partition.partition(&train, &root.derive("partition"))?;
    let r = &cfg.rule;
    let clients: Vec<ClientState> = parts
        .into_iter()
        .enumerate()
        .map(|(i, d)| ClientState::new(i, d, r.p, r.beta))
        .collect::<Result<_>>()?;
    let n_min = clients.iter().map(|c| c.data.len()).min().ok_or(Error::EmptyDataset)?;
    let d = spec.param_count();
    let calibration = calibrate(cfg, n_min, d)?;
    let adversary = Adversary::new(cfg.attack, clients.len(), &root.derive("byzantine"))?;
    let rule = AggregationRule {
        kind: r.kind,
        sigma: calibration.sigma,
        sigma_local: calibration.sigma_local,
        range_bound: r.range_bound,
        tau: r.tau.unwrap_or((clients.len() - adversary.byzantine().len()).max(1)),
    };
    rule.validate()?;
    let server = ServerState::new(
        init_model(&spec, &root.derive("init")),
        schedule(r.record_bound, r.record_bound_end(), cfg.rounds),
        schedule(r.client_bound, r.client_bound_end(), cfg.rounds),
        schedule(r.lr, r.lr_end, cfg.rounds),
        calibration.sigma,
        r.q,
    )?;
    Ok(Setup { spec, clients, test, server, rule, adversary, calibration })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
    pub transcript: Vec<TranscriptEntry>,
}

/// Runs all rounds in memory.
pub fn simulate(cfg: &ExperimentConfig) -> Result<RunResult> {
    let Setup { spec, mut clients, test, mut server, rule, adversary, calibration } = setup(cfg)?;
    let root = RngStream::from_seed(cfg.seed);
    let sizes: Vec<usize> = clients.iter().map(|c| c.data.len()).collect();
    let mut eps = EpsilonTracker::new(cfg, &sizes);
    let secure = cfg.secure.enabled.then(|| cfg.secure.mode());
    let env = RoundEnv {
        rule: &rule,
        spec: &spec,
        adversary: Some(&adversary),
        secure: secure.as_ref(),
        track_aggregation_error: cfg.output.track_aggregation_error,
    };
    let train_all = Dataset::new(clients.iter().flat_map(|c| c.data.records.iter().cloned()).collect(), test.classes)?;
    let d = spec.param_count();
    let mut rows = Vec::with_capacity(cfg.rounds);
    let mut transcript = Vec::new();
    let mut skipped = 0;
    for t in 1..=cfg.rounds {
        let (r, c, _) = server.bounds(t);
        let report = run_round(&mut server, &mut clients, &env, t, &root.derive_indexed("round", t as u64))?;
        if !report.updated {
            skipped += 1;
        }
        transcript.extend(report.transcript);
        rows.push(MetricsRow {
            round: t,
            test_accuracy: accuracy(&server.theta, &test, &spec)?,
            train_loss: loss(&server.theta, &train_all, &spec)?,
            epsilon_spent: eps.step(&calibration, rule.kind, r, c, d)?,
            clip_fraction_record: report.clip_fraction_record,
            clip_fraction_client: report.output.diagnostics.clip_fraction_client,
            agg_error_sq: report.agg_error_sq,
        });
    }
    let summary = Summary {
        rule: rule.kind,
        attack: cfg.attack.kind,
        rounds: cfg.rounds,
        final_accuracy: final_accuracy(&rows, cfg.rounds),
        final_window: (final_window_start(cfg.rounds), cfg.rounds),
        epsilon_final: rows.last().map_or(f64::INFINITY, |r| r.epsilon_spent),
        noise: calibration,
        byzantine: adversary.byzantine().to_vec(),
        n_clients: clients.len(),
        param_count: d,
        rounds_skipped: skipped,
    };
    Ok(RunResult { rows, summary, transcript })
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.serialize((
            r.round,
            r.test_accuracy,
            r.train_loss,
            r.epsilon_spent,
            r.clip_fraction_record,
            r.clip_fraction_client,
            r.agg_error_sq,
        ))
        .map_err(|e| Error::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    let header: Vec<String> = r.headers().map_err(|e| Error::Io(e.to_string()))?.iter().map(String::from).collect();
    if header != METRICS_HEADER {
        return Err(Error::Io(format!("unexpected metrics header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(|e| Error::Io(e.to_string()))).collect()
}

/// Output files of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFiles {
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub transcript: Option<PathBuf>,
}

/// Runs the experiment and writes `metrics.csv`, `summary.json` and, when
/// configured, the secure-aggregation transcript.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Summary, RunFiles)> {
    let result = simulate(cfg)?;
    let dir = &cfg.output.dir;
    let files = RunFiles {
        metrics: dir.join("metrics.csv"),
        summary: dir.join("summary.json"),
        transcript: cfg.secure.transcript.clone(),
    };
    write_atomic(&files.metrics, &metrics_csv(&result.rows)?)?;
    let summary = serde_json::to_vec_pretty(&result.summary).map_err(|e| Error::Io(e.to_string()))?;
    write_atomic(&files.summary, &summary)?;
    if let Some(path) = &files.transcript {
        let mut out = Vec::new();
        for entry in &result.transcript {
            serde_json::to_writer(&mut out, entry).map_err(|e| Error::Io(e.to_string()))?;
            out.push(b'\n');
        }
        write_atomic(path, &out)?;
    }
    Ok((result.summary, files))
}
