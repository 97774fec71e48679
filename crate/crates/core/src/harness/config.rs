//! Experiment configuration: TOML documents with environment overrides.
//!
//! Any key can be overridden from the environment with the `DPBREM__` prefix
//! and `__` between path segments, e.g. `DPBREM__RULE__CLIENT_BOUND=2.5` sets
//! `rule.client_bound`. Values are read as TOML literals and fall back to
//! plain strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::baselines::RuleKind;
use crate::data::PartitionSpec;
use crate::error::{Error, Result};
use crate::learner::ModelSpec;
use crate::protocol::SecureMode;
use crate::secure_agg::Field;

pub const ENV_PREFIX: &str = "DPBREM__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub data: DataConfig,
    pub partition: PartitionSpec,
    #[serde(default)]
    pub model: ModelConfig,
    pub rule: RuleConfig,
    #[serde(default)]
    pub privacy: PrivacyBlock,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub secure: SecureConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian class clusters.
    Synthetic {
        n_train: usize,
        n_test: usize,
        d_in: usize,
        classes: usize,
        #[serde(default = "default_separation")]
        class_separation: f64,
        #[serde(default)]
        label_noise: f64,
    },
    /// MNIST-style IDX files.
    Idx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf, classes: usize },
}

fn default_separation() -> f64 {
    4.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ModelConfig {
    #[default]
    Logistic,
    Mlp {
        hidden: usize,
    },
}

impl ModelConfig {
    pub fn spec(&self, d_in: usize, classes: usize) -> ModelSpec {
        match *self {
            ModelConfig::Logistic => ModelSpec::LogisticRegression { d_in, classes },
            ModelConfig::Mlp { hidden } => ModelSpec::Mlp { d_in, hidden, classes },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleConfig {
    pub kind: RuleKind,
    pub beta: f64,
    /// Record sampling rate.
    pub p: f64,
    /// Client sampling rate.
    pub q: f64,
    /// `R` at the first round.
    pub record_bound: f64,
    /// `R` at the last round; defaults to `0.3 * record_bound`.
    pub record_bound_end: Option<f64>,
    pub client_bound: f64,
    /// Defaults to `0.3 * client_bound`.
    pub client_bound_end: Option<f64>,
    pub lr: f64,
    pub lr_end: f64,
    /// Per-coordinate acceptance range for `ddp_rp`.
    pub range_bound: f64,
    /// Honest clients `ddp_rp` splits noise across; defaults to the honest count.
    pub tau: Option<usize>,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            kind: RuleKind::DpBrem,
            beta: 0.9,
            p: 0.05,
            q: 1.0,
            record_bound: 10.0,
            record_bound_end: None,
            client_bound: 1.0,
            client_bound_end: None,
            lr: 0.1,
            lr_end: 0.01,
            range_bound: f64::INFINITY,
            tau: None,
        }
    }
}

impl RuleConfig {
    pub fn record_bound_end(&self) -> f64 {
        self.record_bound_end.unwrap_or(0.3 * self.record_bound)
    }

    pub fn client_bound_end(&self) -> f64 {
        self.client_bound_end.unwrap_or(0.3 * self.client_bound)
    }
}

/// Noise level: give `sigma` (the DP-BREM multiplier; other private rules get
/// the same privacy level) or `target_epsilon`, not both. Neither means no noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyBlock {
    pub delta: f64,
    pub sigma: Option<f64>,
    pub target_epsilon: Option<f64>,
}

impl Default for PrivacyBlock {
    fn default() -> Self {
        Self { delta: 1e-6, sigma: None, target_epsilon: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecureConfig {
    pub enabled: bool,
    pub threshold_fraction: f64,
    pub modulus: u64,
    pub frac_bits: u32,
    pub uniform_bits: u32,
    /// JSON-lines transcript of every protocol step.
    pub transcript: Option<PathBuf>,
}

impl Default for SecureConfig {
    fn default() -> Self {
        let m = SecureMode::default();
        Self {
            enabled: false,
            threshold_fraction: m.threshold_fraction,
            modulus: m.modulus,
            frac_bits: m.frac_bits,
            uniform_bits: m.uniform_bits,
            transcript: None,
        }
    }
}

impl SecureConfig {
    pub fn mode(&self) -> SecureMode {
        SecureMode {
            threshold_fraction: self.threshold_fraction,
            modulus: self.modulus,
            frac_bits: self.frac_bits,
            uniform_bits: self.uniform_bits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also compute the honest unclipped momenta and report `agg_error_sq`.
    pub track_aggregation_error: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default"), track_aggregation_error: false }
    }
}

impl ExperimentConfig {
    /// Parses a TOML document and applies `overrides` (`DPBREM__A__B` keys).
    pub fn from_toml_str<I, K, V>(text: &str, overrides: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        for (k, v) in overrides {
            let Some(path) = k.as_ref().strip_prefix(ENV_PREFIX) else { continue };
            let path: Vec<String> = path.split("__").map(str::to_ascii_lowercase).collect();
            set_path(&mut doc, &path.join("."), parse_value(v.as_ref()))?;
        }
        Self::from_table(doc)
    }

    pub fn from_table(doc: toml::Table) -> Result<Self> {
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, std::env::vars())
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Checks cross-field consistency; every problem is reported with its key path.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        let mut check = |ok: bool, path: &str, msg: String| {
            if !ok {
                issues.push(format!("{path}: {msg}"));
            }
        };
        check(self.rounds >= 1, "rounds", "must be at least 1".into());
        match &self.data {
            DataConfig::Synthetic { n_train, n_test, d_in, classes, class_separation, label_noise } => {
                check(*classes >= 2, "data.classes", format!("need at least 2, got {classes}"));
                check(*d_in >= 1, "data.d_in", "must be positive".into());
                check(*n_train >= *classes, "data.n_train", format!("must be at least the class count, got {n_train}"));
                check(*n_test >= 1, "data.n_test", "must be positive".into());
                check(*class_separation > 0.0, "data.class_separation", format!("must be positive, got {class_separation}"));
                check((0.0..1.0).contains(label_noise), "data.label_noise", format!("must lie in [0,1), got {label_noise}"));
            }
            DataConfig::Idx { classes, .. } => check(*classes >= 2, "data.classes", format!("need at least 2, got {classes}")),
        }
        let n = self.partition.n_clients();
        check(n >= 1, "partition.n_clients", "must be at least 1".into());
        if let ModelConfig::Mlp { hidden } = self.model {
            check(hidden >= 1, "model.hidden", "must be positive".into());
        }
        let r = &self.rule;
        check((0.0..1.0).contains(&r.beta), "rule.beta", format!("must lie in [0,1), got {}", r.beta));
        check(r.p > 0.0 && r.p <= 1.0, "rule.p", format!("must lie in (0,1], got {}", r.p));
        check(r.q > 0.0 && r.q <= 1.0, "rule.q", format!("must lie in (0,1], got {}", r.q));
        for (path, v) in [
            ("rule.record_bound", r.record_bound),
            ("rule.record_bound_end", r.record_bound_end()),
            ("rule.client_bound", r.client_bound),
            ("rule.client_bound_end", r.client_bound_end()),
            ("rule.range_bound", r.range_bound),
        ] {
            check(v > 0.0, path, format!("must be positive, got {v}"));
        }
        for (path, v) in [("rule.lr", r.lr), ("rule.lr_end", r.lr_end)] {
            check(v > 0.0 && v.is_finite(), path, format!("must be positive and finite, got {v}"));
        }
        check(r.tau != Some(0), "rule.tau", "must be at least 1".into());
        let pr = &self.privacy;
        check(pr.delta > 0.0 && pr.delta < 1.0, "privacy.delta", format!("must lie in (0,1), got {}", pr.delta));
        check(
            !(pr.sigma.is_some() && pr.target_epsilon.is_some()),
            "privacy",
            "set sigma or target_epsilon, not both".into(),
        );
        if let Some(s) = pr.sigma {
            check(s >= 0.0 && s.is_finite(), "privacy.sigma", format!("must be finite and nonnegative, got {s}"));
        }
        if let Some(e) = pr.target_epsilon {
            check(e > 0.0 && e.is_finite(), "privacy.target_epsilon", format!("must be positive, got {e}"));
        }
        let noisy = pr.target_epsilon.is_some() || pr.sigma.is_some_and(|s| s > 0.0);
        if noisy && r.kind.is_private() {
            check(r.record_bound.is_finite(), "rule.record_bound", "must be finite when noise is added".into());
        }
        let a = &self.attack;
        check((0.0..0.5).contains(&a.byz_fraction), "attack.byz_fraction", format!("must lie in [0,0.5), got {}", a.byz_fraction));
        if let Err(e) = a.validate() {
            check(false, "attack", e.to_string());
        }
        let s = &self.secure;
        if s.enabled {
            check(r.kind == RuleKind::DpBrem, "secure.enabled", format!("secure aggregation supports dp_brem only, not {}", r.kind));
            check(r.client_bound.is_finite(), "rule.client_bound", "must be finite in secure mode".into());
            check(
                s.threshold_fraction > 0.0 && s.threshold_fraction <= 1.0,
                "secure.threshold_fraction",
                format!("must lie in (0,1], got {}", s.threshold_fraction),
            );
            check(Field::new(s.modulus).is_ok(), "secure.modulus", format!("{} is not a prime below 2^62", s.modulus));
            check(s.frac_bits >= 1 && s.frac_bits <= 40, "secure.frac_bits", format!("must lie in 1..=40, got {}", s.frac_bits));
            check(
                s.uniform_bits >= 1 && s.uniform_bits <= s.frac_bits,
                "secure.uniform_bits",
                format!("must lie in 1..=frac_bits, got {}", s.uniform_bits),
            );
        } else {
            check(s.transcript.is_none(), "secure.transcript", "requires secure.enabled".into());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}

/// Reads a TOML literal, or keeps the text as a string.
pub fn parse_value(text: &str) -> toml::Value {
    match format!("v = {text}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.to_string())),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

/// Sets a dotted key path, creating intermediate tables.
pub fn set_path(doc: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(vec![format!("{path}: empty key segment")]));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for p in parents {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| Error::Config(vec![format!("{path}: {p} is not a table")]))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
