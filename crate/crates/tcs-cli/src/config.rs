//! Experiment configuration file handling: a flat JSON object with every
//! experiment knob explicit, command-line overrides, and conversion into the
//! simulator's validated configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use tcs_core::codec::QuantizerSpec;
use tcs_core::compress::Fairness;
use tcs_core::fedsim::{ExperimentConfig, RunScheme};
use tcs_core::models::ModelSpec;

use crate::error::CliError;

/// The on-disk configuration schema. Every field of the experiment grid is
/// required; the only defaults are `quantizer` ("none"), `fairness` ("none"
/// with zero floors), `momentum` (0), and the sparsity ratios (0, which only
/// a dense run accepts). Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    /// "logreg" or "mlp".
    pub model: String,
    pub n_classes: usize,
    pub n_features: usize,
    /// Hidden width; required for "mlp", rejected for "logreg".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub cluster_spread: f64,
    pub n_clients: usize,
    pub local_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// "none" (dense), "topk", "randk", or "tcs".
    pub scheme: String,
    #[serde(default)]
    pub phi_global: f64,
    #[serde(default)]
    pub phi_local: f64,
    /// "none", "plf", or "lf".
    #[serde(default = "default_none")]
    pub fairness: String,
    #[serde(default)]
    pub phi_min_global: f64,
    #[serde(default)]
    pub phi_min_local: f64,
    /// "none", "sign", or "frac:P" with P in 1..=65535.
    #[serde(default = "default_none")]
    pub quantizer: String,
    pub ref_lr: f64,
    pub ref_batch: usize,
    pub warmup_epochs: usize,
    /// `[[epoch, factor], ...]` with strictly increasing epochs.
    pub milestones: Vec<(usize, f64)>,
    pub weight_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    pub seed: u64,
}

fn default_none() -> String {
    "none".to_owned()
}

/// Parse the config file, apply `--set key=value` overrides in order, then
/// an optional `--seed`. Returns the resolved raw config (what the echo file
/// records) alongside the validated simulator configuration.
pub fn load_config(
    path: &Path,
    sets: &[String],
    seed: Option<u64>,
) -> Result<(RawConfig, ExperimentConfig), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: not valid JSON: {e}", path.display())))?;
    let map = value
        .as_object_mut()
        .ok_or_else(|| CliError::config(format!("{}: config must be a JSON object", path.display())))?;

    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set `{set}`: expected KEY=VALUE")))?;
        // Accept any JSON literal; bare words (tcs, lf, frac:4) are strings.
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
        map.insert(key.to_owned(), parsed);
    }
    if let Some(seed) = seed {
        map.insert("seed".to_owned(), Value::from(seed));
    }

    let raw: RawConfig = serde_json::from_value(value)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let cfg = raw.to_experiment()?;
    Ok((raw, cfg))
}

impl RawConfig {
    pub fn to_experiment(&self) -> Result<ExperimentConfig, CliError> {
        let model = self.model_spec()?;
        let mut cfg = ExperimentConfig::new(model);
        cfg.n_train = self.n_train;
        cfg.n_test = self.n_test;
        cfg.cluster_spread = self.cluster_spread;
        cfg.n_clients = self.n_clients;
        cfg.local_steps = self.local_steps;
        cfg.epochs = self.epochs;
        cfg.batch_size = self.batch_size;
        cfg.scheme = parse_scheme(&self.scheme)?;
        cfg.phi_global = self.phi_global;
        cfg.phi_local = self.phi_local;
        cfg.fairness = parse_fairness(&self.fairness)?;
        cfg.phi_min_global = self.phi_min_global;
        cfg.phi_min_local = self.phi_min_local;
        cfg.quantizer = parse_quantizer(&self.quantizer)?;
        cfg.ref_lr = self.ref_lr;
        cfg.ref_batch = self.ref_batch;
        cfg.warmup_epochs = self.warmup_epochs;
        cfg.milestones = self.milestones.clone();
        cfg.weight_decay = self.weight_decay;
        cfg.momentum = self.momentum;
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn model_spec(&self) -> Result<ModelSpec, CliError> {
        if self.n_classes < 2 {
            return Err(CliError::field("n_classes", "need at least two classes"));
        }
        if self.n_features < 1 {
            return Err(CliError::field("n_features", "need at least one feature"));
        }
        match self.model.as_str() {
            "logreg" => match self.hidden {
                None => Ok(ModelSpec::logreg(self.n_classes, self.n_features)),
                Some(_) => Err(CliError::field("hidden", "only the mlp model has a hidden layer")),
            },
            "mlp" => match self.hidden {
                Some(h) if h >= 1 => Ok(ModelSpec::mlp(self.n_classes, self.n_features, h)),
                Some(_) => Err(CliError::field("hidden", "need at least one hidden unit")),
                None => Err(CliError::field("hidden", "the mlp model requires a hidden width")),
            },
            other => Err(CliError::field(
                "model",
                format!("unknown model `{other}` (expected logreg or mlp)"),
            )),
        }
    }
}

fn parse_scheme(s: &str) -> Result<RunScheme, CliError> {
    match s {
        "none" => Ok(RunScheme::None),
        "topk" => Ok(RunScheme::TopK),
        "randk" => Ok(RunScheme::RandK),
        "tcs" => Ok(RunScheme::Tcs),
        other => Err(CliError::field(
            "scheme",
            format!("unknown scheme `{other}` (expected none, topk, randk, or tcs)"),
        )),
    }
}

fn parse_fairness(s: &str) -> Result<Fairness, CliError> {
    match s {
        "none" => Ok(Fairness::None),
        "plf" => Ok(Fairness::Plf),
        "lf" => Ok(Fairness::Lf),
        other => Err(CliError::field(
            "fairness",
            format!("unknown fairness `{other}` (expected none, plf, or lf)"),
        )),
    }
}

/// Quantizer syntax shared by the config file and the codec subcommands.
pub fn parse_quantizer(s: &str) -> Result<QuantizerSpec, CliError> {
    if s == "none" {
        return Ok(QuantizerSpec::none());
    }
    if s == "sign" {
        return Ok(QuantizerSpec::scaled_sign());
    }
    if let Some(p) = s.strip_prefix("frac:") {
        let p: u16 = p
            .parse()
            .map_err(|_| CliError::field("quantizer", format!("bad interval count in `{s}`")))?;
        if p < 1 {
            return Err(CliError::field("quantizer", "fractional needs at least one interval"));
        }
        return Ok(QuantizerSpec::fractional(p));
    }
    Err(CliError::field(
        "quantizer",
        format!("unknown quantizer `{s}` (expected none, sign, or frac:P)"),
    ))
}
