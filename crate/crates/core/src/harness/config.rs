//! Training configuration and its flat `key = value` text format.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Every
//! key is optional and unknown keys are errors. The canonical rendering
//! ([`TrainingConfig::to_text`]) lists every key in a fixed order and is
//! what the run-directory hash is computed over.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::betamix::BetaMixtureModel;
use crate::data::{Augmentation, DatasetSpec};
use crate::decide::DecisionRule;
use crate::error::{Error, Result};
use crate::losses::{AblationFlags, LossWeights};
use crate::nn::{Activation, Architecture};
use crate::optim::Schedule;
use crate::subspace::ScoreKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleKind {
    Sampled,
    Otsu,
    Weighted,
}

impl RuleKind {
    pub const ALL: [RuleKind; 3] = [RuleKind::Sampled, RuleKind::Otsu, RuleKind::Weighted];

    pub fn name(self) -> &'static str {
        match self {
            RuleKind::Sampled => "sampled",
            RuleKind::Otsu => "otsu",
            RuleKind::Weighted => "weighted",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        RuleKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub seed: u64,
    // dataset
    pub input_dim: usize,
    pub num_id_classes: usize,
    pub num_ood_clusters: usize,
    pub samples_per_class: usize,
    pub labeled_per_class: usize,
    pub test_per_class: usize,
    pub ood_fraction: f64,
    pub cluster_spread: f64,
    pub cluster_separation: f64,
    // network
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    // objective
    pub w_semi: f64,
    pub w_self: f64,
    pub w_sub: f64,
    pub w_reg: f64,
    pub tau: f64,
    pub drop_self: bool,
    pub drop_sub: bool,
    // optimization
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub eta0: f64,
    pub gamma: f64,
    pub sgd_momentum: f64,
    pub ema_momentum: f64,
    pub batch_size: usize,
    pub mu: usize,
    // ID/OOD modelling
    pub pi: f64,
    pub epsilon: f64,
    pub lambda_beta: f64,
    pub lambda_means: f64,
    pub decision: RuleKind,
    pub otsu_bins: usize,
    pub otsu_momentum: f64,
    pub otsu_init: f64,
    // reporting
    pub score_kind: ScoreKind,
    pub eval_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let data = DatasetSpec::default();
        let arch = Architecture::default();
        let w = LossWeights::default();
        let s = Schedule::default();
        Self {
            seed: 0,
            input_dim: data.input_dim,
            num_id_classes: data.num_id_classes,
            num_ood_clusters: data.num_ood_clusters,
            samples_per_class: data.samples_per_class,
            labeled_per_class: data.labeled_per_class,
            test_per_class: data.test_per_class,
            ood_fraction: data.ood_fraction,
            cluster_spread: data.cluster_spread,
            cluster_separation: data.cluster_separation,
            hidden: arch.hidden,
            feature_dim: 64,
            activation: arch.activation,
            w_semi: w.w_semi,
            w_self: 30.0,
            w_sub: w.w_sub,
            w_reg: w.w_reg,
            tau: w.tau,
            drop_self: false,
            drop_sub: false,
            total_steps: s.total_steps,
            warmup_steps: s.warmup_steps,
            eta0: s.eta0,
            gamma: s.gamma,
            sgd_momentum: 0.9,
            ema_momentum: 0.999,
            batch_size: 32,
            mu: 4,
            pi: 0.5,
            epsilon: 0.1,
            lambda_beta: 0.97,
            lambda_means: 0.999,
            decision: RuleKind::Sampled,
            otsu_bins: crate::decide::DEFAULT_OTSU_BINS,
            otsu_momentum: 0.999,
            otsu_init: 0.5,
            score_kind: ScoreKind::Subspace,
            eval_every: 1000,
        }
    }
}

/// Every key, in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "input_dim",
    "num_id_classes",
    "num_ood_clusters",
    "samples_per_class",
    "labeled_per_class",
    "test_per_class",
    "ood_fraction",
    "cluster_spread",
    "cluster_separation",
    "hidden",
    "feature_dim",
    "activation",
    "w_semi",
    "w_self",
    "w_sub",
    "w_reg",
    "tau",
    "drop_self",
    "drop_sub",
    "K",
    "K_p",
    "eta0",
    "gamma",
    "sgd_momentum",
    "ema_momentum",
    "batch_size",
    "mu",
    "pi",
    "epsilon",
    "lambda_beta",
    "lambda_means",
    "decision",
    "otsu_bins",
    "otsu_momentum",
    "otsu_init",
    "score_kind",
    "eval_every",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Parse(format!("{key}: cannot parse '{v}': {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Parse(format!(
            "{key}: expected true or false, got '{v}'"
        ))),
    }
}

impl TrainingConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "input_dim" => self.input_dim = parse_num(key, v)?,
            "num_id_classes" => self.num_id_classes = parse_num(key, v)?,
            "num_ood_clusters" => self.num_ood_clusters = parse_num(key, v)?,
            "samples_per_class" => self.samples_per_class = parse_num(key, v)?,
            "labeled_per_class" => self.labeled_per_class = parse_num(key, v)?,
            "test_per_class" => self.test_per_class = parse_num(key, v)?,
            "ood_fraction" => self.ood_fraction = parse_num(key, v)?,
            "cluster_spread" => self.cluster_spread = parse_num(key, v)?,
            "cluster_separation" => self.cluster_separation = parse_num(key, v)?,
            "hidden" if v.is_empty() => self.hidden.clear(),
            "hidden" => {
                self.hidden = v
                    .split(',')
                    .map(|h| parse_num(key, h.trim()))
                    .collect::<Result<_>>()?
            }
            "feature_dim" => self.feature_dim = parse_num(key, v)?,
            "activation" => {
                self.activation = Activation::from_name(v)
                    .ok_or_else(|| Error::Parse(format!("activation: unknown '{v}'")))?
            }
            "w_semi" => self.w_semi = parse_num(key, v)?,
            "w_self" => self.w_self = parse_num(key, v)?,
            "w_sub" => self.w_sub = parse_num(key, v)?,
            "w_reg" => self.w_reg = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "drop_self" => self.drop_self = parse_bool(key, v)?,
            "drop_sub" => self.drop_sub = parse_bool(key, v)?,
            "K" => self.total_steps = parse_num(key, v)?,
            "K_p" => self.warmup_steps = parse_num(key, v)?,
            "eta0" => self.eta0 = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "sgd_momentum" => self.sgd_momentum = parse_num(key, v)?,
            "ema_momentum" => self.ema_momentum = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "mu" => self.mu = parse_num(key, v)?,
            "pi" => self.pi = parse_num(key, v)?,
            "epsilon" => self.epsilon = parse_num(key, v)?,
            "lambda_beta" => self.lambda_beta = parse_num(key, v)?,
            "lambda_means" => self.lambda_means = parse_num(key, v)?,
            "decision" => {
                self.decision = RuleKind::from_name(v)
                    .ok_or_else(|| Error::Parse(format!("decision: unknown '{v}'")))?
            }
            "otsu_bins" => self.otsu_bins = parse_num(key, v)?,
            "otsu_momentum" => self.otsu_momentum = parse_num(key, v)?,
            "otsu_init" => self.otsu_init = parse_num(key, v)?,
            "score_kind" => {
                self.score_kind = ScoreKind::from_name(v)
                    .ok_or_else(|| Error::Parse(format!("score_kind: unknown '{v}'")))?
            }
            "eval_every" => self.eval_every = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Text value of one key, as [`Self::set`] accepts it.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "seed" => self.seed.to_string(),
            "input_dim" => self.input_dim.to_string(),
            "num_id_classes" => self.num_id_classes.to_string(),
            "num_ood_clusters" => self.num_ood_clusters.to_string(),
            "samples_per_class" => self.samples_per_class.to_string(),
            "labeled_per_class" => self.labeled_per_class.to_string(),
            "test_per_class" => self.test_per_class.to_string(),
            "ood_fraction" => self.ood_fraction.to_string(),
            "cluster_spread" => self.cluster_spread.to_string(),
            "cluster_separation" => self.cluster_separation.to_string(),
            "hidden" => self
                .hidden
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "feature_dim" => self.feature_dim.to_string(),
            "activation" => self.activation.name().to_string(),
            "w_semi" => self.w_semi.to_string(),
            "w_self" => self.w_self.to_string(),
            "w_sub" => self.w_sub.to_string(),
            "w_reg" => self.w_reg.to_string(),
            "tau" => self.tau.to_string(),
            "drop_self" => self.drop_self.to_string(),
            "drop_sub" => self.drop_sub.to_string(),
            "K" => self.total_steps.to_string(),
            "K_p" => self.warmup_steps.to_string(),
            "eta0" => self.eta0.to_string(),
            "gamma" => self.gamma.to_string(),
            "sgd_momentum" => self.sgd_momentum.to_string(),
            "ema_momentum" => self.ema_momentum.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "mu" => self.mu.to_string(),
            "pi" => self.pi.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "lambda_beta" => self.lambda_beta.to_string(),
            "lambda_means" => self.lambda_means.to_string(),
            "decision" => self.decision.name().to_string(),
            "otsu_bins" => self.otsu_bins.to_string(),
            "otsu_momentum" => self.otsu_momentum.to_string(),
            "otsu_init" => self.otsu_init.to_string(),
            "score_kind" => self.score_kind.name().to_string(),
            "eval_every" => self.eval_every.to_string(),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        })
    }

    /// Parses the text format on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    n + 1
                ))
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key '{k}'",
                    n + 1
                )));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Parse(m) => Error::Parse(format!("line {}: {m}", n + 1)),
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `--key value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| Error::Parse(format!("expected '--key', got '{flag}'")))?;
            if let Some((k, v)) = key.split_once('=') {
                self.set(k, v)?;
                continue;
            }
            let value = it
                .next()
                .ok_or_else(|| Error::Parse(format!("--{key} needs a value")))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            writeln!(
                out,
                "{key} = {}",
                self.get(key).expect("every listed key is known")
            )
            .unwrap();
        }
        out
    }

    /// Hex SHA-256 of the canonical text without the seed line.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for key in KEYS.iter().filter(|k| **k != "seed") {
            h.update(format!("{key} = {}\n", self.get(key).expect("known key")).as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `<first 12 hex digits of the hash>-seed<seed>`.
    pub fn run_name(&self) -> String {
        format!("{}-seed{}", &self.hash()[..12], self.seed)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            input_dim: self.input_dim,
            num_id_classes: self.num_id_classes,
            num_ood_clusters: self.num_ood_clusters,
            samples_per_class: self.samples_per_class,
            labeled_per_class: self.labeled_per_class,
            ood_fraction: self.ood_fraction,
            cluster_spread: self.cluster_spread,
            cluster_separation: self.cluster_separation,
            test_per_class: self.test_per_class,
            seed: self.seed,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim,
            hidden: self.hidden.clone(),
            feature_dim: self.feature_dim,
            num_classes: self.num_id_classes,
            activation: self.activation,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            w_semi: self.w_semi,
            w_self: self.w_self,
            w_sub: self.w_sub,
            w_reg: self.w_reg,
            tau: self.tau,
        }
    }

    pub fn ablation(&self) -> AblationFlags {
        AblationFlags {
            drop_self: self.drop_self,
            drop_sub: self.drop_sub,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            eta0: self.eta0,
            total_steps: self.total_steps,
            warmup_steps: self.warmup_steps,
            gamma: self.gamma,
        }
    }

    pub fn augmentation(&self) -> Augmentation {
        Augmentation::for_spread(self.cluster_spread)
    }

    pub fn decision_rule(&self) -> DecisionRule {
        match self.decision {
            RuleKind::Sampled => DecisionRule::SampledMask,
            RuleKind::Otsu => DecisionRule::OtsuThreshold {
                threshold: self.otsu_init,
                momentum: self.otsu_momentum,
            },
            RuleKind::Weighted => DecisionRule::DirectWeight,
        }
    }

    pub fn initial_mixture(&self) -> Result<BetaMixtureModel> {
        BetaMixtureModel::with_default_init(self.pi, self.epsilon, self.lambda_beta)
    }

    /// Checks every module's invariants before any work starts.
    pub fn validate(&self) -> Result<()> {
        let spec = self.dataset_spec();
        spec.validate()?;
        self.architecture().validate()?;
        self.loss_weights().validate()?;
        self.schedule().validate()?;
        self.initial_mixture()?;
        if self.batch_size == 0 || self.mu == 0 {
            return Err(Error::Config("batch_size and mu must be positive".into()));
        }
        let labeled = self.num_id_classes * self.labeled_per_class;
        if self.batch_size > labeled {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {labeled} labeled samples",
                self.batch_size
            )));
        }
        let unlabeled = self.num_id_classes * self.samples_per_class + spec.num_unlabeled_ood();
        if self.batch_size * self.mu > unlabeled {
            return Err(Error::Config(format!(
                "mu*batch_size exceeds the {unlabeled} unlabeled samples"
            )));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::Config(format!(
                "sgd_momentum must lie in [0,1), got {}",
                self.sgd_momentum
            )));
        }
        for (name, v) in [
            ("ema_momentum", self.ema_momentum),
            ("lambda_means", self.lambda_means),
            ("otsu_momentum", self.otsu_momentum),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.otsu_init) {
            return Err(Error::Config(format!(
                "otsu_init must lie in [0,1], got {}",
                self.otsu_init
            )));
        }
        if self.otsu_bins < 2 {
            return Err(Error::Config("otsu_bins must be at least 2".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }
}
