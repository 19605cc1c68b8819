//! Flat `key = value` run configuration with dotted keys.
//!
//! Lines starting with `#` and blank lines are ignored. Lists are comma
//! separated. Every key has a default and unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::adapter::{AdapterSchedule, ComponentMask, TauTriple};
use crate::error::{Error, Result};
use crate::model::{NetworkSpec, NormKind};
use crate::normalization::NormConfig;
use crate::shiftbench::ShiftScenario;
use crate::tta::{TtaConfig, TtaMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainLoss {
    BalancedSoftmax,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: PretrainLoss,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-3,
            loss: PretrainLoss::BalancedSoftmax,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterConfig {
    pub hidden: usize,
    pub mask: ComponentMask,
    pub schedule: AdapterSchedule,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            hidden: 100,
            mask: ComponentMask::ALL,
            schedule: AdapterSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub methods: Vec<String>,
    pub rho_t: Vec<f64>,
    pub per_batch: bool,
    /// Per-class size of the balanced source-domain probe.
    pub probe_per_class: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: [
                "source",
                "bn_stats",
                "pseudo_label",
                "tent",
                "tent+adapter",
                "iabn",
                "iabn+adapter",
                "iabn+logit_adjust",
                "iabn+info_max",
            ]
            .map(String::from)
            .to_vec(),
            rho_t: vec![10.0, 25.0, 50.0],
            per_batch: false,
            probe_per_class: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Direction, `rho_t` and seed are overwritten per benchmark cell.
    pub scenario: ShiftScenario,
    pub hidden_dims: Vec<usize>,
    pub norm_kind: NormKind,
    pub norm: NormConfig,
    pub pretrain: PretrainConfig,
    pub adapter: AdapterConfig,
    pub tta: TtaConfig,
    pub bench: BenchConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: ShiftScenario::default(),
            hidden_dims: vec![64, 64],
            norm_kind: NormKind::Norm,
            norm: NormConfig::default(),
            pretrain: PretrainConfig::default(),
            adapter: AdapterConfig::default(),
            tta: TtaConfig::default(),
            bench: BenchConfig::default(),
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_dim: self.scenario.feature_dim,
            hidden_dims: self.hidden_dims.clone(),
            num_classes: self.scenario.num_classes,
            norm: vec![self.norm_kind; self.hidden_dims.len()],
        }
    }

    pub fn methods(&self) -> Result<Vec<TtaMethod>> {
        self.bench.methods.iter().map(|m| m.parse()).collect()
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.scenario;
        match key {
            "scenario.num_classes" => s.num_classes = parse_num(key, v)?,
            "scenario.feature_dim" => s.feature_dim = parse_num(key, v)?,
            "scenario.class_sep" => s.class_sep = parse_num(key, v)?,
            "scenario.within_std" => s.within_std = parse_num(key, v)?,
            "scenario.rho_s" => s.rho_s = parse_num(key, v)?,
            "scenario.n_max" => s.n_max = parse_num(key, v)?,
            "scenario.severity" => s.severity = parse_num(key, v)?,
            "scenario.stream_length" => s.stream_length = parse_num(key, v)?,
            "scenario.batch_size" => s.batch_size = parse_num(key, v)?,
            "network.hidden_dims" => self.hidden_dims = parse_list(key, v)?,
            "network.norm" => {
                self.norm_kind = match v {
                    "norm" => NormKind::Norm,
                    "identity" => NormKind::Identity,
                    _ => return Err(Error::Config(format!("`{key}`: expected norm or identity"))),
                }
            }
            "norm.momentum" => self.norm.momentum_stats = parse_num(key, v)?,
            "norm.iabn_alpha" => self.norm.alpha_shrink = parse_num(key, v)?,
            "norm.iabn_momentum" => self.norm.m_iabn = parse_num(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse_num(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_num(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse_num(key, v)?,
            "pretrain.momentum" => self.pretrain.momentum = parse_num(key, v)?,
            "pretrain.weight_decay" => self.pretrain.weight_decay = parse_num(key, v)?,
            "pretrain.loss" => {
                self.pretrain.loss = match v {
                    "balanced_softmax" => PretrainLoss::BalancedSoftmax,
                    "cross_entropy" => PretrainLoss::CrossEntropy,
                    _ => {
                        return Err(Error::Config(format!(
                            "`{key}`: expected balanced_softmax or cross_entropy"
                        )))
                    }
                }
            }
            "adapter.hidden" => self.adapter.hidden = parse_num(key, v)?,
            "adapter.components" => self.adapter.mask = v.parse()?,
            "adapter.iters" => self.adapter.schedule.iters = parse_num(key, v)?,
            "adapter.batch_size" => self.adapter.schedule.batch_size = parse_num(key, v)?,
            "adapter.lr" => self.adapter.schedule.lr = parse_num(key, v)?,
            "adapter.momentum" => self.adapter.schedule.momentum = parse_num(key, v)?,
            "adapter.weight_decay" => self.adapter.schedule.weight_decay = parse_num(key, v)?,
            "adapter.tau" => {
                let t: Vec<f64> = parse_list(key, v)?;
                let [source, uniform, inverse] = t[..] else {
                    return Err(Error::Config(format!("`{key}`: expected three values")));
                };
                self.adapter.schedule.tau = TauTriple {
                    source,
                    uniform,
                    inverse,
                };
            }
            "tta.lr" => self.tta.lr = parse_num(key, v)?,
            "tta.momentum" => self.tta.momentum = parse_num(key, v)?,
            "tta.alpha" => self.tta.alpha = parse_num(key, v)?,
            "tta.top_k" => {
                self.tta.top_k = match v {
                    "auto" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "tta.freeze_top" => self.tta.freeze_top = parse_num(key, v)?,
            "tta.post_update" => self.tta.post_update_predictions = parse_bool(key, v)?,
            "tta.oracle_prior" => self.tta.oracle_prior = parse_bool(key, v)?,
            "bench.methods" => {
                self.bench.methods = v.split(',').map(|m| m.trim().to_string()).collect();
            }
            "bench.rho_t" => self.bench.rho_t = parse_list(key, v)?,
            "bench.per_batch" => self.bench.per_batch = parse_bool(key, v)?,
            "bench.probe_per_class" => self.bench.probe_per_class = parse_num(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every resolved key in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.scenario;
        let a = &self.adapter.schedule;
        vec![
            ("scenario.num_classes", s.num_classes.to_string()),
            ("scenario.feature_dim", s.feature_dim.to_string()),
            ("scenario.class_sep", s.class_sep.to_string()),
            ("scenario.within_std", s.within_std.to_string()),
            ("scenario.rho_s", s.rho_s.to_string()),
            ("scenario.n_max", s.n_max.to_string()),
            ("scenario.severity", s.severity.to_string()),
            ("scenario.stream_length", s.stream_length.to_string()),
            ("scenario.batch_size", s.batch_size.to_string()),
            ("network.hidden_dims", join(&self.hidden_dims)),
            (
                "network.norm",
                match self.norm_kind {
                    NormKind::Norm => "norm".into(),
                    NormKind::Identity => "identity".into(),
                },
            ),
            ("norm.momentum", self.norm.momentum_stats.to_string()),
            ("norm.iabn_alpha", self.norm.alpha_shrink.to_string()),
            ("norm.iabn_momentum", self.norm.m_iabn.to_string()),
            ("pretrain.epochs", self.pretrain.epochs.to_string()),
            ("pretrain.batch_size", self.pretrain.batch_size.to_string()),
            ("pretrain.lr", self.pretrain.lr.to_string()),
            ("pretrain.momentum", self.pretrain.momentum.to_string()),
            ("pretrain.weight_decay", self.pretrain.weight_decay.to_string()),
            (
                "pretrain.loss",
                match self.pretrain.loss {
                    PretrainLoss::BalancedSoftmax => "balanced_softmax".into(),
                    PretrainLoss::CrossEntropy => "cross_entropy".into(),
                },
            ),
            ("adapter.hidden", self.adapter.hidden.to_string()),
            ("adapter.components", self.adapter.mask.to_string()),
            ("adapter.iters", a.iters.to_string()),
            ("adapter.batch_size", a.batch_size.to_string()),
            ("adapter.lr", a.lr.to_string()),
            ("adapter.momentum", a.momentum.to_string()),
            ("adapter.weight_decay", a.weight_decay.to_string()),
            ("adapter.tau", join(&[a.tau.source, a.tau.uniform, a.tau.inverse])),
            ("tta.lr", self.tta.lr.to_string()),
            ("tta.momentum", self.tta.momentum.to_string()),
            ("tta.alpha", self.tta.alpha.to_string()),
            (
                "tta.top_k",
                self.tta.top_k.map_or("auto".into(), |k| k.to_string()),
            ),
            ("tta.freeze_top", self.tta.freeze_top.to_string()),
            ("tta.post_update", self.tta.post_update_predictions.to_string()),
            ("tta.oracle_prior", self.tta.oracle_prior.to_string()),
            ("bench.methods", self.bench.methods.join(",")),
            ("bench.rho_t", join(&self.bench.rho_t)),
            ("bench.per_batch", self.bench.per_batch.to_string()),
            ("bench.probe_per_class", self.bench.probe_per_class.to_string()),
            ("seeds", join(&self.seeds)),
            ("output.dir", self.output_dir.display().to_string()),
        ]
    }

    /// Renders the resolved configuration in the file format.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `--dotted.key value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected `--key value`, got `{flag}`")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k, v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Config(format!("missing value for `{flag}`")))?;
                    (key, v.clone())
                }
            };
            self.set(key, &value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.network_spec().validate()?;
        self.methods()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.bench.rho_t.iter().any(|&r| !(r >= 1.0)) {
            return Err(Error::Config("bench.rho_t values must be >= 1".into()));
        }
        if self.pretrain.batch_size == 0 || self.adapter.schedule.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}
