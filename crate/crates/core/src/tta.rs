//! Online test-time adaptation: one gradient step per incoming batch on the
//! normalization affine parameters, optionally with the label shift adapter
//! conditioned on the running prior estimate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::error::{Error, Result};
use crate::estimator::{default_top_k, PriorEstimate};
use crate::gradcore::{Graph, RealMatrix};
use crate::losses::{self, posthoc_logit_adjust, LabelDistribution};
use crate::model::{AdapterOutput, Network, Stage};
use crate::normalization::{NormContext, NormMode};
use crate::optim::Sgd;
use crate::shiftbench::TargetStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    None,
    Entropy,
    PseudoLabel,
    InfoMax,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtaMethod {
    pub name: String,
    pub norm_mode: NormMode,
    pub loss: LossKind,
    pub adapter: bool,
    pub posthoc: bool,
}

impl TtaMethod {
    /// Whether predictions depend on the prior estimate.
    pub fn uses_prior(&self) -> bool {
        self.adapter || self.posthoc
    }
}

impl fmt::Display for TtaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Parses `base[+modifier...]`. Bases: `source`, `bn_stats`, `pseudo_label`,
/// `tent`, `iabn`. Modifiers: `adapter`, `logit_adjust`, `info_max`.
impl FromStr for TtaMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split('+');
        let base = parts.next().unwrap_or_default();
        let (norm_mode, mut loss) = match base {
            "source" => (NormMode::EvalSource, LossKind::None),
            "bn_stats" => (NormMode::EvalBatch, LossKind::None),
            "pseudo_label" => (NormMode::EvalBatch, LossKind::PseudoLabel),
            "tent" => (NormMode::EvalBatch, LossKind::Entropy),
            "iabn" => (NormMode::EvalIabn, LossKind::Entropy),
            other => return Err(Error::Config(format!("unknown method `{other}`"))),
        };
        let (mut adapter, mut posthoc) = (false, false);
        for m in parts {
            match m {
                "adapter" => adapter = true,
                "logit_adjust" => posthoc = true,
                "info_max" if base != "source" => loss = LossKind::InfoMax,
                other => {
                    return Err(Error::Config(format!(
                        "unknown or unsupported modifier `{other}` in method `{s}`"
                    )))
                }
            }
        }
        if adapter && posthoc {
            return Err(Error::Config(format!(
                "method `{s}` combines the adapter with post-hoc adjustment"
            )));
        }
        Ok(Self {
            name: s.trim().to_string(),
            norm_mode,
            loss,
            adapter,
            posthoc,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Estimator momentum.
    pub alpha: f64,
    /// Top-k filter for the estimator; `None` picks the class-count default.
    pub top_k: Option<usize>,
    /// Number of top blocks whose normalization stays frozen.
    pub freeze_top: usize,
    /// Score logits recomputed after the update instead of the ones that
    /// produced the gradient.
    pub post_update_predictions: bool,
    /// Condition on the true target prior instead of the estimate.
    pub oracle_prior: bool,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            alpha: 0.1,
            top_k: None,
            freeze_top: 1,
            post_update_predictions: false,
            oracle_prior: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TtaState {
    pub step: usize,
    pub estimator: PriorEstimate,
    pub optimizer: Sgd,
}

impl TtaState {
    pub fn new(num_classes: usize, config: &TtaConfig) -> Self {
        let top_k = config.top_k.or_else(|| default_top_k(num_classes));
        Self {
            step: 0,
            estimator: PriorEstimate::new(num_classes, config.alpha, top_k),
            optimizer: Sgd::new(config.lr, config.momentum, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Scored logits (after post-hoc adjustment when enabled).
    pub logits: RealMatrix,
    pub loss: Option<f64>,
}

/// Everything a step needs besides the batch itself.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub adapter: Option<&'a Adapter>,
    pub pi_s: &'a LabelDistribution,
    /// Replaces the estimate as the prior fed to the adapter or adjustment.
    pub prior_override: Option<&'a LabelDistribution>,
    pub post_update_predictions: bool,
}

/// Processes one unlabeled batch: forward, optional update, prediction and
/// estimator update. Labels are not an input.
pub fn tta_step(
    method: &TtaMethod,
    model: &mut Network,
    state: &mut TtaState,
    ctx: StepContext<'_>,
    x: &RealMatrix,
) -> Result<StepOutput> {
    if model.stage() != Stage::Tta {
        return Err(Error::Stage("test-time adaptation needs a model in the tta stage".into()));
    }
    let prior = ctx
        .prior_override
        .unwrap_or_else(|| state.estimator.y_hat())
        .clone();
    let adapt: Option<AdapterOutput> = if method.adapter {
        let a = ctx.adapter.ok_or_else(|| {
            Error::Config(format!("method `{method}` needs an adapter checkpoint"))
        })?;
        Some(a.output_for(&prior)?)
    } else {
        None
    };

    let mut g = Graph::new();
    let binding = model.params.bind(&mut g);
    let h = model.forward_features(&mut g, &binding, x, NormContext::new(method.norm_mode))?;
    let av = adapt.as_ref().map(|a| a.as_constants(&mut g));
    let logits = model.forward_head(&mut g, &binding, h, av.as_ref())?;

    let loss = match method.loss {
        LossKind::None => None,
        LossKind::Entropy => Some(losses::entropy_loss(&mut g, logits)),
        LossKind::PseudoLabel => Some(losses::pseudo_label_loss(&mut g, logits)),
        LossKind::InfoMax => Some(losses::info_max_loss(&mut g, logits)),
    };
    let loss_value = match loss {
        None => None,
        Some(l) => {
            let l = l.map_err(|e| match e {
                Error::NonFinite(op) => Error::NonFinite(format!(
                    "loss of `{method}` at step {} ({op})",
                    state.step
                )),
                other => other,
            })?;
            let v = g.value(l).item();
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss of `{method}` at step {}", state.step)));
            }
            g.backward(l)?;
            model.params.zero_grad();
            model.params.accumulate_grads(&g, &binding);
            state.optimizer.step(&mut model.params)?;
            Some(v)
        }
    };

    let raw = if ctx.post_update_predictions && loss_value.is_some() {
        model.predict_logits(x, NormContext::frozen(method.norm_mode), adapt.as_ref())?
    } else {
        g.value(logits).clone()
    };
    let scored = if method.posthoc {
        posthoc_logit_adjust(&raw, &prior, ctx.pi_s)?
    } else {
        raw
    };
    state.estimator.update(&scored.softmax_rows())?;
    state.step += 1;
    Ok(StepOutput {
        logits: scored,
        loss: loss_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub t: usize,
    pub accuracy: f64,
    pub loss: Option<f64>,
    pub prior_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub samples: usize,
    pub accuracy: f64,
    /// `None` for classes absent from the stream.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Mean over classes present in the stream.
    pub macro_accuracy: f64,
    pub final_prior: Vec<f64>,
    pub prior_l1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub batches: Vec<BatchRecord>,
}

/// Adapts a private copy of `model` over the whole stream.
pub fn run_stream(
    method: &TtaMethod,
    model: &Network,
    adapter: Option<&Adapter>,
    stream: &TargetStream,
    pi_s: &LabelDistribution,
    config: &TtaConfig,
) -> Result<RunOutput> {
    let c = model.num_classes();
    let mut model = model.clone();
    model.set_stage(Stage::Tta, config.freeze_top);
    let mut state = TtaState::new(c, config);
    let ctx = StepContext {
        adapter,
        pi_s,
        prior_override: config.oracle_prior.then_some(&stream.p_t),
        post_update_predictions: config.post_update_predictions,
    };

    let mut correct = vec![0usize; c];
    let mut seen = vec![0usize; c];
    let mut batches = Vec::with_capacity(stream.num_batches());
    for range in stream.batch_ranges() {
        let (x, labels) = stream.batch(range);
        let out = tta_step(method, &mut model, &mut state, ctx, &x)?;
        let preds = out.logits.argmax_rows();
        let mut hits = 0;
        for (&p, &y) in preds.iter().zip(labels) {
            seen[y] += 1;
            if p == y {
                correct[y] += 1;
                hits += 1;
            }
        }
        batches.push(BatchRecord {
            t: state.step,
            accuracy: hits as f64 / labels.len() as f64,
            loss: out.loss,
            prior_l1: state.estimator.y_hat().l1_distance(&stream.p_t),
        });
    }

    let samples: usize = seen.iter().sum();
    let total_correct: usize = correct.iter().sum();
    let per_class: Vec<Option<f64>> = seen
        .iter()
        .zip(&correct)
        .map(|(&n, &k)| (n > 0).then(|| k as f64 / n as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let y_hat = state.estimator.y_hat();
    Ok(RunOutput {
        metrics: RunMetrics {
            samples,
            accuracy: if samples == 0 { 0.0 } else { total_correct as f64 / samples as f64 },
            per_class_accuracy: per_class,
            macro_accuracy: mean(&present),
            final_prior: y_hat.probs().to_vec(),
            prior_l1: y_hat.l1_distance(&stream.p_t),
        },
        batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkSpec;
    use crate::normalization::NormConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn network() -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::new(NetworkSpec::mlp(4, vec![6, 5], 3), NormConfig::default(), &mut rng).unwrap();
        // Non-trivial running statistics so source and batch modes differ.
        for layer in net.norms.iter_mut().flatten() {
            layer.running_mean = layer.running_mean.map(|_| 0.3);
            layer.running_var = layer.running_var.map(|_| 1.7);
        }
        net
    }

    fn stream(n: usize, bs: usize) -> TargetStream {
        let x = RealMatrix::from_vec(n, 4, (0..n * 4).map(|i| ((i * 37) % 17) as f64 / 4.0 - 2.0).collect()).unwrap();
        TargetStream {
            x,
            labels: (0..n).map(|i| i % 3).collect(),
            p_t: LabelDistribution::uniform(3),
            batch_size: bs,
        }
    }

    fn run(method: &str, cfg: &TtaConfig) -> RunOutput {
        let m: TtaMethod = method.parse().unwrap();
        run_stream(&m, &network(), None, &stream(40, 8), &LabelDistribution::uniform(3), cfg).unwrap()
    }

    #[test]
    fn method_registry() {
        let m: TtaMethod = "iabn+adapter".parse().unwrap();
        assert_eq!((m.norm_mode, m.loss, m.adapter), (NormMode::EvalIabn, LossKind::Entropy, true));
        let s: TtaMethod = "source".parse().unwrap();
        assert_eq!((s.norm_mode, s.loss), (NormMode::EvalSource, LossKind::None));
        assert_eq!("tent+info_max".parse::<TtaMethod>().unwrap().loss, LossKind::InfoMax);
        for bad in ["sar", "tent+magic", "source+info_max", "tent+adapter+logit_adjust"] {
            assert!(bad.parse::<TtaMethod>().is_err(), "{bad}");
        }
    }

    #[test]
    fn source_predictions_are_frozen_logits() {
        let mut net = network();
        let x = stream(8, 8).x;
        let expected = net.predict_logits(&x, NormContext::frozen(NormMode::EvalSource), None).unwrap();
        net.set_stage(Stage::Tta, 1);
        let before = net.clone();
        let mut state = TtaState::new(3, &TtaConfig::default());
        let pi = LabelDistribution::uniform(3);
        let ctx = StepContext {
            adapter: None,
            pi_s: &pi,
            prior_override: None,
            post_update_predictions: false,
        };
        let out = tta_step(&"source".parse().unwrap(), &mut net, &mut state, ctx, &x).unwrap();
        assert_eq!(out.logits, expected);
        assert_eq!(out.loss, None);
        assert_eq!(state.step, 1);
        assert_eq!(net, before);
    }

    #[test]
    fn zero_lr_tent_equals_bn_stats() {
        let cfg = TtaConfig {
            lr: 0.0,
            ..TtaConfig::default()
        };
        let a = run("tent", &cfg);
        let b = run("bn_stats", &cfg);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn only_norm_affine_parameters_move() {
        let cfg = TtaConfig {
            lr: 0.5,
            freeze_top: 0,
            ..TtaConfig::default()
        };
        let m: TtaMethod = "tent".parse().unwrap();
        let mut net = network();
        net.set_stage(Stage::Tta, 0);
        let before = net.non_affine_fingerprint();
        let affine_before = net.params.fingerprint(crate::model::is_norm_affine);
        let mut state = TtaState::new(3, &cfg);
        let pi = LabelDistribution::uniform(3);
        let ctx = StepContext {
            adapter: None,
            pi_s: &pi,
            prior_override: None,
            post_update_predictions: false,
        };
        let s = stream(32, 8);
        for r in s.batch_ranges() {
            tta_step(&m, &mut net, &mut state, ctx, &s.batch(r).0).unwrap();
        }
        assert_eq!(net.non_affine_fingerprint(), before);
        assert_ne!(net.params.fingerprint(crate::model::is_norm_affine), affine_before);
        assert_eq!(state.step, 4);
    }

    #[test]
    fn stage_is_checked() {
        let mut net = network();
        let mut state = TtaState::new(3, &TtaConfig::default());
        let pi = LabelDistribution::uniform(3);
        let ctx = StepContext {
            adapter: None,
            pi_s: &pi,
            prior_override: None,
            post_update_predictions: false,
        };
        let r = tta_step(&"tent".parse().unwrap(), &mut net, &mut state, ctx, &stream(4, 4).x);
        assert!(matches!(r, Err(Error::Stage(_))));
    }

    #[test]
    fn degenerate_batch_propagates() {
        let m: TtaMethod = "tent".parse().unwrap();
        let r = run_stream(&m, &network(), None, &stream(9, 8), &LabelDistribution::uniform(3), &TtaConfig::default());
        assert!(matches!(r, Err(Error::DegenerateBatch { rows: 1 })));
    }

    #[test]
    fn adapter_method_without_adapter_is_config_error() {
        let m: TtaMethod = "tent+adapter".parse().unwrap();
        let r = run_stream(&m, &network(), None, &stream(16, 8), &LabelDistribution::uniform(3), &TtaConfig::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn empty_stream_gives_empty_metrics() {
        let out = run("tent", &TtaConfig::default());
        assert_eq!(out.batches.len(), 5);
        let m: TtaMethod = "tent".parse().unwrap();
        let empty = run_stream(&m, &network(), None, &stream(0, 8), &LabelDistribution::uniform(3), &TtaConfig::default()).unwrap();
        assert_eq!(empty.metrics.samples, 0);
        assert!(empty.batches.is_empty());
        assert_eq!(empty.metrics.per_class_accuracy, vec![None; 3]);
        assert_eq!(empty.metrics.prior_l1, 0.0);
    }

    #[test]
    fn reruns_are_identical() {
        let cfg = TtaConfig::default();
        assert_eq!(run("iabn+info_max", &cfg), run("iabn+info_max", &cfg));
        let post = TtaConfig {
            post_update_predictions: true,
            lr: 0.5,
            ..cfg
        };
        assert_ne!(run("tent", &post).metrics.final_prior, run("tent", &TtaConfig { lr: 0.5, ..cfg }).metrics.final_prior);
    }

    #[test]
    fn source_metrics_ignore_stream_order() {
        let m: TtaMethod = "source".parse().unwrap();
        let s = stream(40, 8);
        let mut rev = s.clone();
        let idx: Vec<usize> = (0..40).rev().collect();
        rev.x = s.x.select_rows(&idx);
        rev.labels.reverse();
        let pi = LabelDistribution::uniform(3);
        let cfg = TtaConfig::default();
        let a = run_stream(&m, &network(), None, &s, &pi, &cfg).unwrap().metrics;
        let b = run_stream(&m, &network(), None, &rev, &pi, &cfg).unwrap().metrics;
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.per_class_accuracy, b.per_class_accuracy);
    }
}
