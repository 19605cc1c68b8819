//! Stage implementations: pretraining, adapter training and benchmark cells.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{PretrainLoss, RunConfig};
use crate::adapter::{
    frequency_ranks, inverse_distribution, train_adapter, Adapter, AdapterSpec, AdapterTrainReport,
    ComponentMask, MappingVector, TauTriple,
};
use crate::error::{Error, Result};
use crate::gradcore::{Graph, RealMatrix};
use crate::losses::{self, LabelDistribution};
use crate::model::{Network, Stage};
use crate::normalization::{NormContext, NormMode};
use crate::optim::Sgd;
use crate::shiftbench::{rng_for, Direction, Generator, ShiftScenario, StreamId};
use crate::tta::{run_stream, BatchRecord, RunMetrics, TtaConfig, TtaMethod};

pub fn scenario_for(cfg: &RunConfig, seed: u64) -> ShiftScenario {
    ShiftScenario {
        seed,
        ..cfg.scenario.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub per_class_recall: Vec<f64>,
    /// Mean recall over the rarer half of the training classes.
    pub tail_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub seed: u64,
    pub steps: usize,
    pub final_epoch_loss: f64,
    pub train_counts: Vec<usize>,
    pub probe: ProbeReport,
}

fn tail_classes(pi_s: &LabelDistribution) -> Vec<usize> {
    let ranks = frequency_ranks(pi_s);
    let c = ranks.len();
    (0..c).filter(|&i| ranks[i] >= c / 2).collect()
}

/// Recall per class on a balanced probe under frozen source statistics.
pub fn probe_report(model: &mut Network, x: &RealMatrix, labels: &[usize], pi_s: &LabelDistribution) -> Result<ProbeReport> {
    let logits = model.predict_logits(x, NormContext::frozen(NormMode::EvalSource), None)?;
    let preds = logits.argmax_rows();
    let c = model.num_classes();
    let mut hits = vec![0usize; c];
    let mut seen = vec![0usize; c];
    for (&p, &y) in preds.iter().zip(labels) {
        seen[y] += 1;
        hits[y] += usize::from(p == y);
    }
    let recall: Vec<f64> = hits
        .iter()
        .zip(&seen)
        .map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
        .collect();
    let tail = tail_classes(pi_s);
    Ok(ProbeReport {
        accuracy: hits.iter().sum::<usize>() as f64 / labels.len().max(1) as f64,
        tail_recall: tail.iter().map(|&i| recall[i]).sum::<f64>() / tail.len() as f64,
        per_class_recall: recall,
    })
}

/// Trains backbone and head on the long-tailed source split.
pub fn pretrain(cfg: &RunConfig, seed: u64) -> Result<(Network, PretrainReport)> {
    let gen = Generator::new(&scenario_for(cfg, seed))?;
    let src = gen.make_source()?;
    let mut model = Network::new(cfg.network_spec(), cfg.norm, &mut rng_for(seed, StreamId::ModelInit))?;
    model.set_stage(Stage::Pretrain, 0);
    let p = &cfg.pretrain;
    let mut opt = Sgd::new(p.lr, p.momentum, p.weight_decay);
    let mut rng = rng_for(seed, StreamId::Pretrain);
    let mut order: Vec<usize> = (0..src.labels.len()).collect();
    let tau = match p.loss {
        PretrainLoss::BalancedSoftmax => 1.0,
        PretrainLoss::CrossEntropy => 0.0,
    };
    let mut steps = 0;
    let mut last = f64::NAN;
    for epoch in 0..p.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        // Incomplete trailing batches are dropped so batch statistics stay stable.
        for idx in order.chunks_exact(p.batch_size.min(order.len())) {
            let x = src.x.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| src.labels[i]).collect();
            let mut g = Graph::new();
            let binding = model.params.bind(&mut g);
            let h = model.forward_features(&mut g, &binding, &x, NormContext::new(NormMode::Train))?;
            let logits = model.forward_head(&mut g, &binding, h, None)?;
            let loss = losses::generalized_logit_adjusted(&mut g, logits, &y, &src.pi_s, tau)
                .map_err(|e| Error::NonFinite(format!("pretraining loss at epoch {epoch}: {e}")))?;
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("pretraining loss at epoch {epoch}")));
            }
            g.backward(loss)?;
            model.params.zero_grad();
            model.params.accumulate_grads(&g, &binding);
            opt.step(&mut model.params)?;
            sum += v;
            batches += 1;
            steps += 1;
        }
        last = sum / batches.max(1) as f64;
    }
    let (px, py) = gen.make_probe(cfg.bench.probe_per_class)?;
    let probe = probe_report(&mut model, &px, &py, &src.pi_s)?;
    Ok((
        model,
        PretrainReport {
            seed,
            steps,
            final_epoch_loss: last,
            train_counts: src.counts,
            probe,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdapterStageReport {
    pub seed: u64,
    pub mask: String,
    pub tau: TauTriple,
    pub train: AdapterTrainReport,
    pub num_params: usize,
    /// Mean predicted probability mass on tail classes of a balanced probe
    /// when conditioned on `[pi_s, uniform, inverse(pi_s)]`.
    pub tail_mass: [f64; 3],
    pub model_fingerprint_unchanged: bool,
}

/// Trains an adapter for `model` with the given mask and tau triple.
pub fn train_adapter_stage(
    cfg: &RunConfig,
    seed: u64,
    model: &Network,
    mask: ComponentMask,
    tau: TauTriple,
) -> Result<(Adapter, AdapterStageReport)> {
    let gen = Generator::new(&scenario_for(cfg, seed))?;
    let src = gen.make_source()?;
    let mut frozen = model.clone();
    frozen.set_stage(Stage::AdapterTrain, 0);
    let before = frozen.params.fingerprint(|_| true);
    let spec = AdapterSpec {
        feature_dim: model.feature_dim(),
        num_classes: model.num_classes(),
        hidden: cfg.adapter.hidden,
        mask,
    };
    let mut adapter = Adapter::new(
        spec,
        MappingVector::from_source(&src.pi_s),
        &mut rng_for(seed, StreamId::AdapterInit),
    )?;
    let schedule = crate::adapter::AdapterSchedule {
        tau,
        ..cfg.adapter.schedule
    };
    let report = train_adapter(
        &mut adapter,
        &mut frozen,
        &src.x,
        &src.labels,
        &src.pi_s,
        &schedule,
        &mut rng_for(seed, StreamId::AdapterTrain),
    )?;

    let (px, _) = gen.make_probe(cfg.bench.probe_per_class)?;
    let tail = tail_classes(&src.pi_s);
    let conds = [
        src.pi_s.clone(),
        LabelDistribution::uniform(src.pi_s.len()),
        inverse_distribution(&src.pi_s),
    ];
    let mut tail_mass = [0.0; 3];
    for (slot, pi) in tail_mass.iter_mut().zip(&conds) {
        let out = adapter.output_for(pi)?;
        let probs = frozen
            .predict_logits(&px, NormContext::frozen(NormMode::EvalSource), Some(&out))?
            .softmax_rows();
        let mut mass = 0.0;
        for r in 0..probs.rows() {
            mass += tail.iter().map(|&k| probs.get(r, k)).sum::<f64>();
        }
        *slot = mass / probs.rows() as f64;
    }
    let unchanged = frozen.params.fingerprint(|_| true) == before;
    Ok((
        adapter.clone(),
        AdapterStageReport {
            seed,
            mask: mask.to_string(),
            tau,
            train: report,
            num_params: adapter.num_params(),
            tail_mass,
            model_fingerprint_unchanged: unchanged,
        },
    ))
}

/// One target label distribution column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Column {
    pub direction: Direction,
    pub rho_t: f64,
}

impl Column {
    pub fn label(&self) -> String {
        match self.direction {
            Direction::Forward => format!("F{}", self.rho_t),
            Direction::Uniform => "U".into(),
            Direction::Backward => format!("B{}", self.rho_t),
        }
    }
}

/// Forward columns from most to least imbalanced, uniform, then backward
/// columns from least to most imbalanced. Uniform appears once since its
/// distribution does not depend on `rho_t`.
pub fn columns(rho_t: &[f64]) -> Vec<Column> {
    let mut r = rho_t.to_vec();
    r.sort_by(f64::total_cmp);
    r.dedup();
    let mut cols: Vec<Column> = r
        .iter()
        .rev()
        .map(|&rho_t| Column {
            direction: Direction::Forward,
            rho_t,
        })
        .collect();
    cols.push(Column {
        direction: Direction::Uniform,
        rho_t: 1.0,
    });
    cols.extend(r.iter().map(|&rho_t| Column {
        direction: Direction::Backward,
        rho_t,
    }));
    cols
}

/// A method evaluated under one configuration, possibly with a specific
/// adapter (index into the per-seed adapter list).
#[derive(Debug, Clone)]
pub struct Variant {
    pub method: TtaMethod,
    pub label: String,
    pub tta: TtaConfig,
    pub adapter: Option<usize>,
}

/// Frozen per-seed inputs shared read-only by all cells.
#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub model: Network,
    pub adapters: Vec<Adapter>,
    /// Prior encoded by the pretrained logits: uniform after balanced
    /// softmax, the source prior after plain cross-entropy. Post-hoc
    /// adjustment subtracts its log.
    pub logit_prior: LabelDistribution,
}

pub fn logit_prior(cfg: &RunConfig, pi_s: &LabelDistribution) -> LabelDistribution {
    match cfg.pretrain.loss {
        PretrainLoss::BalancedSoftmax => LabelDistribution::uniform(pi_s.len()),
        PretrainLoss::CrossEntropy => pi_s.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub method: String,
    pub variant: String,
    pub column: String,
    pub direction: Direction,
    pub rho_t: f64,
    pub seed: u64,
    pub metrics: RunMetrics,
    #[serde(skip)]
    pub batches: Vec<BatchRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFailure {
    pub method: String,
    pub variant: String,
    pub column: String,
    pub seed: u64,
    pub error: String,
}

pub fn run_cell(cfg: &RunConfig, art: &SeedArtifacts, variant: &Variant, column: Column) -> Result<CellResult> {
    let scenario = ShiftScenario {
        direction: column.direction,
        rho_t: column.rho_t,
        ..scenario_for(cfg, art.seed)
    };
    let stream = Generator::new(&scenario)?.make_target_stream()?;
    let adapter = match (variant.method.adapter, variant.adapter) {
        (true, Some(i)) => Some(art.adapters.get(i).ok_or_else(|| {
            Error::Config(format!("no adapter {i} for seed {}", art.seed))
        })?),
        (true, None) => {
            return Err(Error::Config(format!("method `{}` needs an adapter", variant.method)))
        }
        (false, _) => None,
    };
    let out = run_stream(&variant.method, &art.model, adapter, &stream, &art.logit_prior, &variant.tta)?;
    Ok(CellResult {
        method: variant.method.name.clone(),
        variant: variant.label.clone(),
        column: column.label(),
        direction: column.direction,
        rho_t: column.rho_t,
        seed: art.seed,
        metrics: out.metrics,
        batches: out.batches,
    })
}

/// Runs every (variant, column, seed) cell in parallel and returns results
/// and failures in a fixed order.
pub fn run_cells(
    cfg: &RunConfig,
    artifacts: &[SeedArtifacts],
    variants: &[Variant],
) -> (Vec<CellResult>, Vec<CellFailure>) {
    let cols = columns(&cfg.bench.rho_t);
    let mut jobs = Vec::new();
    for (vi, _) in variants.iter().enumerate() {
        for &col in &cols {
            for (ai, _) in artifacts.iter().enumerate() {
                jobs.push((vi, col, ai));
            }
        }
    }
    let outcomes: Vec<_> = jobs
        .par_iter()
        .map(|&(vi, col, ai)| run_cell(cfg, &artifacts[ai], &variants[vi], col))
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (&(vi, col, ai), res) in jobs.iter().zip(outcomes) {
        match res {
            Ok(r) => ok.push(r),
            Err(e) => failed.push(CellFailure {
                method: variants[vi].method.name.clone(),
                variant: variants[vi].label.clone(),
                column: col.label(),
                seed: artifacts[ai].seed,
                error: e.to_string(),
            }),
        }
    }
    (ok, failed)
}

/// One row of the results table: accuracy in percent, averaged over
/// seeds, per column, plus the column mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub method: String,
    pub variant: String,
    pub columns: Vec<(String, f64)>,
    pub avg: f64,
}

pub fn aggregate(results: &[CellResult], cols: &[Column]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in results {
        let k = (r.method.clone(), r.variant.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .filter_map(|(method, variant)| {
            let mut values = Vec::with_capacity(cols.len());
            for c in cols {
                let label = c.label();
                let accs: Vec<f64> = results
                    .iter()
                    .filter(|r| r.method == method && r.variant == variant && r.column == label)
                    .map(|r| 100.0 * r.metrics.accuracy)
                    .collect();
                if accs.is_empty() {
                    return None;
                }
                values.push((label, accs.iter().sum::<f64>() / accs.len() as f64));
            }
            let avg = values.iter().map(|(_, v)| v).sum::<f64>() / values.len() as f64;
            Some(AggregateRow {
                method,
                variant,
                columns: values,
                avg,
            })
        })
        .collect()
}
