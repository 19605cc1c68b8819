//! The four CLI stages. Each reads and writes under `output_dir`:
//!
//! ```text
//! checkpoints/seed{s}/model.ckpt
//! checkpoints/seed{s}/adapter.ckpt
//! pretrain/manifest.json
//! adapter/manifest.json
//! bench/{results.csv, aggregate.csv, per_batch.csv, manifest.json}
//! ablate-{kind}/...
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::accounting::CostReport;
use super::config::RunConfig;
use super::pipeline::{
    aggregate, columns, logit_prior, pretrain, run_cells, scenario_for, train_adapter_stage, AdapterStageReport,
    AggregateRow, CellFailure, CellResult, Column, PretrainReport, SeedArtifacts, Variant,
};
use super::report;
use crate::adapter::{Adapter, AdapterSpec, ComponentMask, TauTriple};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::shiftbench::Generator;

pub fn model_path(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("checkpoints/seed{seed}/model.ckpt"))
}

pub fn adapter_path(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("checkpoints/seed{seed}/adapter.ckpt"))
}

fn config_entries(cfg: &RunConfig) -> Vec<(String, String)> {
    cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[derive(Serialize)]
struct PretrainManifest<'a> {
    config: Vec<(String, String)>,
    seeds: &'a [PretrainReport],
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Vec<PretrainReport>> {
    cfg.validate()?;
    let runs: Vec<Result<(Network, PretrainReport)>> = cfg.seeds.par_iter().map(|&s| pretrain(cfg, s)).collect();
    let mut reports = Vec::new();
    for run in runs {
        let (model, rep) = run?;
        checkpoint::save_network(&model, &model_path(cfg, rep.seed))?;
        reports.push(rep);
    }
    report::write_json(
        &cfg.output_dir.join("pretrain/manifest.json"),
        &PretrainManifest {
            config: config_entries(cfg),
            seeds: &reports,
        },
    )?;
    Ok(reports)
}

fn load_model(cfg: &RunConfig, seed: u64) -> Result<Network> {
    let model = checkpoint::load_network(&model_path(cfg, seed))?;
    if model.spec != cfg.network_spec() {
        return Err(Error::Config(format!(
            "checkpoint for seed {seed} has a different network than the config"
        )));
    }
    Ok(model)
}

#[derive(Serialize)]
struct AdapterManifest<'a> {
    config: Vec<(String, String)>,
    seeds: &'a [AdapterStageReport],
}

pub fn cmd_train_adapter(cfg: &RunConfig) -> Result<Vec<AdapterStageReport>> {
    cfg.validate()?;
    let models = cfg
        .seeds
        .iter()
        .map(|&s| load_model(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<Result<(Adapter, AdapterStageReport)>> = cfg
        .seeds
        .par_iter()
        .zip(&models)
        .map(|(&s, m)| train_adapter_stage(cfg, s, m, cfg.adapter.mask, cfg.adapter.schedule.tau))
        .collect();
    let mut reports = Vec::new();
    for run in runs {
        let (adapter, rep) = run?;
        checkpoint::save_adapter(&adapter, &adapter_path(cfg, rep.seed))?;
        reports.push(rep);
    }
    report::write_json(
        &cfg.output_dir.join("adapter/manifest.json"),
        &AdapterManifest {
            config: config_entries(cfg),
            seeds: &reports,
        },
    )?;
    Ok(reports)
}

/// Model, saved adapter (when `with_adapter`) and reference prior per seed.
fn load_artifacts(cfg: &RunConfig, with_adapter: bool) -> Result<Vec<SeedArtifacts>> {
    cfg.seeds
        .iter()
        .map(|&seed| {
            let model = load_model(cfg, seed)?;
            let adapters = if with_adapter {
                vec![checkpoint::load_adapter(&adapter_path(cfg, seed))?]
            } else {
                Vec::new()
            };
            let pi_s = Generator::new(&scenario_for(cfg, seed))?.source_prior()?;
            Ok(SeedArtifacts {
                seed,
                model,
                adapters,
                logit_prior: logit_prior(cfg, &pi_s),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub columns: Vec<Column>,
    pub results: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
    pub rows: Vec<AggregateRow>,
    pub cost: CostReport,
}

impl BenchOutcome {
    pub fn row(&self, method: &str, variant: &str) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.method == method && r.variant == variant)
    }

    pub fn table(&self) -> String {
        report::render_table(&self.rows, &self.columns)
    }
}

#[derive(Serialize)]
struct BenchManifest<'a> {
    config: Vec<(String, String)>,
    columns: Vec<String>,
    cost: &'a CostReport,
    aggregate: &'a [AggregateRow],
    failures: &'a [CellFailure],
}

fn cost_report(cfg: &RunConfig) -> CostReport {
    let net = cfg.network_spec();
    let spec = AdapterSpec {
        feature_dim: net.feature_dim(),
        num_classes: net.num_classes,
        hidden: cfg.adapter.hidden,
        mask: cfg.adapter.mask,
    };
    CostReport::new(&net, &spec, cfg.scenario.batch_size)
}

fn finish_bench(cfg: &RunConfig, dir: &Path, results: Vec<CellResult>, failures: Vec<CellFailure>) -> Result<BenchOutcome> {
    let cols = columns(&cfg.bench.rho_t);
    let rows = aggregate(&results, &cols);
    let cost = cost_report(cfg);
    report::write_text(&dir.join("results.csv"), &report::results_csv(&results)?)?;
    report::write_text(&dir.join("aggregate.csv"), &report::aggregate_csv(&rows, &cols)?)?;
    if cfg.bench.per_batch {
        report::write_text(&dir.join("per_batch.csv"), &report::per_batch_csv(&results)?)?;
    }
    report::write_json(
        &dir.join("manifest.json"),
        &BenchManifest {
            config: config_entries(cfg),
            columns: cols.iter().map(Column::label).collect(),
            cost: &cost,
            aggregate: &rows,
            failures: &failures,
        },
    )?;
    Ok(BenchOutcome {
        columns: cols,
        results,
        failures,
        rows,
        cost,
    })
}

fn prior_label(cfg: &RunConfig) -> &'static str {
    if cfg.tta.oracle_prior {
        "oracle"
    } else {
        "default"
    }
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchOutcome> {
    cfg.validate()?;
    let methods = cfg.methods()?;
    let needs_adapter = methods.iter().any(|m| m.adapter);
    let artifacts = load_artifacts(cfg, needs_adapter)?;
    let variants: Vec<Variant> = methods
        .into_iter()
        .map(|method| Variant {
            label: prior_label(cfg).into(),
            adapter: method.adapter.then_some(0),
            method,
            tta: cfg.tta,
        })
        .collect();
    let (results, failures) = run_cells(cfg, &artifacts, &variants);
    finish_bench(cfg, &cfg.output_dir.join("bench"), results, failures)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Components,
    Tau,
    Oracle,
}

impl AblationKind {
    pub fn label(self) -> &'static str {
        match self {
            AblationKind::Components => "components",
            AblationKind::Tau => "tau",
            AblationKind::Oracle => "oracle",
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(AblationKind::Components),
            "tau" => Ok(AblationKind::Tau),
            "oracle" => Ok(AblationKind::Oracle),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected components, tau or oracle)"
            ))),
        }
    }
}

/// Triples swept by the tau ablation, the default first.
pub fn tau_triples() -> [TauTriple; 3] {
    let t = |source, uniform, inverse| TauTriple {
        source,
        uniform,
        inverse,
    };
    [t(0.0, 1.0, 2.0), t(1.0, -1.5, 3.0), t(1.0, 0.0, -2.0)]
}

fn tau_label(t: &TauTriple) -> String {
    format!("tau={},{},{}", t.source, t.uniform, t.inverse)
}

/// Trains one adapter per (seed, setting) in parallel and returns them
/// grouped by seed in setting order.
fn train_sweep(
    cfg: &RunConfig,
    models: &[Network],
    settings: &[(ComponentMask, TauTriple)],
) -> Result<Vec<Vec<Adapter>>> {
    let jobs: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|si| (0..settings.len()).map(move |k| (si, k)))
        .collect();
    let trained: Vec<Result<Adapter>> = jobs
        .par_iter()
        .map(|&(si, k)| {
            let (mask, tau) = settings[k];
            train_adapter_stage(cfg, cfg.seeds[si], &models[si], mask, tau).map(|(a, _)| a)
        })
        .collect();
    let mut out: Vec<Vec<Adapter>> = vec![Vec::new(); models.len()];
    for (&(si, _), a) in jobs.iter().zip(trained) {
        out[si].push(a?);
    }
    Ok(out)
}

pub fn cmd_ablate(cfg: &RunConfig, kind: AblationKind) -> Result<BenchOutcome> {
    cfg.validate()?;
    let adapter_methods: Vec<_> = cfg.methods()?.into_iter().filter(|m| m.adapter).collect();
    if adapter_methods.is_empty() {
        return Err(Error::Config("ablations need at least one `+adapter` method in bench.methods".into()));
    }
    let mut variants = Vec::new();
    let artifacts = match kind {
        AblationKind::Oracle => {
            for method in &adapter_methods {
                for oracle in [false, true] {
                    variants.push(Variant {
                        method: method.clone(),
                        label: if oracle { "oracle" } else { "estimated" }.into(),
                        tta: crate::tta::TtaConfig {
                            oracle_prior: oracle,
                            ..cfg.tta
                        },
                        adapter: Some(0),
                    });
                }
            }
            load_artifacts(cfg, true)?
        }
        AblationKind::Components | AblationKind::Tau => {
            let tau = cfg.adapter.schedule.tau;
            let settings: Vec<(ComponentMask, TauTriple, String)> = if kind == AblationKind::Components {
                ComponentMask::ablation_masks()
                    .into_iter()
                    .map(|m| (m, tau, m.to_string()))
                    .collect()
            } else {
                tau_triples()
                    .into_iter()
                    .map(|t| (cfg.adapter.mask, t, tau_label(&t)))
                    .collect()
            };
            for method in &adapter_methods {
                for (i, (_, _, label)) in settings.iter().enumerate() {
                    variants.push(Variant {
                        method: method.clone(),
                        label: label.clone(),
                        tta: cfg.tta,
                        adapter: Some(i),
                    });
                }
            }
            let mut artifacts = load_artifacts(cfg, false)?;
            let models: Vec<Network> = artifacts.iter().map(|a| a.model.clone()).collect();
            let pairs: Vec<(ComponentMask, TauTriple)> = settings.iter().map(|(m, t, _)| (*m, *t)).collect();
            for (art, adapters) in artifacts.iter_mut().zip(train_sweep(cfg, &models, &pairs)?) {
                art.adapters = adapters;
            }
            artifacts
        }
    };
    let (results, failures) = run_cells(cfg, &artifacts, &variants);
    finish_bench(cfg, &cfg.output_dir.join(format!("ablate-{kind}")), results, failures)
}
