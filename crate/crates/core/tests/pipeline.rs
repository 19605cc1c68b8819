use shiftadapt::adapter::{AdapterSchedule, ComponentMask, TauTriple};
use shiftadapt::harness::commands;
use shiftadapt::harness::config::{PretrainLoss, RunConfig};
use shiftadapt::harness::pipeline::{pretrain, probe_report, train_adapter_stage};
use shiftadapt::model::{AdapterOutput, Stage};
use shiftadapt::normalization::{NormContext, NormMode};
use shiftadapt::shiftbench::{Direction, Generator, ShiftScenario};
use shiftadapt::tta::{tta_step, StepContext, TtaMethod, TtaState};
use shiftadapt::{Error, LabelDistribution};

fn single_seed() -> RunConfig {
    RunConfig {
        seeds: vec![0],
        ..RunConfig::default()
    }
}

#[test]
fn default_pretraining_reaches_probe_accuracy() {
    let (_, rep) = pretrain(&single_seed(), 0).unwrap();
    assert!(rep.probe.accuracy >= 0.85, "probe accuracy {}", rep.probe.accuracy);
    assert!(rep.final_epoch_loss.is_finite());
}

#[test]
fn cross_entropy_pretraining_hurts_tail_recall() {
    let bs = single_seed();
    let mut ce = single_seed();
    ce.pretrain.loss = PretrainLoss::CrossEntropy;
    let (_, bs_rep) = pretrain(&bs, 0).unwrap();
    let (_, ce_rep) = pretrain(&ce, 0).unwrap();
    assert!(
        ce_rep.probe.tail_recall < bs_rep.probe.tail_recall,
        "ce {} vs bs {}",
        ce_rep.probe.tail_recall,
        bs_rep.probe.tail_recall
    );
}

#[test]
fn pretrain_command_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = single_seed();
    cfg.pretrain.epochs = 2;
    cfg.output_dir = dir.path().to_path_buf();
    commands::cmd_pretrain(&cfg).unwrap();
    let path = commands::model_path(&cfg, 0);
    let first = std::fs::read(&path).unwrap();
    let manifest = std::fs::read(dir.path().join("pretrain/manifest.json")).unwrap();
    commands::cmd_pretrain(&cfg).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert_eq!(std::fs::read(dir.path().join("pretrain/manifest.json")).unwrap(), manifest);
}

#[test]
fn adapter_stage_contracts() {
    let mut cfg = single_seed();
    cfg.pretrain.epochs = 5;
    let (model, _) = pretrain(&cfg, 0).unwrap();
    let before = model.params.fingerprint(|_| true);

    let (adapter, rep) = train_adapter_stage(&cfg, 0, &model, ComponentMask::ALL, TauTriple::default()).unwrap();
    assert!(rep.model_fingerprint_unchanged);
    assert_eq!(model.params.fingerprint(|_| true), before);
    let [source, _, inverse] = rep.tail_mass;
    assert!(inverse > source, "inverse {inverse} vs source {source}");
    assert!(adapter.num_params() > 0);

    cfg.adapter.schedule = AdapterSchedule {
        iters: 0,
        ..cfg.adapter.schedule
    };
    let (untrained, _) = train_adapter_stage(&cfg, 0, &model, ComponentMask::ALL, TauTriple::default()).unwrap();
    let neutral = AdapterOutput::neutral(model.feature_dim(), model.num_classes());
    for pi in [LabelDistribution::uniform(10), LabelDistribution::uniform(10).reversed()] {
        assert_eq!(untrained.output_for(&pi).unwrap(), neutral);
    }
}

#[test]
fn missing_checkpoints_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = single_seed();
    cfg.output_dir = dir.path().to_path_buf();
    assert!(matches!(commands::cmd_train_adapter(&cfg), Err(Error::Config(_))));
    assert!(matches!(commands::cmd_bench(&cfg), Err(Error::Config(_))));
}

#[test]
fn source_only_bench_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = single_seed();
    cfg.pretrain.epochs = 2;
    cfg.bench.methods = vec!["source".into()];
    cfg.output_dir = dir.path().to_path_buf();
    commands::cmd_pretrain(&cfg).unwrap();
    let out = commands::cmd_bench(&cfg).unwrap();
    assert!(out.failures.is_empty());
    assert_eq!(out.rows.len(), 1);
    assert_eq!(out.rows[0].columns.len(), 7);
    assert_eq!(out.results.len(), 7);
    let agg = std::fs::read_to_string(dir.path().join("bench/aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 2);
    assert!(!dir.path().join("bench/per_batch.csv").exists());
}

#[test]
fn no_shift_stream_matches_source_validation() {
    let mut cfg = single_seed();
    cfg.scenario.severity = 0;
    let (mut model, rep) = pretrain(&cfg, 0).unwrap();
    let scenario = ShiftScenario {
        severity: 0,
        direction: Direction::Forward,
        rho_t: cfg.scenario.rho_s,
        ..cfg.scenario.clone()
    };
    let gen = Generator::new(&scenario).unwrap();
    let pi_s = gen.source_prior().unwrap();
    // Expected accuracy on source-distributed data from independent probe recall.
    let validation: f64 = rep.probe.per_class_recall.iter().zip(pi_s.probs()).map(|(r, p)| r * p).sum();
    let stream = gen.make_target_stream().unwrap();
    let logits = model
        .predict_logits(&stream.x, NormContext::frozen(NormMode::EvalSource), None)
        .unwrap();
    let hits = logits.argmax_rows().iter().zip(&stream.labels).filter(|(p, y)| p == y).count();
    let acc = hits as f64 / stream.len() as f64;
    assert!((acc - validation).abs() <= 0.02, "stream {acc} vs validation {validation}");

    let (px, py) = gen.make_probe(50).unwrap();
    let again = probe_report(&mut model, &px, &py, &pi_s).unwrap();
    assert!(again.accuracy >= 0.85);
}

#[test]
fn masked_out_adapter_leaves_tta_unchanged() {
    let mut cfg = single_seed();
    cfg.pretrain.epochs = 3;
    cfg.adapter.schedule.iters = 100;
    let (model, _) = pretrain(&cfg, 0).unwrap();
    let (adapter, _) = train_adapter_stage(&cfg, 0, &model, ComponentMask::NONE, TauTriple::default()).unwrap();
    let gen = Generator::new(&ShiftScenario {
        direction: Direction::Backward,
        ..cfg.scenario.clone()
    })
    .unwrap();
    let stream = gen.make_target_stream().unwrap();
    let pi_s = gen.source_prior().unwrap();
    for (name, with) in [("tent", "tent+adapter"), ("iabn", "iabn+adapter")] {
        let (base, adapted): (TtaMethod, TtaMethod) = (name.parse().unwrap(), with.parse().unwrap());
        let (mut m1, mut m2) = (model.clone(), model.clone());
        m1.set_stage(Stage::Tta, cfg.tta.freeze_top);
        m2.set_stage(Stage::Tta, cfg.tta.freeze_top);
        let (mut s1, mut s2) = (TtaState::new(10, &cfg.tta), TtaState::new(10, &cfg.tta));
        for range in stream.batch_ranges().take(40) {
            let (x, _) = stream.batch(range);
            let ctx = |adapter| StepContext {
                adapter,
                pi_s: &pi_s,
                prior_override: None,
                post_update_predictions: false,
            };
            let a = tta_step(&base, &mut m1, &mut s1, ctx(None), &x).unwrap();
            let b = tta_step(&adapted, &mut m2, &mut s2, ctx(Some(&adapter)), &x).unwrap();
            assert_eq!(a.logits, b.logits, "{with}");
            assert_eq!(a.loss.map(f64::to_bits), b.loss.map(f64::to_bits));
        }
        assert_eq!(m1.params.fingerprint(|_| true), m2.params.fingerprint(|_| true));
    }
}

#[test]
fn bias_shift_follows_conditioning_toward_tail() {
    let mut cfg = single_seed();
    cfg.pretrain.epochs = 5;
    let (model, _) = pretrain(&cfg, 0).unwrap();
    let (adapter, _) = train_adapter_stage(&cfg, 0, &model, ComponentMask::ALL, TauTriple::default()).unwrap();
    let pi_s = Generator::new(&cfg.scenario).unwrap().source_prior().unwrap();
    let inputs = [
        adapter.mapping.map(&pi_s).unwrap(),
        0.0,
        adapter.mapping.map(&pi_s.reversed()).unwrap(),
    ];
    let head: Vec<usize> = (0..3).collect();
    let tail: Vec<usize> = (7..10).collect();
    let gaps: Vec<f64> = inputs
        .iter()
        .map(|&s| {
            let db = adapter.output(s).unwrap().delta_b;
            let mean = |ks: &[usize]| ks.iter().map(|&k| db.data()[k]).sum::<f64>() / ks.len() as f64;
            mean(&tail) - mean(&head)
        })
        .collect();
    assert!(gaps.windows(2).all(|w| w[1] >= w[0]), "tail minus head bias {gaps:?}");
}
