use probdet::config::RunConfig;
use probdet::detector::{infer, Checkpoint, LossFlavor, ScoringMode};
use probdet::evalkit::{evaluate, run_experiment, ExperimentKind};
use probdet::synthdata::{generate_dataset, SceneDataset};
use probdet::trainer::train;

fn smoke() -> RunConfig {
    RunConfig::from_json(include_str!("../../../configs/smoke.json")).unwrap()
}

#[test]
fn train_checkpoint_infer_round_trip() {
    let cfg = smoke();
    let ds = generate_dataset(&cfg.data, 5).unwrap();
    let out = train(&ds, &cfg.pyramid, &cfg.detector, &cfg.fedloss, &cfg.trainer).unwrap();
    assert_eq!(out.trace.len(), cfg.trainer.iterations);
    assert!(out.trace.iter().all(|r| r.total.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    Checkpoint::from_detector(&out.model, cfg.to_value()).save(&path).unwrap();
    let restored = Checkpoint::load(&path).unwrap().to_detector().unwrap();
    assert_eq!(restored, out.model);

    let feats = ds.features(&cfg.pyramid);
    for f in &feats {
        assert_eq!(infer(&out.model, f), infer(&restored, f));
    }
}

#[test]
fn dataset_file_round_trip() {
    let cfg = smoke();
    let mut ds = generate_dataset(&cfg.data, 9).unwrap();
    ds.run_config = Some(cfg.to_value());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.json");
    ds.save(&path).unwrap();
    let back = SceneDataset::load(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
}

#[test]
fn training_is_seed_deterministic() {
    let cfg = smoke();
    let ds = generate_dataset(&cfg.data, 2).unwrap();
    let a = train(&ds, &cfg.pyramid, &cfg.detector, &cfg.fedloss, &cfg.trainer).unwrap();
    let b = train(&ds, &cfg.pyramid, &cfg.detector, &cfg.fedloss, &cfg.trainer).unwrap();
    assert_eq!(a.model, b.model);
    let mut other = cfg.trainer.clone();
    other.seed += 1;
    let c = train(&ds, &cfg.pyramid, &cfg.detector, &cfg.fedloss, &other).unwrap();
    assert_ne!(a.model.params, c.model.params);
}

#[test]
fn federated_and_baseline_variants_train() {
    let mut cfg = smoke();
    cfg.trainer.flavor = LossFlavor::Federated;
    cfg.trainer.scoring = ScoringMode::NonprobBaseline;
    cfg.fedloss.subset_size = 2;
    let ds = generate_dataset(&cfg.data, 4).unwrap();
    let out = train(&ds, &cfg.pyramid, &cfg.detector, &cfg.fedloss, &cfg.trainer).unwrap();
    assert_eq!(out.model.flavor, LossFlavor::Federated);
    let feats = ds.features(&cfg.pyramid);
    let e = evaluate(&out.model, &ds, &feats, &cfg, 32);
    assert!((0.0..=1.0).contains(&e.report.map));
    assert!((0.0..=1.0).contains(&e.ar));
}

#[test]
fn experiment_report_shape() {
    let cfg = smoke();
    let report = run_experiment(ExperimentKind::ProposalSweep, &cfg).unwrap();
    let budgets = cfg.eval.proposal_budgets.len();
    assert_eq!(report.rows.len(), 2 * budgets);
    assert_eq!(report.runs.len(), 2 * budgets * cfg.experiment.seeds.len());
    for cond in ["center_fused", "recall_nonfused"] {
        let ar: Vec<f64> = cfg.eval.proposal_budgets.iter().map(|&k| report.row(cond, k).unwrap().ar).collect();
        // budgets are listed largest first, so recall can only fall
        assert!(ar.windows(2).all(|w| w[0] >= w[1]), "{cond}: {ar:?}");
    }
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * budgets);
}
