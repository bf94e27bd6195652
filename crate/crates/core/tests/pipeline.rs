use conal_core::conal::Checkpoint;
use conal_core::data::CrowdSplits;
use conal_core::experiment::{
    generate_for_seed, read_csv, report_from_dir, sweep_to_dir, ExperimentConfig, Manifest, SweepRow, SweepSpec, SUMMARY_FILE,
};
use conal_core::methods::MethodRegistry;
use conal_core::synth::{InstanceSpec, NoiseSpec};
use conal_core::training::evaluate;
use conal_core::Error;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: InstanceSpec { num_instances: 300, ..InstanceSpec::default() },
        ..ExperimentConfig::default()
    };
    cfg.train.epochs = 3;
    cfg.train.batch_size = 64;
    cfg.train.hidden = 16;
    cfg.train.seeds = vec![0];
    cfg.train.em.max_iters = 3;
    cfg.train.em.classifier_steps = 2;
    cfg
}

#[test]
fn every_method_runs_and_round_trips_its_checkpoint() {
    let cfg = small();
    let (splits, _) = generate_for_seed(&cfg.noise, &cfg.dataset, 0).unwrap();
    let registry = MethodRegistry::default();
    let dir = tempfile::tempdir().unwrap();
    for name in registry.names() {
        let run = registry.get(name).unwrap().run(&splits, &cfg.train, 0).unwrap();
        assert_eq!(run.report.method, name);
        assert!((0.0..=1.0).contains(&run.report.test_accuracy));
        let path = dir.path().join(name);
        run.checkpoint.save(&path, serde_json::json!({})).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let before = evaluate(run.checkpoint.classifier(), &splits.test).unwrap();
        let after = evaluate(loaded.classifier(), &splits.test).unwrap();
        assert_eq!(before, after, "{name}");
    }
}

#[test]
fn splits_survive_a_save_load_cycle() {
    let cfg = small();
    let (splits, _) = generate_for_seed(&NoiseSpec::default(), &cfg.dataset, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    splits.save(dir.path()).unwrap();
    let loaded = CrowdSplits::load(dir.path(), cfg.dataset.num_classes).unwrap();
    assert_eq!(loaded.train.len(), splits.train.len());
    assert_eq!(loaded.train.true_labels(), splits.train.true_labels());
    for i in 0..splits.train.len() {
        assert_eq!(loaded.train.annotation_row(i), splits.train.annotation_row(i));
    }
    assert!(loaded.test.features().max_abs_diff(splits.test.features()) == 0.0);
}

#[test]
fn sweep_writes_one_row_per_run_and_reports_back() {
    let mut cfg = small();
    cfg.train.seeds = vec![0, 1];
    cfg.sweep = SweepSpec {
        common_strength: vec![0.4, 0.7],
        proportion: vec![0.0, 0.5],
        lambda: vec![1e-5],
        methods: vec!["dl_mv".into(), "conal".into()],
    };
    let dir = tempfile::tempdir().unwrap();
    let cells = sweep_to_dir(&cfg, &MethodRegistry::default(), dir.path()).unwrap();
    let rows: Vec<SweepRow> = read_csv(&dir.path().join(SUMMARY_FILE)).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2 * 2);
    assert_eq!(cells.len(), 8);
    assert!(cells.iter().all(|c| c.runs == 2));
    assert!(rows.iter().filter(|r| r.method == "conal").all(|r| r.global_tv.is_some()));
    assert!(rows.iter().filter(|r| r.method == "dl_mv").all(|r| r.global_tv.is_none()));
    assert_eq!(report_from_dir(dir.path()).unwrap(), cells);
    let manifest = Manifest::read(dir.path()).unwrap();
    assert_eq!(manifest.config_hash, cfg.hash());
}

#[test]
fn unknown_method_is_rejected_before_running() {
    let mut cfg = small();
    cfg.sweep.methods = vec!["svm".into()];
    let dir = tempfile::tempdir().unwrap();
    let err = sweep_to_dir(&cfg, &MethodRegistry::default(), dir.path()).unwrap_err();
    assert!(matches!(err, Error::UnknownMethod(_)), "{err}");
}

#[test]
fn config_rejects_unknown_keys() {
    let err = ExperimentConfig::from_json(r#"{"train": {"learning_rte": 0.1}}"#).unwrap_err();
    assert_eq!(err.kind(), "json");
}
