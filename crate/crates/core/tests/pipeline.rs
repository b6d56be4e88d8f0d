use std::path::Path;

use dfwe::checkpoint::{self, check_compatible_labeled};
use dfwe::evaluation::{evaluate_builtin, LabeledDataset, MetricKind};
use dfwe::pipeline::{
    artifact_path, load_family, run_baseline, run_dfwe, RunConfig, RunReport, RunStatus, Stage,
};
use dfwe::weight_space::interpolate;

fn config(dir: &Path, seed: u64, sets: &[&str]) -> RunConfig {
    RunConfig {
        seed,
        output_dir: dir.to_path_buf(),
        ..Default::default()
    }
    .with_overrides(sets)
    .unwrap()
}

fn majority_rate(d: &LabeledDataset) -> f64 {
    let mut counts = vec![0usize; d.num_classes()];
    for &y in d.labels() {
        counts[y as usize] += 1;
    }
    *counts.iter().max().unwrap() as f64 / d.len() as f64
}

#[test]
fn reported_scores_reproduce_from_persisted_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_dfwe(&config(dir.path(), 11, &[])).unwrap();
    let task = &report.tasks[0];
    let family = load_family(&dir.path().join("family")).unwrap();
    let metric = MetricKind::Accuracy;

    let merged = checkpoint::load(&dir.path().join("merged/dfwe.ckpt")).unwrap();
    let dev = evaluate_builtin(&merged, &family.target().dev, &metric).unwrap();
    let test = evaluate_builtin(&merged, &family.target().test, &metric).unwrap();
    assert!((dev - task.dev.as_ref().unwrap().dfwe).abs() <= 1e-9);
    assert!((test - task.dfwe).abs() <= 1e-9);

    // Re-merging the persisted finetuned experts with the reported weights
    // gives the persisted merged checkpoint bit for bit.
    let members: Vec<_> = report
        .experts
        .iter()
        .map(|e| {
            let rel = &e.stage2.as_ref().unwrap().checkpoint.path;
            checkpoint::load(&artifact_path(dir.path(), rel)).unwrap()
        })
        .collect();
    let set = check_compatible_labeled(members, task.members.clone()).unwrap();
    let again = interpolate(&set, &task.alpha_star).unwrap();
    assert!(again.bit_eq(&merged));

    let baseline = report.baseline.as_ref().unwrap();
    let b = checkpoint::load(&artifact_path(
        dir.path(),
        &baseline.artifact.checkpoint.path,
    ))
    .unwrap();
    let b_test = evaluate_builtin(&b, &family.target().test, &metric).unwrap();
    assert!((b_test - task.baseline).abs() <= 1e-9);
    assert!((task.delta - (task.dfwe - task.baseline)).abs() <= 1e-12);

    let on_disk = RunReport::load(&dir.path().join("report.json")).unwrap();
    assert_eq!(on_disk.canonical_json(), report.canonical_json());
}

#[test]
fn three_sources_give_five_experts_and_one_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_dfwe(&config(dir.path(), 12, &["family.n_sources=3"])).unwrap();
    let count = |role: &str| report.manifest.iter().filter(|e| e.role == role).count();
    assert_eq!(count("stage1"), 5);
    assert_eq!(count("stage2"), 5);
    assert_eq!(count("baseline"), 1);
    assert_eq!(report.tasks[0].alpha_star.len(), 5);
    assert_eq!(report.tasks[0].members.len(), 5);
    for e in &report.manifest {
        let p = artifact_path(dir.path(), &e.path);
        assert_eq!(checkpoint::file_hash(&p).unwrap(), e.sha256, "{}", e.path);
    }
}

#[test]
fn dev_score_dominates_every_start_point() {
    for (seed, rho) in [(21, 0.0), (22, 1.0)] {
        let dir = tempfile::tempdir().unwrap();
        let report = run_dfwe(&config(
            dir.path(),
            seed,
            &[&format!("family.relatedness={rho}")],
        ))
        .unwrap();
        let dev = report.tasks[0].dev.as_ref().unwrap();
        for v in &dev.initial_vertices {
            assert!(dev.dfwe >= v.dev_score);
        }
        for m in &dev.members {
            assert!(dev.dfwe >= *m);
        }
    }
}

#[test]
fn single_class_task_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_dfwe(&config(dir.path(), 13, &["family.num_classes=1"])).unwrap();
    assert_eq!(report.tasks[0].dfwe, 1.0);
    assert_eq!(report.tasks[0].baseline, 1.0);
    assert_eq!(report.tasks[0].delta, 0.0);
}

#[test]
fn baseline_beats_majority_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 14, &[]);
    let (_, test) = run_baseline(&cfg).unwrap();
    let family = load_family(&dir.path().join("family")).unwrap();
    assert!(test > majority_rate(&family.target().test));

    // The baseline arm of a full run is the same model.
    let other = tempfile::tempdir().unwrap();
    let report = run_dfwe(&config(other.path(), 14, &[])).unwrap();
    assert_eq!(report.tasks[0].baseline, test);
}

#[test]
fn divergence_leaves_a_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_dfwe(&config(dir.path(), 15, &["train.learning_rate=1e300"])).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let partial = err.partial_report().unwrap();
    assert_eq!(partial.status, RunStatus::Partial);
    assert_eq!(partial.failure.as_ref().unwrap().stage, Stage::TrainExperts);

    let on_disk = RunReport::load(&dir.path().join("report.json")).unwrap();
    assert_eq!(on_disk.status, RunStatus::Partial);
    assert!(on_disk.manifest.iter().any(|e| e.role == "base"));
    assert!(on_disk.tasks.is_empty());
}

#[test]
fn unwritable_output_dir_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    std::fs::write(&file, b"x").unwrap();
    let err = run_dfwe(&config(&file.join("run"), 16, &[])).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.partial_report().is_none());
}
