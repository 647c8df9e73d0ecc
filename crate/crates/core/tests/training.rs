mod common;

use robotic_clip::checkpoint::Checkpoint;
use robotic_clip::dataprep::Manifest;
use robotic_clip::train::{run_finetune, verify_freeze, RunOptions, TrainError, Trainer};

fn fixture(dir: &std::path::Path) -> Manifest {
    let path = common::synthetic_manifest(dir, "train", 3, 8, 4);
    Manifest::load(&path).unwrap()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path());
    let config = common::quick_config(4, 8);

    let mut straight = Trainer::new(config.clone(), manifest.clone()).unwrap();
    let expected: Vec<f64> = (0..8).map(|_| straight.train_step().unwrap().l_total).collect();

    let mut first = Trainer::new(config.clone(), manifest.clone()).unwrap();
    for _ in 0..3 {
        first.train_step().unwrap();
    }
    let path = dir.path().join("k.ckpt");
    first.checkpoint().save(&path).unwrap();
    drop(first);

    let mut resumed = Trainer::resume(config, manifest, &Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.step(), 3);
    for want in &expected[3..] {
        let got = resumed.train_step().unwrap().l_total;
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    }
    assert_eq!(
        resumed.model().adapter.params().checksum(),
        straight.model().adapter.params().checksum()
    );
}

#[test]
fn resume_rejects_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path());
    let ckpt = Trainer::new(common::quick_config(4, 8), manifest.clone())
        .unwrap()
        .checkpoint();
    let other = common::quick_config(4, 9);
    assert!(matches!(
        Trainer::resume(other, manifest, &ckpt),
        Err(TrainError::Resume(_))
    ));
}

#[test]
fn zero_learning_rate_leaves_adapter_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(common::quick_config(4, 4), fixture(dir.path())).unwrap();
    let before = trainer.model().adapter.params().checksum();
    let batch = trainer.batch_for_step(0).unwrap();
    let report = trainer.apply_batch(&batch, 0.0).unwrap();
    assert!(report.total.is_finite() && report.total > 0.0);
    assert_eq!(trainer.model().adapter.params().checksum(), before);
}

#[test]
fn two_steps_on_one_batch_descend() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path());
    let trials = 20;
    let mut descended = 0;
    for seed in 0..trials {
        let mut config = common::quick_config(4, 2);
        config.seed = seed;
        let mut trainer = Trainer::new(config, manifest.clone()).unwrap();
        let batch = trainer.batch_for_step(0).unwrap();
        let first = trainer.apply_batch(&batch, 1e-3).unwrap().total;
        let second = trainer.apply_batch(&batch, 1e-3).unwrap().total;
        if second <= first {
            descended += 1;
        }
    }
    assert!(descended * 100 >= 95 * trials, "{descended}/{trials}");
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synthetic_manifest(dir.path(), "zero", 3, 4, 3);
    let mut config = common::quick_config(2, 0);
    config.epochs = 0;
    let out = dir.path().join("run");
    let summary = run_finetune(&config, &manifest, &out, &RunOptions::default()).unwrap();
    assert_eq!(summary.steps, 0);
    assert!(summary.final_checkpoint.is_none() && summary.metrics.is_none());
    let files: Vec<_> = walk(&out);
    assert_eq!(files, vec![out.join("checkpoints").join("step_000000.ckpt")]);
}

#[test]
fn repeated_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::synthetic_manifest(dir.path(), "det", 3, 4, 3);
    let config = common::quick_config(2, 4);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_finetune(&config, &manifest, &a, &RunOptions::default()).unwrap();
    run_finetune(&config, &manifest, &b, &RunOptions::default()).unwrap();
    let read = |d: &std::path::Path| std::fs::read(d.join("metrics.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(read(&a).iter().filter(|&&c| c == b'\n').count(), 4);
}

#[test]
fn freeze_check_on_identical_and_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path());
    let ckpt = Trainer::new(common::quick_config(4, 4), manifest)
        .unwrap()
        .checkpoint();
    let same = verify_freeze(&ckpt, &ckpt).unwrap();
    assert!(same.encoder_frozen);
    assert!(!same.adapter_updated);
    assert!(same.encoder.iter().chain(&same.adapter).all(|c| c.identical));

    let mut relabelled = ckpt.clone();
    relabelled.state_json = relabelled.state_json.replace("\"toy\"", "\"paper\"");
    assert!(matches!(
        verify_freeze(&ckpt, &relabelled),
        Err(TrainError::ProfileMismatch(_))
    ));

    let mut tampered = ckpt.clone();
    let blob = tampered
        .blobs
        .iter_mut()
        .find(|b| b.name.starts_with("encoder/"))
        .unwrap();
    blob.data[0] += 1.0;
    assert!(!verify_freeze(&ckpt, &tampered).unwrap().encoder_frozen);
}

fn walk(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}
