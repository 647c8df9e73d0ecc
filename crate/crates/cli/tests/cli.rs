use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_robotic-clip");

fn cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env_remove("ROBOTIC_CLIP_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
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

/// Tiny corpus plus manifest under `dir`.
fn prepared(dir: &Path) -> PathBuf {
    json(&cli(
        &["synth", "--out", "corpus", "--videos", "4", "--frames", "3", "--json"],
        dir,
    ));
    json(&cli(
        &["prepare", "--corpus", "corpus", "--out", "prep/manifest.jsonl", "--json"],
        dir,
    ));
    dir.join("prep/manifest.jsonl")
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
}

#[test]
fn unknown_subcommand_and_flag_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["frobnicate"], dir.path()).status.code(), Some(1));
    let out = cli(&["synth", "--out", "x", "--colour", "red"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn missing_config_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(
        &["train", "--config", "missing.cfg", "--manifest", "m.jsonl", "--out", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config not found"));
}

#[test]
fn empty_corpus_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    let out = cli(&["prepare", "--corpus", "empty", "--out", "m.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_flag_beats_environment_beats_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str], env: Option<&str>| {
        let mut c = Command::new(BIN);
        c.args(args).current_dir(dir.path()).env("RUST_LOG", "warn");
        match env {
            Some(v) => c.env("ROBOTIC_CLIP_SEED", v),
            None => c.env_remove("ROBOTIC_CLIP_SEED"),
        };
        json(&c.output().unwrap())["seed"].as_u64().unwrap()
    };
    let synth = ["synth", "--out", "c", "--videos", "1", "--frames", "2", "--json"];
    assert_eq!(run(&synth, None), 0);
    assert_eq!(run(&synth, Some("7")), 7);
    let mut flagged = synth.to_vec();
    flagged.extend(["--seed", "3"]);
    assert_eq!(run(&flagged, Some("7")), 3);

    let manifest = prepared(dir.path());
    std::fs::write(dir.path().join("t.cfg"), "seed = 11\nepochs = 0\nbatch_size = 2\n").unwrap();
    let train = |out: &str| {
        vec!["train", "--config", "t.cfg", "--manifest", manifest.to_str().unwrap(), "--out", out, "--json"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>()
    };
    let args = train("a");
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(run(&refs, None), 11);
    assert_eq!(run(&refs, Some("5")), 5);
    let mut args = train("b");
    args.extend(["--seed".into(), "2".into()]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(run(&refs, Some("5")), 2);
}

#[test]
fn pipeline_writes_only_under_out() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let manifest = prepared(root);
    std::fs::write(root.join("t.cfg"), "epochs = 1\nbatch_size = 2\nlr = 0.001\n").unwrap();
    let before = files_under(root);
    let m = manifest.to_str().unwrap();

    let summary = json(&cli(
        &["train", "--config", "t.cfg", "--manifest", m, "--out", "run", "--json"],
        root,
    ));
    assert_eq!(summary["summary"]["steps"], 2);
    json(&cli(
        &[
            "analyze", "--checkpoint", "run/final.ckpt", "--compare", "run/checkpoints/step_000000.ckpt",
            "--manifest", m, "--out", "analysis", "--json",
        ],
        root,
    ));
    let export = json(&cli(
        &[
            "export", "--checkpoint", "run/final.ckpt", "--images", "corpus/synthetic/synth_0000/frames",
            "--prompt", "move red square to blue bowl", "--out", "features/f.bin", "--json",
        ],
        root,
    ));
    assert_eq!(export["rows"], 4);

    let after = files_under(root);
    let new: Vec<_> = after.iter().filter(|p| !before.contains(p)).collect();
    assert!(!new.is_empty());
    for p in new {
        let rel = p.strip_prefix(root).unwrap();
        let top = rel.components().next().unwrap().as_os_str().to_str().unwrap();
        assert!(["run", "analysis", "features"].contains(&top), "stray output {rel:?}");
    }
    for f in ["run/config.txt", "run/metrics.jsonl", "run/final.ckpt", "analysis/curves.csv", "analysis/ablation.json"] {
        assert!(root.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(root.join("analysis/curves.csv")).unwrap();
    assert!(csv.starts_with("video_id,frame_index,similarity\n"));
    assert_eq!(csv.lines().count(), 1 + 4 * 3);
}

#[test]
fn corrupt_checkpoint_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = prepared(dir.path());
    std::fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    let out = cli(
        &["analyze", "--checkpoint", "bad.ckpt", "--manifest", manifest.to_str().unwrap(), "--out", "a"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}
