#![allow(dead_code)]

use std::path::{Path, PathBuf};

use robotic_clip::config::TrainConfig;
use robotic_clip::dataprep::{build_manifest, CenteredBoxSegmenter, PrepConfig, RuleTagger};
use robotic_clip::synthetic::{generate_corpus, SynthConfig};

/// Generates `videos` synthetic videos under `root/<name>_corpus` and writes
/// `root/<name>/manifest.jsonl` with the rule tagger and box stub.
pub fn synthetic_manifest(root: &Path, name: &str, seed: u64, videos: usize, frames: usize) -> PathBuf {
    let corpus = root.join(format!("{name}_corpus"));
    let synth = SynthConfig {
        videos,
        frames,
        seed,
        id_prefix: name.into(),
        ..Default::default()
    };
    generate_corpus(&corpus, &synth).expect("corpus");
    let manifest = root.join(name).join("manifest.jsonl");
    std::fs::create_dir_all(manifest.parent().unwrap()).unwrap();
    build_manifest(
        &corpus,
        &manifest,
        &RuleTagger,
        &CenteredBoxSegmenter::default(),
        &PrepConfig::default(),
    )
    .expect("manifest");
    manifest
}

/// The end-to-end experiment setting: 200 Adam steps at lr 3e-3 with every
/// loss hyperparameter at its default.
pub fn experiment_config(seed: u64, triplet: bool) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.seed = seed;
    c.epochs = 100;
    c.max_steps = 200;
    c.optimizer.lr = 3e-3;
    c.loss.triplet = triplet;
    c
}

/// Small config for quick runs on a handful of videos.
pub fn quick_config(batch_size: usize, max_steps: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.batch_size = batch_size;
    c.epochs = 1000;
    c.max_steps = max_steps;
    c.optimizer.lr = 1e-3;
    c
}
