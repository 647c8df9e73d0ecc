//! Generates a synthetic corpus, fine-tunes the toy profile and prints
//! held-out similarity-curve statistics.
//!
//! Usage: `cargo run --release --example synthetic_run -- [key=value ...]`
//! where keys are training config keys (e.g. `lr=0.001 triplet=false`).

use std::path::Path;
use std::time::Instant;

use robotic_clip::analyze::{curve_stats, manifest_curves, PromptPair};
use robotic_clip::config::TrainConfig;
use robotic_clip::dataprep::{build_manifest, CenteredBoxSegmenter, Manifest, PrepConfig, RuleTagger};
use robotic_clip::dataset::FrameLoader;
use robotic_clip::synthetic::{generate_corpus, SynthConfig};
use robotic_clip::train::{load_model, run_finetune, RunOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let mut text = String::from("epochs = 100\nmax_steps = 200\nlr = 0.003\n");
    for o in &overrides {
        text = text
            .lines()
            .filter(|l| l.split('=').next().map(str::trim) != o.split('=').next().map(str::trim))
            .map(|l| format!("{l}\n"))
            .collect();
        text.push_str(o);
        text.push('\n');
    }
    let config = TrainConfig::from_text(&text)?;
    let work = tempfile::tempdir()?;
    let root = work.path();
    let prep = |name: &str, seed: u64, videos: usize| -> Result<Manifest, Box<dyn std::error::Error>> {
        let corpus = root.join(format!("{name}_corpus"));
        let synth = SynthConfig { videos, seed, id_prefix: name.into(), ..Default::default() };
        generate_corpus(&corpus, &synth)?;
        let manifest = root.join(name).join("manifest.jsonl");
        std::fs::create_dir_all(manifest.parent().unwrap())?;
        build_manifest(&corpus, &manifest, &RuleTagger, &CenteredBoxSegmenter::default(), &PrepConfig::default())?;
        Ok(Manifest::load(&manifest)?)
    };
    prep("train", 0, 64)?;
    let held = prep("heldout", 1000, 16)?;
    let start = Instant::now();
    let out = root.join("run");
    let summary = run_finetune(&config, &root.join("train/manifest.jsonl"), &out, &RunOptions::default())?;
    println!("train time {:.1}s steps {}", start.elapsed().as_secs_f64(), summary.steps);
    println!("initial {:?}", summary.initial_eval);
    println!("final   {:?}", summary.final_eval);
    let loader = FrameLoader::new(&held, 32);
    let entries: Vec<_> = held.eligible().collect();
    for (label, path) in [("init", summary.init_checkpoint.clone()), ("final", summary.final_checkpoint.clone().unwrap())] {
        let model = load_model(&robotic_clip::checkpoint::Checkpoint::load(Path::new(&path))?)?;
        let curves = manifest_curves(&model, &entries, &loader, PromptPair::FirstLast)?;
        println!("{label}: {:?}", curve_stats(&curves));
    }
    Ok(())
}
