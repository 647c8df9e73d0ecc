//! Command-line front end. Each subcommand parses flags, calls one library
//! operation and reports the outcome.
//!
//! Exit codes: 0 on success, 1 for usage and input errors, 2 for internal
//! failures. Human-readable logs go to stderr; `--json` prints a summary
//! object on stdout.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use robotic_clip::analyze::{
    compare_curves, compute_features, curve_stats, list_images, load_image_frame,
    manifest_curves, write_curves_csv, write_features, AnalyzeError, PromptPair,
};
use robotic_clip::checkpoint::{Checkpoint, CheckpointError};
use robotic_clip::config::{ConfigError, TrainConfig};
use robotic_clip::dataprep::{
    build_manifest, fingerprint, CenteredBoxSegmenter, DataprepError, ExternalSegmenter,
    ExternalTagger, FullImageSegmenter, Manifest, PosTagger, PrepConfig, RuleTagger, Segmenter,
};
use robotic_clip::dataset::FrameLoader;
use robotic_clip::synthetic::{generate_corpus, SynthConfig, SynthError};
use robotic_clip::train::{checkpoint_state, load_model, run_finetune, RunOptions, TrainError};

/// Overrides the configured seed; a `--seed` flag wins over it.
pub const SEED_ENV: &str = "ROBOTIC_CLIP_SEED";

#[derive(Debug, Parser)]
#[command(name = "robotic-clip", version, about = "Action-aware dual-encoder fine-tuning")]
struct Cli {
    /// Print a JSON summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract queries and masks from a frame corpus into a manifest.
    Prepare(PrepareArgs),
    /// Fine-tune the adapter.
    Train(TrainArgs),
    /// Per-frame text similarity curves, optionally against a second checkpoint.
    Analyze(AnalyzeArgs),
    /// Write frozen-encoder embeddings for images and prompts.
    Export(ExportArgs),
    /// Generate a procedural corpus of moving-shape videos.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SegmenterKind {
    StubFull,
    StubBox,
    External,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaggerKind {
    Rule,
    External,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Manifest path; masks are written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "stub-box")]
    segmenter: SegmenterKind,
    /// Program for `--segmenter external`.
    #[arg(long)]
    segmenter_program: Option<String>,
    #[arg(long, value_enum, default_value = "rule")]
    tagger: TaggerKind,
    /// Program for `--tagger external`.
    #[arg(long)]
    tagger_program: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PairKind {
    FirstLast,
    NoAction,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Second checkpoint (e.g. trained without the triplet term) to compare against.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "first-last")]
    pair: PairKind,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of PNG images.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Prompt to embed; may be repeated.
    #[arg(long = "prompt")]
    prompts: Vec<String>,
    /// Embedding file; the index is written to `<out>.index.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    videos: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    size: u32,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[arg(long, default_value = "synth")]
    id_prefix: String,
}

/// Failure with its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, missing or malformed inputs.
    User(String),
    /// A bug or numerical failure.
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::User(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<DataprepError> for CliError {
    fn from(e: DataprepError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(_) | TrainError::Loss(_) | TrainError::NonFiniteLoss { .. } => {
                CliError::Internal(e.to_string())
            }
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<AnalyzeError> for CliError {
    fn from(e: AnalyzeError) -> Self {
        match e {
            AnalyzeError::Train(t) => t.into(),
            AnalyzeError::Model(_) | AnalyzeError::Loss(_) => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::User(format!("{}: {e}", path.display()))
}

/// Flag, then environment, then the fallback.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::User(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match dispatch(&cli.command) {
        Ok(summary) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
            }
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(command: &Command) -> Result<Value, CliError> {
    match command {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Analyze(a) => analyze(a),
        Command::Export(a) => export(a),
        Command::Synth(a) => synth(a),
    }
}

fn prepare(a: &PrepareArgs) -> Result<Value, CliError> {
    let config = PrepConfig {
        seed: resolve_seed(a.seed, 0)?,
        ..PrepConfig::default()
    };
    let segmenter: Box<dyn Segmenter> = match a.segmenter {
        SegmenterKind::StubFull => Box::new(FullImageSegmenter),
        SegmenterKind::StubBox => Box::new(CenteredBoxSegmenter::default()),
        SegmenterKind::External => Box::new(ExternalSegmenter {
            program: a.segmenter_program.clone().ok_or_else(|| {
                CliError::User("--segmenter external needs --segmenter-program".into())
            })?,
        }),
    };
    let tagger: Box<dyn PosTagger> = match a.tagger {
        TaggerKind::Rule => Box::new(RuleTagger),
        TaggerKind::External => Box::new(ExternalTagger {
            program: a.tagger_program.clone().ok_or_else(|| {
                CliError::User("--tagger external needs --tagger-program".into())
            })?,
        }),
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let report = build_manifest(&a.corpus, &a.out, tagger.as_ref(), segmenter.as_ref(), &config)?;
    log::info!(
        "wrote {} entries to {} ({} skipped)",
        report.entries.len(),
        a.out.display(),
        report.skipped.len()
    );
    Ok(json!({
        "version": env!("CARGO_PKG_VERSION"),
        "manifest": a.out,
        "fingerprint": fingerprint(&config, tagger.as_ref(), segmenter.as_ref()),
        "entries": report.entries.len(),
        "eligible": report.entries.iter().filter(|e| e.is_eligible()).count(),
        "skipped": report.skipped,
        "stats": report.stats,
    }))
}

fn train(a: &TrainArgs) -> Result<Value, CliError> {
    let mut config = TrainConfig::load(&a.config)?;
    config.seed = resolve_seed(a.seed, config.seed)?;
    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    let echo = a.out.join("config.txt");
    fs::write(&echo, config.to_text()).map_err(|e| io_error(&echo, e))?;
    let options = RunOptions {
        resume: a.resume.clone(),
    };
    let summary = run_finetune(&config, &a.manifest, &a.out, &options)?;
    if let (Some(i), Some(f)) = (&summary.initial_eval, &summary.final_eval) {
        log::info!("loss {:.4} -> {:.4} after {} steps", i.l_total, f.l_total, summary.steps);
    }
    Ok(json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "config": echo,
        "summary": summary,
    }))
}

fn analyze(a: &AnalyzeArgs) -> Result<Value, CliError> {
    let manifest = Manifest::load(&a.manifest)?;
    let entries: Vec<_> = manifest.eligible().collect();
    if entries.is_empty() {
        return Err(AnalyzeError::EmptyEvalSet.into());
    }
    let pair = match a.pair {
        PairKind::FirstLast => PromptPair::FirstLast,
        PairKind::NoAction => PromptPair::NoAction,
    };
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = load_model(&ckpt).map_err(CliError::from)?;
    let loader = FrameLoader::new(&manifest, model.config().image_size);
    let curves = manifest_curves(&model, &entries, &loader, pair)?;
    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    write_curves_csv(&a.out.join("curves.csv"), &curves)?;
    let stats = curve_stats(&curves);
    let taus: Vec<Value> = curves
        .iter()
        .map(|c| json!({"video_id": c.video_id, "kendall_tau": c.kendall_tau, "degenerate": c.degenerate}))
        .collect();
    let report = json!({"stats": stats, "videos": taus});
    write_json(&a.out.join("curves.json"), &report)?;
    log::info!(
        "{} videos: mean tau {:.3}, last above first in {:.0}%",
        stats.videos,
        stats.mean_tau,
        100.0 * stats.last_above_first
    );
    let mut summary = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "curves": a.out.join("curves.csv"),
        "stats": stats,
    });
    if let Some(other) = &a.compare {
        let other = Checkpoint::load(other)?;
        let (sa, sb) = (checkpoint_state(&ckpt)?, checkpoint_state(&other)?);
        if sa.profile != sb.profile {
            return Err(AnalyzeError::ProfileMismatch(format!("{} vs {}", sa.profile, sb.profile)).into());
        }
        let other_model = load_model(&other)?;
        let other_curves = manifest_curves(&other_model, &entries, &loader, pair)?;
        let ablation = compare_curves(&curves, &other_curves)?;
        let path = a.out.join("ablation.json");
        write_json(&path, &serde_json::to_value(&ablation).expect("json"))?;
        summary["ablation"] = json!({
            "report": path,
            "mean_tau_difference": ablation.mean_tau_difference,
            "tau_sign_test_p": ablation.tau_sign_test.p_value,
        });
    }
    Ok(summary)
}

fn export(a: &ExportArgs) -> Result<Value, CliError> {
    if a.images.is_none() && a.prompts.is_empty() {
        return Err(CliError::User("nothing to export: pass --images and/or --prompt".into()));
    }
    let model = load_model(&Checkpoint::load(&a.checkpoint)?)?;
    let size = model.config().image_size;
    let mut images = Vec::new();
    if let Some(dir) = &a.images {
        for path in list_images(dir)? {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            images.push((name, load_image_frame(&path, size)?));
        }
    }
    let (index, matrix) = compute_features(&model, &images, &a.prompts)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    write_features(&a.out, &index, &matrix)?;
    log::info!("wrote {} embeddings of dimension {}", index.rows.len(), index.dim);
    Ok(json!({
        "version": env!("CARGO_PKG_VERSION"),
        "features": a.out,
        "rows": index.rows.len(),
        "dim": index.dim,
    }))
}

fn synth(a: &SynthArgs) -> Result<Value, CliError> {
    let config = SynthConfig {
        videos: a.videos,
        frames: a.frames,
        size: a.size,
        seed: resolve_seed(a.seed, 0)?,
        dataset: a.dataset.clone(),
        id_prefix: a.id_prefix.clone(),
    };
    let videos = generate_corpus(&a.out, &config)?;
    log::info!("generated {} videos under {}", videos.len(), a.out.display());
    Ok(json!({
        "version": env!("CARGO_PKG_VERSION"),
        "corpus": a.out,
        "videos": videos.len(),
        "seed": config.seed,
    }))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value).expect("json")).map_err(|e| io_error(path, e))
}
