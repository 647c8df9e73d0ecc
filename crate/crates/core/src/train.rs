//! Fine-tuning loop: only the adapter is updated; both encoders run as
//! constants in every forward and backward pass.
//!
//! A run is a pure function of (config, manifest): the batch for update `k`
//! is built from epoch `k / batches_per_epoch` and position
//! `k % batches_per_epoch`, so resuming from a checkpoint needs nothing but
//! the step counter, the adapter and the optimizer moments.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Blob, Checkpoint, CheckpointError};
use crate::config::{ConfigError, TrainConfig};
use crate::dataprep::{DataprepError, Manifest};
use crate::dataset::{self, Batch, DatasetError, FrameLoader, FramePairSample, SamplerConfig};
use crate::frame::RgbaFrame;
use crate::graph::Graph;
use crate::loss::{self, LossConfig, LossError, LossReport};
use crate::model::{stack_rows, ModelError, RoboticClip};
use crate::nn::ParamSet;
use crate::optim::{scheduled_lr, Optimizer};
use crate::report::round_sig;

pub const ENCODER_PREFIX: &str = "encoder/";
pub const ADAPTER_PREFIX: &str = "adapter/";
pub const OPTIM_PREFIX: &str = "optim/";
/// Epoch tag reserved for the fixed evaluation pass.
const EVAL_EPOCH: u64 = u64::MAX - 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Dataprep(#[from] DataprepError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite loss or gradient at step {step} ({reason}); batch videos: {}", video_ids.join(", "))]
    NonFiniteLoss {
        step: u64,
        reason: String,
        video_ids: Vec<String>,
    },
    #[error("{eligible} eligible videos in the training split; batch size is {batch_size}")]
    NotEnoughVideos { eligible: usize, batch_size: usize },
    #[error("checkpoints come from different model profiles: {0}")]
    ProfileMismatch(String),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Frozen image embeddings keyed by (video, frame). Valid for one encoder.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    map: Mutex<HashMap<(String, usize), Array1<f64>>>,
}

impl EmbeddingCache {
    fn get_or_encode(
        &self,
        model: &RoboticClip,
        video_id: &str,
        t: usize,
        frame: &RgbaFrame,
    ) -> Result<Array1<f64>, ModelError> {
        let key = (video_id.to_string(), t);
        if let Some(v) = self.map.lock().expect("cache lock").get(&key) {
            return Ok(v.clone());
        }
        let v = model.encoder.encode_image(frame)?;
        self.map.lock().expect("cache lock").insert(key, v.clone());
        Ok(v)
    }
}

struct SampleForward {
    graph: Graph,
    p: crate::graph::Var,
    adapter_vars: Vec<crate::graph::Var>,
    v1: Array1<f64>,
    v2: Array1<f64>,
}

fn forward_sample(
    model: &RoboticClip,
    s: &FramePairSample,
    cache: &EmbeddingCache,
) -> Result<SampleForward, ModelError> {
    let v1 = cache.get_or_encode(model, &s.video_id, s.t1, &s.first)?;
    let v2 = cache.get_or_encode(model, &s.video_id, s.t2, &s.second)?;
    let mut g = Graph::new();
    let enc = model.encoder.params().bind(&mut g, false);
    let ad = model.adapter.params().bind(&mut g, true);
    let p = model.prompt_graph(&mut g, &enc, &ad, &s.tokens, &s.action_mask, &s.first, &s.second)?;
    Ok(SampleForward {
        graph: g,
        p,
        adapter_vars: ad.vars().to_vec(),
        v1,
        v2,
    })
}

/// `(v1, v2, p)` stacked over the batch.
pub fn batch_embeddings(
    model: &RoboticClip,
    batch: &Batch,
    cache: &EmbeddingCache,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>), ModelError> {
    let fwd = forward_batch(model, batch, cache)?;
    Ok(stack(&fwd))
}

fn forward_batch(
    model: &RoboticClip,
    batch: &Batch,
    cache: &EmbeddingCache,
) -> Result<Vec<SampleForward>, ModelError> {
    batch
        .samples
        .par_iter()
        .map(|s| forward_sample(model, s, cache))
        .collect()
}

fn stack(fwd: &[SampleForward]) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let v1: Vec<_> = fwd.iter().map(|f| f.v1.clone()).collect();
    let v2: Vec<_> = fwd.iter().map(|f| f.v2.clone()).collect();
    let p: Vec<_> = fwd.iter().map(|f| f.graph.value(f.p).row(0).to_owned()).collect();
    (stack_rows(&v1), stack_rows(&v2), stack_rows(&p))
}

/// Loss of one batch without gradients.
pub fn batch_loss(
    model: &RoboticClip,
    batch: &Batch,
    config: &LossConfig,
    cache: &EmbeddingCache,
) -> Result<LossReport, TrainError> {
    let (v1, v2, p) = batch_embeddings(model, batch, cache)?;
    Ok(loss::evaluate(&v1, &v2, &p, config)?)
}

/// Loss of one batch and its gradient with respect to every adapter
/// parameter, in [`ParamSet`] order. Encoder parameters receive none.
pub fn batch_gradients(
    model: &RoboticClip,
    batch: &Batch,
    config: &LossConfig,
    cache: &EmbeddingCache,
) -> Result<(LossReport, Vec<Array2<f64>>), TrainError> {
    let fwd = forward_batch(model, batch, cache)?;
    let (v1, v2, p) = stack(&fwd);
    let (report, grads) = loss::evaluate_with_grads(&v1, &v2, &p, config)?;
    let per_sample: Vec<Vec<Option<Array2<f64>>>> = fwd
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let seed = grads.p.row(i).to_owned().insert_axis(ndarray::Axis(0));
            let mut g = f.graph.backward(f.p, seed);
            f.adapter_vars.iter().map(|&v| g.take(v)).collect()
        })
        .collect();
    let params = model.adapter.params();
    let mut total: Vec<Array2<f64>> = params.iter().map(|(_, v)| Array2::zeros(v.dim())).collect();
    // summed in sample order so the result does not depend on scheduling
    for sample in per_sample {
        for (acc, g) in total.iter_mut().zip(sample) {
            if let Some(g) = g {
                *acc += &g;
            }
        }
    }
    Ok((report, total))
}

/// Averaged losses of the fixed evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub l_contrastive: f64,
    pub l_triplet: f64,
    pub l_total: f64,
    pub batches: usize,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub l_contrastive: f64,
    pub l_triplet: f64,
    pub l_total: f64,
}

impl StepRecord {
    fn rounded(&self) -> Self {
        Self {
            lr: round_sig(self.lr),
            l_contrastive: round_sig(self.l_contrastive),
            l_triplet: round_sig(self.l_triplet),
            l_total: round_sig(self.l_total),
            ..self.clone()
        }
    }
}

/// Progress fields stored in a checkpoint next to the config echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub step: u64,
    pub profile: String,
    pub encoder_checksum: String,
    pub adapter_checksum: String,
}

/// Owns the model, optimizer and data for one run.
pub struct Trainer {
    config: TrainConfig,
    model: RoboticClip,
    optimizer: Optimizer,
    manifest: Manifest,
    loader: FrameLoader,
    pool: Vec<usize>,
    cache: EmbeddingCache,
    step: u64,
    batches_per_epoch: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, manifest: Manifest) -> Result<Self, TrainError> {
        config.validate()?;
        let model_cfg = config.model_config();
        let adapter_seed = dataset::mix_seed(&[config.seed, 0xada9]);
        let mut model = RoboticClip::new(&model_cfg, adapter_seed)?;
        if let Some(w) = &config.encoder_weights {
            model.encoder.load_flat_weights(Path::new(w))?;
        }
        let eligible: Vec<(usize, &str)> = manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_eligible())
            .map(|(i, e)| (i, e.video_id.as_str()))
            .collect();
        let (train_ids, _) = dataset::split(
            eligible.iter().map(|(_, id)| *id),
            (1.0 - config.val_fraction, config.val_fraction),
            &config.split_salt,
        )?;
        let train_ids: std::collections::HashSet<String> = train_ids.into_iter().collect();
        let pool: Vec<usize> = eligible
            .iter()
            .filter(|(_, id)| train_ids.contains(*id))
            .map(|(i, _)| *i)
            .collect();
        if pool.len() < config.batch_size {
            return Err(TrainError::NotEnoughVideos {
                eligible: pool.len(),
                batch_size: config.batch_size,
            });
        }
        let loader = FrameLoader::new(&manifest, model_cfg.image_size);
        let optimizer = Optimizer::new(config.optimizer.clone(), model.adapter.params());
        Ok(Self {
            batches_per_epoch: (pool.len() / config.batch_size) as u64,
            config,
            model,
            optimizer,
            manifest,
            loader,
            pool,
            cache: EmbeddingCache::default(),
            step: 0,
        })
    }

    /// Rebuilds a trainer at the state stored in `ckpt`.
    pub fn resume(
        config: TrainConfig,
        manifest: Manifest,
        ckpt: &Checkpoint,
    ) -> Result<Self, TrainError> {
        let saved: TrainConfig = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| TrainError::Resume(format!("config echo: {e}")))?;
        if saved != config {
            return Err(TrainError::Resume(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        let state = checkpoint_state(ckpt)?;
        let mut t = Self::new(config, manifest)?;
        assign_group(t.model.encoder.params_mut(), ckpt, ENCODER_PREFIX)?;
        assign_group(t.model.adapter.params_mut(), ckpt, ADAPTER_PREFIX)?;
        t.optimizer
            .load_blobs(t.model.adapter.params(), OPTIM_PREFIX, &ckpt.blobs, state.step)
            .map_err(TrainError::Resume)?;
        t.step = state.step;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &RoboticClip {
        &self.model
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn loader(&self) -> &FrameLoader {
        &self.loader
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.batches_per_epoch
    }

    /// Updates in the whole run: `epochs × batches_per_epoch`, capped by
    /// `max_steps` when that is nonzero.
    pub fn total_steps(&self) -> u64 {
        let full = self.config.epochs * self.batches_per_epoch;
        match self.config.max_steps {
            0 => full,
            cap => full.min(cap),
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.config.seed,
            min_gap: self.config.min_gap,
        }
    }

    /// The batch used for update number `step` (0-based).
    pub fn batch_for_step(&self, step: u64) -> Result<Batch, TrainError> {
        let epoch = step / self.batches_per_epoch;
        let position = (step % self.batches_per_epoch) as usize;
        let order = dataset::epoch_batches(&self.pool, self.config.batch_size, self.config.seed, epoch);
        Ok(dataset::make_batch(
            &self.manifest,
            &order[position],
            epoch,
            &self.sampler(),
            &self.loader,
        )?)
    }

    /// Exactly one optimizer update on `batch` with learning rate `lr`.
    pub fn apply_batch(&mut self, batch: &Batch, lr: f64) -> Result<LossReport, TrainError> {
        let non_finite = |step, reason: String| TrainError::NonFiniteLoss {
            step,
            reason,
            video_ids: batch.video_ids(),
        };
        let (report, grads) =
            match batch_gradients(&self.model, batch, &self.config.loss, &self.cache) {
                Err(TrainError::Loss(e)) => return Err(non_finite(self.step, e.to_string())),
                other => other?,
            };
        if !report.total.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(non_finite(self.step, "gradient".into()));
        }
        self.optimizer
            .apply(self.model.adapter.params_mut(), &grads, lr);
        if !self.model.adapter.params().all_finite() {
            return Err(non_finite(self.step, "parameters after update".into()));
        }
        self.step += 1;
        Ok(report)
    }

    /// Builds the next scheduled batch and applies one update.
    pub fn train_step(&mut self) -> Result<StepRecord, TrainError> {
        let step = self.step;
        let batch = self.batch_for_step(step)?;
        let lr = scheduled_lr(&self.config.optimizer, step, self.total_steps());
        let report = self.apply_batch(&batch, lr)?;
        Ok(StepRecord {
            step: step + 1,
            epoch: step / self.batches_per_epoch,
            lr,
            l_contrastive: report.contrastive,
            l_triplet: report.triplet,
            l_total: report.total,
        })
    }

    /// Mean losses over a fixed set of batches and frame pairs that does not
    /// change during training.
    pub fn evaluate(&self) -> Result<EvalSummary, TrainError> {
        let order = dataset::epoch_batches(&self.pool, self.config.batch_size, self.config.seed, EVAL_EPOCH);
        let count = self.config.eval_batches.clamp(1, order.len());
        let mut sum = [0.0; 3];
        for indices in &order[..count] {
            let batch = dataset::make_batch(&self.manifest, indices, EVAL_EPOCH, &self.sampler(), &self.loader)?;
            let r = batch_loss(&self.model, &batch, &self.config.loss, &self.cache)?;
            sum[0] += r.contrastive;
            sum[1] += r.triplet;
            sum[2] += r.total;
        }
        let n = count as f64;
        Ok(EvalSummary {
            l_contrastive: sum[0] / n,
            l_triplet: sum[1] / n,
            l_total: sum[2] / n,
            batches: count,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let enc = self.model.encoder.params();
        let ad = self.model.adapter.params();
        let mut blobs = named_blobs(enc, ENCODER_PREFIX);
        blobs.extend(named_blobs(ad, ADAPTER_PREFIX));
        blobs.extend(self.optimizer.to_blobs(ad, OPTIM_PREFIX));
        let state = CheckpointState {
            step: self.step,
            profile: self.model.config().profile.clone(),
            encoder_checksum: enc.checksum(),
            adapter_checksum: ad.checksum(),
        };
        Checkpoint::new(
            serde_json::to_string(&self.config).expect("config serializes"),
            serde_json::to_string(&state).expect("state serializes"),
            blobs,
        )
    }
}

fn named_blobs(params: &ParamSet, prefix: &str) -> Vec<Blob> {
    params
        .iter()
        .map(|(n, v)| Blob::from_array(format!("{prefix}{n}"), v))
        .collect()
}

fn assign_group(params: &mut ParamSet, ckpt: &Checkpoint, prefix: &str) -> Result<(), TrainError> {
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let blob = ckpt
            .blob(&format!("{prefix}{name}"))
            .ok_or_else(|| TrainError::Resume(format!("missing blob {prefix}{name}")))?;
        params
            .assign(&name, blob.to_array())
            .map_err(TrainError::Resume)?;
    }
    Ok(())
}

pub fn checkpoint_state(ckpt: &Checkpoint) -> Result<CheckpointState, TrainError> {
    serde_json::from_str(&ckpt.state_json)
        .map_err(|e| TrainError::Resume(format!("checkpoint state: {e}")))
}

pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<TrainConfig, TrainError> {
    serde_json::from_str(&ckpt.config_json)
        .map_err(|e| TrainError::Resume(format!("checkpoint config: {e}")))
}

/// Reconstructs the encoders and adapter stored in a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<RoboticClip, TrainError> {
    let config = checkpoint_config(ckpt)?;
    let mut model = RoboticClip::new(&config.model_config(), 0)?;
    assign_group(model.encoder.params_mut(), ckpt, ENCODER_PREFIX)?;
    assign_group(model.adapter.params_mut(), ckpt, ADAPTER_PREFIX)?;
    Ok(model)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint; metrics are appended.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub initial_eval: Option<EvalSummary>,
    pub final_eval: Option<EvalSummary>,
    pub init_checkpoint: PathBuf,
    pub final_checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub encoder_checksum: String,
    pub adapter_checksum: String,
}

pub fn checkpoint_file_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Full run. Writes under `out_dir`:
/// `checkpoints/step_NNNNNN.ckpt`, `metrics.jsonl`, `final.ckpt`, `summary.json`.
/// With zero scheduled updates only the initial checkpoint is written.
pub fn run_finetune(
    config: &TrainConfig,
    manifest_path: &Path,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<RunSummary, TrainError> {
    let manifest = Manifest::load(manifest_path)?;
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let mut trainer = match &options.resume {
        Some(path) => Trainer::resume(config.clone(), manifest, &Checkpoint::load(path)?)?,
        None => Trainer::new(config.clone(), manifest)?,
    };
    let init_path = ckpt_dir.join(checkpoint_file_name(trainer.step()));
    trainer.checkpoint().save(&init_path)?;
    let checksums = |t: &Trainer| {
        (
            t.model().encoder.params().checksum(),
            t.model().adapter.params().checksum(),
        )
    };
    if trainer.is_done() && options.resume.is_none() {
        let (encoder_checksum, adapter_checksum) = checksums(&trainer);
        return Ok(RunSummary {
            steps: trainer.step(),
            initial_eval: None,
            final_eval: None,
            init_checkpoint: init_path,
            final_checkpoint: None,
            metrics: None,
            encoder_checksum,
            adapter_checksum,
        });
    }

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(options.resume.is_some())
        .truncate(options.resume.is_none())
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    let initial_eval = trainer.evaluate()?;
    log::info!(
        "initial eval: total {:.4} (contrastive {:.4}, triplet {:.4})",
        initial_eval.l_total,
        initial_eval.l_contrastive,
        initial_eval.l_triplet
    );
    while !trainer.is_done() {
        let record = trainer.train_step()?;
        let line = serde_json::to_string(&record.rounded()).expect("record serializes");
        writeln!(metrics, "{line}").map_err(io_err(&metrics_path))?;
        if record.step % 10 == 0 {
            log::info!("step {} loss {:.4}", record.step, record.l_total);
        }
        if config.checkpoint_every > 0 && record.step % config.checkpoint_every == 0 {
            let path = ckpt_dir.join(checkpoint_file_name(record.step));
            trainer.checkpoint().save(&path)?;
        }
    }
    metrics.flush().map_err(io_err(&metrics_path))?;
    let final_eval = trainer.evaluate()?;
    let final_path = out_dir.join("final.ckpt");
    trainer.checkpoint().save(&final_path)?;
    let (encoder_checksum, adapter_checksum) = checksums(&trainer);
    let summary = RunSummary {
        steps: trainer.step(),
        initial_eval: Some(initial_eval),
        final_eval: Some(final_eval),
        init_checkpoint: init_path,
        final_checkpoint: Some(final_path),
        metrics: Some(metrics_path),
        encoder_checksum,
        adapter_checksum,
    };
    let summary_path = out_dir.join("summary.json");
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(io_err(&summary_path))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobCheck {
    pub name: String,
    pub identical: bool,
    /// Encoder blobs pass when identical, adapter blobs when changed.
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeReport {
    pub encoder: Vec<BlobCheck>,
    pub adapter: Vec<BlobCheck>,
    pub encoder_frozen: bool,
    pub adapter_updated: bool,
}

/// Byte-compares encoder and adapter blobs of two checkpoints.
pub fn verify_freeze(before: &Checkpoint, after: &Checkpoint) -> Result<FreezeReport, TrainError> {
    let (a, b) = (checkpoint_state(before)?, checkpoint_state(after)?);
    if a.profile != b.profile {
        return Err(TrainError::ProfileMismatch(format!("{} vs {}", a.profile, b.profile)));
    }
    let compare = |prefix: &str, want_identical: bool| -> Result<Vec<BlobCheck>, TrainError> {
        let left: Vec<_> = before.group(prefix).collect();
        let right: Vec<_> = after.group(prefix).collect();
        if left.len() != right.len() {
            return Err(TrainError::ProfileMismatch(format!(
                "{} vs {} {prefix} blobs",
                left.len(),
                right.len()
            )));
        }
        left.into_iter()
            .map(|(name, blob)| {
                let other = after
                    .blob(&format!("{prefix}{name}"))
                    .ok_or_else(|| TrainError::ProfileMismatch(format!("missing {prefix}{name}")))?;
                if (blob.rows, blob.cols) != (other.rows, other.cols) {
                    return Err(TrainError::ProfileMismatch(format!("shape of {prefix}{name}")));
                }
                let identical = blob.bytes() == other.bytes();
                Ok(BlobCheck {
                    name: format!("{prefix}{name}"),
                    identical,
                    pass: identical == want_identical,
                })
            })
            .collect()
    };
    let encoder = compare(ENCODER_PREFIX, true)?;
    let adapter = compare(ADAPTER_PREFIX, false)?;
    Ok(FreezeReport {
        encoder_frozen: encoder.iter().all(|c| c.pass),
        adapter_updated: adapter.iter().all(|c| c.pass),
        encoder,
        adapter,
    })
}
