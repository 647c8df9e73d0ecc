//! Corpus preparation: prompt queries, per-frame object masks and the JSONL
//! manifest consumed by training.
//!
//! Layout read: `<root>/<dataset>/<video_id>/frames/%06d.png` plus
//! `<root>/<dataset>/<video_id>/prompt.txt`. Masks are written next to the
//! manifest under `<dataset>/<video_id>/masks/%06d.png` as {0, 255} grayscale.

mod query;
mod segment;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::frame::{Mask, ShapeMismatch};
use crate::tokenizer::{HashTokenizer, Tokenizer};

pub use query::{extract_queries, ExternalTagger, PosTag, PosTagger, PromptAnnotation, RuleTagger};
pub use segment::{
    generate_alpha_mask, palette_color, CenteredBoxSegmenter, ExternalSegmenter,
    FullImageSegmenter, MaskOutcome, Segmenter, PALETTE,
};

pub const FLAG_DEGRADED: &str = "degraded";
pub const FLAG_EMPTY_MASK: &str = "empty_mask";
pub const FLAG_TOO_FEW_FRAMES: &str = "too_few_frames";

#[derive(Debug, Error)]
pub enum DataprepError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("tagger failed: {0}")]
    TaggerFailure(String),
    #[error("segmenter failed: {0}")]
    SegmenterFailure(String),
    #[error(transparent)]
    ShapeMismatch(#[from] ShapeMismatch),
    #[error("no record could be prepared ({skipped} skipped)")]
    NoRecords { skipped: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("{path}:{line}: {source}")]
    Manifest {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataprepError + '_ {
    move |source| DataprepError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One video as found on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawVideoRecord {
    pub video_id: String,
    pub source_dataset: String,
    pub prompt: String,
    /// Temporal order.
    pub frame_paths: Vec<PathBuf>,
    pub num_frames: usize,
}

/// Enumerates `<root>/<dataset>/<video_id>/` directories in sorted order.
/// Videos without a readable prompt are reported as skipped.
pub fn discover_corpus(root: &Path) -> Result<(Vec<RawVideoRecord>, Vec<Skip>), DataprepError> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for dataset_dir in sorted_dirs(root)? {
        let dataset = file_name(&dataset_dir);
        for video_dir in sorted_dirs(&dataset_dir)? {
            let video_id = file_name(&video_dir);
            let prompt_path = video_dir.join("prompt.txt");
            let prompt = match fs::read_to_string(&prompt_path) {
                Ok(p) => p.trim().to_string(),
                Err(e) => {
                    skipped.push(Skip::new(&dataset, &video_id, format!("prompt.txt: {e}")));
                    continue;
                }
            };
            let frames_dir = video_dir.join("frames");
            let mut frame_paths: Vec<PathBuf> = match fs::read_dir(&frames_dir) {
                Ok(rd) => rd
                    .filter_map(Result::ok)
                    .map(|e| e.path())
                    .filter(|p| p.extension().is_some_and(|x| x == "png"))
                    .collect(),
                Err(e) => {
                    skipped.push(Skip::new(&dataset, &video_id, format!("frames: {e}")));
                    continue;
                }
            };
            frame_paths.sort();
            records.push(RawVideoRecord {
                num_frames: frame_paths.len(),
                video_id,
                source_dataset: dataset.clone(),
                prompt,
                frame_paths,
            });
        }
    }
    Ok((records, skipped))
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>, DataprepError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// A record that did not make it into the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub source_dataset: String,
    pub video_id: String,
    pub reason: String,
}

impl Skip {
    fn new(dataset: &str, video_id: &str, reason: String) -> Self {
        Self {
            source_dataset: dataset.to_string(),
            video_id: video_id.to_string(),
            reason,
        }
    }
}

/// Preprocessing decisions that go into the manifest fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub context_length: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 1024,
            context_length: 16,
        }
    }
}

impl PrepConfig {
    pub fn tokenizer(&self) -> HashTokenizer {
        HashTokenizer::new(self.vocab_size, self.context_length)
    }
}

/// Hash of the preprocessing configuration and tool identities.
pub fn fingerprint(config: &PrepConfig, tagger: &dyn PosTagger, segmenter: &dyn Segmenter) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(b"\0tagger=");
    h.update(tagger.name().as_bytes());
    h.update(b"\0segmenter=");
    h.update(segmenter.name().as_bytes());
    h.update(b"\0version=");
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub source_dataset: String,
    pub prompt: String,
    pub objects: Vec<String>,
    pub actions: Vec<String>,
    pub tokens: Vec<u32>,
    pub action_token_mask: Vec<u8>,
    /// Absolute frame directory.
    pub frame_dir: String,
    /// Frame file names in temporal order.
    pub frame_files: Vec<String>,
    /// Relative to the manifest's directory.
    pub mask_dir: String,
    pub num_frames: usize,
    pub flags: Vec<String>,
    pub fingerprint: String,
}

impl ManifestEntry {
    /// Default training split excludes flagged entries.
    pub fn is_eligible(&self) -> bool {
        self.flags.is_empty() && self.num_frames >= 2
    }

    pub fn annotation(&self) -> PromptAnnotation {
        PromptAnnotation {
            prompt: self.prompt.clone(),
            tokens: self.tokens.clone(),
            objects: self.objects.clone(),
            actions: self.actions.clone(),
            action_token_mask: self.action_token_mask.clone(),
        }
    }

    pub fn frame_path(&self, t: usize) -> PathBuf {
        Path::new(&self.frame_dir).join(&self.frame_files[t])
    }

    pub fn mask_path(&self, base_dir: &Path, t: usize) -> PathBuf {
        base_dir.join(&self.mask_dir).join(frame_file_name(t))
    }
}

pub fn frame_file_name(t: usize) -> String {
    format!("{t:06}.png")
}

/// Loaded manifest; mask paths resolve against `base_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, DataprepError> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line).map_err(|source| DataprepError::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })?;
            entries.push(entry);
        }
        Ok(Self {
            entries,
            base_dir: parent_dir(path),
        })
    }

    pub fn eligible(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.is_eligible())
    }

    pub fn find(&self, video_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.video_id == video_id)
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DataprepError> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e).expect("entry serializes");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceStats {
    pub videos: usize,
    pub action_categories: usize,
}

/// Per-source video and distinct-action counts, plus the total row.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sources: BTreeMap<String, SourceStats>,
    pub total: SourceStats,
    pub skipped: usize,
}

impl CorpusStats {
    pub fn from_entries(entries: &[ManifestEntry], skipped: usize) -> Self {
        let mut per: BTreeMap<String, (usize, BTreeSet<&str>)> = BTreeMap::new();
        let mut all_actions = BTreeSet::new();
        for e in entries {
            let slot = per.entry(e.source_dataset.clone()).or_default();
            slot.0 += 1;
            for a in &e.actions {
                slot.1.insert(a);
                all_actions.insert(a.as_str());
            }
        }
        let sources = per
            .into_iter()
            .map(|(k, (videos, acts))| {
                (
                    k,
                    SourceStats {
                        videos,
                        action_categories: acts.len(),
                    },
                )
            })
            .collect();
        Self {
            sources,
            total: SourceStats {
                videos: entries.len(),
                action_categories: all_actions.len(),
            },
            skipped,
        }
    }
}

/// Outcome of [`build_manifest`].
#[derive(Debug, Clone)]
pub struct PrepReport {
    pub entries: Vec<ManifestEntry>,
    pub stats: CorpusStats,
    pub skipped: Vec<Skip>,
}

/// Runs query extraction and masking over a whole corpus and writes the
/// manifest plus mask images. Per-video work runs in parallel; output is
/// sorted by `video_id` and independent of scheduling.
pub fn build_manifest(
    corpus_root: &Path,
    manifest_path: &Path,
    tagger: &dyn PosTagger,
    segmenter: &dyn Segmenter,
    config: &PrepConfig,
) -> Result<PrepReport, DataprepError> {
    let (records, mut skipped) = discover_corpus(corpus_root)?;
    let out_dir = parent_dir(manifest_path);
    let tokenizer = config.tokenizer();
    let fp = fingerprint(config, tagger, segmenter);

    let results: Vec<Result<ManifestEntry, Skip>> = records
        .par_iter()
        .map(|rec| {
            prepare_video(rec, &out_dir, tagger, segmenter, &tokenizer, &fp).map_err(|e| {
                log::warn!("skipping {}/{}: {e}", rec.source_dataset, rec.video_id);
                Skip::new(&rec.source_dataset, &rec.video_id, e.to_string())
            })
        })
        .collect();

    let mut entries = Vec::new();
    for r in results {
        match r {
            Ok(e) => entries.push(e),
            Err(s) => skipped.push(s),
        }
    }
    if entries.is_empty() {
        return Err(DataprepError::NoRecords {
            skipped: skipped.len(),
        });
    }
    entries.sort_by(|a, b| {
        (&a.video_id, &a.source_dataset).cmp(&(&b.video_id, &b.source_dataset))
    });
    write_manifest(manifest_path, &entries)?;
    let stats = CorpusStats::from_entries(&entries, skipped.len());
    Ok(PrepReport {
        entries,
        stats,
        skipped,
    })
}

fn load_rgb(path: &Path) -> Result<RgbImage, DataprepError> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|source| DataprepError::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn prepare_video(
    rec: &RawVideoRecord,
    out_dir: &Path,
    tagger: &dyn PosTagger,
    segmenter: &dyn Segmenter,
    tokenizer: &dyn Tokenizer,
    fingerprint: &str,
) -> Result<ManifestEntry, DataprepError> {
    let annotation = extract_queries(&rec.prompt, tagger, tokenizer)?;
    let mask_rel = format!("{}/{}/masks", rec.source_dataset, rec.video_id);
    let mask_dir = out_dir.join(&mask_rel);
    fs::create_dir_all(&mask_dir).map_err(io_err(&mask_dir))?;

    let mut flags = BTreeSet::new();
    if rec.num_frames < 2 {
        flags.insert(FLAG_TOO_FEW_FRAMES);
    }
    let mut previous: Option<Mask> = None;
    for (t, path) in rec.frame_paths.iter().enumerate() {
        let frame = load_rgb(path)?;
        let mask = match generate_alpha_mask(&frame, &annotation.objects, segmenter) {
            Ok(outcome) => {
                if outcome.empty {
                    flags.insert(FLAG_EMPTY_MASK);
                }
                outcome.mask
            }
            Err(e) => {
                log::warn!("{}: frame {t}: segmenter failed: {e}", rec.video_id);
                flags.insert(FLAG_DEGRADED);
                let dims = (frame.height() as usize, frame.width() as usize);
                match &previous {
                    Some(m) if m.dims() == dims => m.clone(),
                    _ => Mask::zeros(dims.0, dims.1),
                }
            }
        };
        let mask_path = mask_dir.join(frame_file_name(t));
        mask.to_luma()
            .save(&mask_path)
            .map_err(|source| DataprepError::Image {
                path: mask_path.clone(),
                source,
            })?;
        previous = Some(mask);
    }

    Ok(ManifestEntry {
        video_id: rec.video_id.clone(),
        source_dataset: rec.source_dataset.clone(),
        prompt: annotation.prompt,
        objects: annotation.objects,
        actions: annotation.actions,
        tokens: annotation.tokens,
        action_token_mask: annotation.action_token_mask,
        frame_dir: rec
            .frame_paths
            .first()
            .and_then(|p| p.parent())
            .map(|p| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()))
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_default(),
        frame_files: rec.frame_paths.iter().map(|p| file_name(p)).collect(),
        mask_dir: mask_rel,
        num_frames: rec.num_frames,
        flags: flags.into_iter().map(str::to_string).collect(),
        fingerprint: fingerprint.to_string(),
    })
}
