//! Frame-pair sampling and batch assembly over a prepared manifest.
//!
//! Every random choice is drawn from a generator derived from
//! `(seed, epoch, index)`, so batch contents never depend on call order or on
//! how many loader threads run.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataprep::{Manifest, ManifestEntry};
use crate::frame::{assemble_rgba, Mask, RgbaFrame, ShapeMismatch};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("video has {frames} frame(s); need at least {needed}")]
    TooFewFrames { frames: usize, needed: usize },
    #[error("video {0} appears more than once in the batch")]
    DuplicateVideoInBatch(String),
    #[error("manifest entry {0} is flagged or has too few frames")]
    IneligibleEntry(String),
    #[error("index {index} out of range for manifest of {len} entries")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error(transparent)]
    Shape(#[from] ShapeMismatch),
    #[error("invalid split ratios ({0}, {1}); they must be non-negative and sum to 1")]
    Ratios(f64, f64),
}

/// Mixes seed components into one generator seed (splitmix64 finalizer).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

/// Draws `(t1, t2)` uniformly from all pairs with `t2 - t1 >= max(min_gap, 1)`.
pub fn sample_frame_pair<R: Rng + ?Sized>(
    num_frames: usize,
    min_gap: usize,
    rng: &mut R,
) -> Result<(usize, usize), DatasetError> {
    let gap = min_gap.max(1);
    if num_frames < gap + 1 {
        return Err(DatasetError::TooFewFrames {
            frames: num_frames,
            needed: gap + 1,
        });
    }
    // For a fixed t1 there are (n - gap - t1) admissible t2.
    let total: usize = (0..num_frames - gap).map(|t1| num_frames - gap - t1).sum();
    let mut k = rng.random_range(0..total);
    for t1 in 0..num_frames - gap {
        let count = num_frames - gap - t1;
        if k < count {
            return Ok((t1, t1 + gap + k));
        }
        k -= count;
    }
    unreachable!("index within total")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePairSample {
    pub video_id: String,
    pub t1: usize,
    pub t2: usize,
    pub first: Arc<RgbaFrame>,
    pub second: Arc<RgbaFrame>,
    pub tokens: Vec<u32>,
    pub action_mask: Vec<u8>,
}

/// `B` samples from distinct videos.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub samples: Vec<FramePairSample>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn video_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.video_id.clone()).collect()
    }
}

/// Loads RGBA frames (color plus union mask as alpha) at the model resolution
/// and caches them.
#[derive(Debug)]
pub struct FrameLoader {
    base_dir: PathBuf,
    size: usize,
    cache: Mutex<HashMap<(String, usize), Arc<RgbaFrame>>>,
}

impl FrameLoader {
    pub fn new(manifest: &Manifest, size: usize) -> Self {
        Self {
            base_dir: manifest.base_dir.clone(),
            size,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn load(&self, entry: &ManifestEntry, t: usize) -> Result<Arc<RgbaFrame>, DatasetError> {
        let key = (entry.video_id.clone(), t);
        if let Some(f) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(f));
        }
        let frame_path = entry.frame_path(t);
        let rgb = image::open(&frame_path)
            .map_err(|source| DatasetError::Image {
                path: frame_path,
                source,
            })?
            .to_rgb8();
        let mask_path = entry.mask_path(&self.base_dir, t);
        let mask = image::open(&mask_path)
            .map_err(|source| DatasetError::Image {
                path: mask_path,
                source,
            })?
            .to_luma8();
        let frame = Arc::new(assemble_rgba(
            &rgb,
            &Mask::from_luma(&mask),
            (self.size, self.size),
        )?);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, Arc::clone(&frame));
        Ok(frame)
    }

    /// All frames of one video in temporal order.
    pub fn load_video(&self, entry: &ManifestEntry) -> Result<Vec<Arc<RgbaFrame>>, DatasetError> {
        (0..entry.num_frames).map(|t| self.load(entry, t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub seed: u64,
    pub min_gap: usize,
}

/// Assembles one batch. Sample `k` draws its frame pair from
/// `rng_for([seed, epoch, indices[k]])`.
pub fn make_batch(
    manifest: &Manifest,
    indices: &[usize],
    epoch: u64,
    config: &SamplerConfig,
    loader: &FrameLoader,
) -> Result<Batch, DatasetError> {
    let mut seen = BTreeSet::new();
    for &i in indices {
        let entry = manifest
            .entries
            .get(i)
            .ok_or(DatasetError::IndexOutOfRange {
                index: i,
                len: manifest.entries.len(),
            })?;
        if !entry.is_eligible() {
            return Err(DatasetError::IneligibleEntry(entry.video_id.clone()));
        }
        if !seen.insert(entry.video_id.as_str()) {
            return Err(DatasetError::DuplicateVideoInBatch(entry.video_id.clone()));
        }
    }
    let samples = indices
        .par_iter()
        .map(|&i| {
            let entry = &manifest.entries[i];
            let mut rng = rng_for(&[config.seed, epoch, i as u64]);
            let (t1, t2) = sample_frame_pair(entry.num_frames, config.min_gap, &mut rng)?;
            assert!(t1 < t2, "sampler emitted t1 >= t2");
            Ok(FramePairSample {
                video_id: entry.video_id.clone(),
                t1,
                t2,
                first: loader.load(entry, t1)?,
                second: loader.load(entry, t2)?,
                tokens: entry.tokens.clone(),
                action_mask: entry.action_token_mask.clone(),
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    Ok(Batch { samples })
}

/// Shuffled eligible indices for one epoch, chunked into full batches.
pub fn epoch_batches(pool: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order = pool.to_vec();
    order.shuffle(&mut rng_for(&[seed, epoch, u64::MAX]));
    order
        .chunks_exact(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Position of `video_id` in `[0, 1)` under a salted hash.
pub fn split_key(video_id: &str, salt: &str) -> f64 {
    let digest = Sha256::new()
        .chain_update(salt.as_bytes())
        .chain_update([0u8])
        .chain_update(video_id.as_bytes())
        .finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(word) >> 11) as f64 / (1u64 << 53) as f64
}

/// Assigns each id to train or val by salted hash; the assignment of an id
/// does not depend on which other ids are present.
pub fn split<'a>(
    ids: impl IntoIterator<Item = &'a str>,
    ratios: (f64, f64),
    salt: &str,
) -> Result<(Vec<String>, Vec<String>), DatasetError> {
    let (train_ratio, val_ratio) = ratios;
    if train_ratio < 0.0 || val_ratio < 0.0 || ((train_ratio + val_ratio) - 1.0).abs() > 1e-9 {
        return Err(DatasetError::Ratios(train_ratio, val_ratio));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for id in ids {
        if split_key(id, salt) < train_ratio {
            train.push(id.to_string());
        } else {
            val.push(id.to_string());
        }
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_frames_always_give_the_only_pair() {
        let mut rng = rng_for(&[1]);
        for _ in 0..50 {
            assert_eq!(sample_frame_pair(2, 0, &mut rng).unwrap(), (0, 1));
        }
    }

    #[test]
    fn single_frame_is_rejected() {
        let err = sample_frame_pair(1, 0, &mut rng_for(&[1])).unwrap_err();
        assert!(matches!(err, DatasetError::TooFewFrames { frames: 1, .. }));
    }

    #[test]
    fn min_gap_is_respected() {
        let mut rng = rng_for(&[2]);
        for _ in 0..500 {
            let (a, b) = sample_frame_pair(10, 4, &mut rng).unwrap();
            assert!(b - a >= 4 && b < 10);
        }
        assert!(sample_frame_pair(4, 4, &mut rng).is_err());
    }

    #[test]
    fn derived_generators_are_order_independent() {
        let a: u64 = rng_for(&[7, 1, 3]).random();
        let _ = rng_for(&[7, 1, 2]).random::<u64>();
        let b: u64 = rng_for(&[7, 1, 3]).random();
        assert_eq!(a, b);
        assert_ne!(mix_seed(&[7, 1, 3]), mix_seed(&[7, 3, 1]));
    }

    #[test]
    fn epoch_batches_cover_distinct_indices() {
        let pool: Vec<usize> = (0..10).collect();
        let batches = epoch_batches(&pool, 3, 5, 0);
        assert_eq!(batches.len(), 3);
        let flat: BTreeSet<usize> = batches.iter().flatten().copied().collect();
        assert_eq!(flat.len(), 9);
        assert_eq!(batches, epoch_batches(&pool, 3, 5, 0));
        assert_ne!(batches, epoch_batches(&pool, 3, 5, 1));
    }

    #[test]
    fn split_examples() {
        let ids: Vec<String> = (0..1000).map(|i| format!("video_{i}")).collect();
        let (train, val) = split(ids.iter().map(String::as_str), (1.0, 0.0), "s").unwrap();
        assert_eq!((train.len(), val.len()), (1000, 0));
        let a = split(ids.iter().map(String::as_str), (0.9, 0.1), "s").unwrap();
        let b = split(ids.iter().map(String::as_str), (0.9, 0.1), "s").unwrap();
        assert_eq!(a, b);
        let frac = a.1.len() as f64 / 1000.0;
        assert!((frac - 0.10).abs() <= 0.02, "val fraction {frac}");
        // stable under reordering and growth
        let mut rev: Vec<&str> = ids.iter().map(String::as_str).rev().collect();
        rev.push("video_extra");
        let (_, val_rev) = split(rev, (0.9, 0.1), "s").unwrap();
        for v in &a.1 {
            assert!(val_rev.contains(v));
        }
    }

    #[test]
    fn bad_ratios_are_rejected() {
        assert!(split(["a"], (0.5, 0.6), "s").is_err());
    }

    #[test]
    fn pairs_are_uniform_by_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let n = 10;
        let mut rng = rng_for(&[42]);
        let mut counts = HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            let pair = sample_frame_pair(n, 0, &mut rng).unwrap();
            *counts.entry(pair).or_insert(0usize) += 1;
        }
        // Expected distribution by brute-force enumeration of admissible pairs.
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .collect();
        assert_eq!(pairs.len(), 45);
        let expected = draws as f64 / pairs.len() as f64;
        let stat: f64 = pairs
            .iter()
            .map(|p| {
                let o = *counts.get(p).unwrap_or(&0) as f64;
                (o - expected).powi(2) / expected
            })
            .sum();
        let p_value = 1.0 - ChiSquared::new(44.0).unwrap().cdf(stat);
        assert!(p_value > 0.01, "chi2 {stat}, p {p_value}");
        assert_eq!(counts.len(), 45);
    }
}
