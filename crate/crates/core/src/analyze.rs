//! Post-training analysis: per-frame text similarity curves with a Kendall
//! trend statistic, paired comparison of two checkpoints, and embedding
//! export for downstream consumers.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::dataprep::{Manifest, ManifestEntry};
use crate::dataset::{DatasetError, FrameLoader};
use crate::frame::{assemble_rgba, Mask, RgbaFrame};
use crate::loss::{correlation_matrix, LossError};
use crate::model::{stack_rows, ModelError, RoboticClip};
use crate::tokenizer::{encode_words, normalize_words, HashTokenizer};
use crate::train::{checkpoint_state, load_model, TrainError};

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("checkpoints come from different model profiles: {0}")]
    ProfileMismatch(String),
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("video has {0} frame(s); a curve needs at least 2")]
    TooFewFrames(usize),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

fn file_err(path: &Path, e: impl std::fmt::Display) -> AnalyzeError {
    AnalyzeError::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Kendall's tau-b between `x` and `y`; `None` when either side is constant.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "paired samples");
    let n = x.len();
    let (mut concordant, mut discordant, mut ties_x, mut ties_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            match (dx == 0.0, dy == 0.0) {
                (true, true) => {}
                (true, false) => ties_x += 1,
                (false, true) => ties_y += 1,
                _ if (dx > 0.0) == (dy > 0.0) => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (concordant + discordant + ties_x) as f64;
    let n1 = (concordant + discordant + ties_y) as f64;
    if n0 == 0.0 || n1 == 0.0 {
        return None;
    }
    Some((concordant - discordant) as f64 / (n0 * n1).sqrt())
}

/// Which frames feed the action embedding when a curve is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptPair {
    #[default]
    FirstLast,
    /// No injection: the plain prompt embedding.
    NoAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub video_id: String,
    pub prompt: String,
    /// `cos(p, f_image(I_t))` for every frame in order.
    pub similarities: Vec<f64>,
    /// 0 when the curve is constant.
    pub kendall_tau: f64,
    pub degenerate: bool,
}

impl SimilarityCurve {
    pub fn first(&self) -> f64 {
        self.similarities[0]
    }

    pub fn last(&self) -> f64 {
        *self.similarities.last().expect("non-empty curve")
    }
}

pub fn similarity_curve(
    model: &RoboticClip,
    video_id: &str,
    prompt: &str,
    tokens: &[u32],
    action_mask: &[u8],
    frames: &[&RgbaFrame],
    pair: PromptPair,
) -> Result<SimilarityCurve, AnalyzeError> {
    if frames.len() < 2 {
        return Err(AnalyzeError::TooFewFrames(frames.len()));
    }
    let p = match pair {
        PromptPair::FirstLast => model.encode_prompt_for_pair(
            tokens,
            action_mask,
            frames[0],
            frames[frames.len() - 1],
        )?,
        PromptPair::NoAction => model.encoder.encode_prompt(tokens)?,
    };
    let v = model.encoder.encode_images(frames)?;
    let f = correlation_matrix(&v, &stack_rows(&[p]))?;
    let similarities: Vec<f64> = f.column(0).to_vec();
    let index: Vec<f64> = (0..similarities.len()).map(|t| t as f64).collect();
    let tau = kendall_tau(&index, &similarities);
    Ok(SimilarityCurve {
        video_id: video_id.to_string(),
        prompt: prompt.to_string(),
        kendall_tau: tau.unwrap_or(0.0),
        degenerate: tau.is_none(),
        similarities,
    })
}

/// Curves for `entries` (manifest order), computed in parallel.
pub fn manifest_curves(
    model: &RoboticClip,
    entries: &[&ManifestEntry],
    loader: &FrameLoader,
    pair: PromptPair,
) -> Result<Vec<SimilarityCurve>, AnalyzeError> {
    entries
        .par_iter()
        .map(|e| {
            let frames = loader.load_video(e)?;
            let refs: Vec<&RgbaFrame> = frames.iter().map(|f| f.as_ref()).collect();
            similarity_curve(
                model,
                &e.video_id,
                &e.prompt,
                &e.tokens,
                &e.action_token_mask,
                &refs,
                pair,
            )
        })
        .collect()
}

/// `video_id,frame_index,similarity`, one row per frame.
pub fn write_curves_csv(path: &Path, curves: &[SimilarityCurve]) -> Result<(), AnalyzeError> {
    let mut out = String::from("video_id,frame_index,similarity\n");
    for c in curves {
        for (t, s) in c.similarities.iter().enumerate() {
            out.push_str(&format!("{},{t},{s:.6}\n", c.video_id));
        }
    }
    fs::write(path, out).map_err(|e| file_err(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveStats {
    pub videos: usize,
    pub mean_tau: f64,
    /// Fraction of videos whose last-frame similarity exceeds the first.
    pub last_above_first: f64,
    pub mean_first: f64,
    pub mean_last: f64,
}

pub fn curve_stats(curves: &[SimilarityCurve]) -> CurveStats {
    let n = curves.len().max(1) as f64;
    CurveStats {
        videos: curves.len(),
        mean_tau: curves.iter().map(|c| c.kendall_tau).sum::<f64>() / n,
        last_above_first: curves.iter().filter(|c| c.last() > c.first()).count() as f64 / n,
        mean_first: curves.iter().map(|c| c.first()).sum::<f64>() / n,
        mean_last: curves.iter().map(|c| c.last()).sum::<f64>() / n,
    }
}

/// Two-sided sign test over non-zero differences.
pub fn sign_test(differences: &[f64]) -> (usize, usize, usize, f64) {
    let pos = differences.iter().filter(|&&d| d > 0.0).count();
    let neg = differences.iter().filter(|&&d| d < 0.0).count();
    let ties = differences.len() - pos - neg;
    let n = (pos + neg) as u64;
    if n == 0 {
        return (pos, neg, ties, 1.0);
    }
    let k = pos.min(neg) as u64;
    let binom = Binomial::new(0.5, n).expect("valid binomial");
    let p = (2.0 * binom.cdf(k)).min(1.0);
    (pos, neg, ties, p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoComparison {
    pub video_id: String,
    pub tau_a: f64,
    pub tau_b: f64,
    pub final_similarity_a: f64,
    pub final_similarity_b: f64,
    pub tau_difference: f64,
    pub final_similarity_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
    pub p_value: f64,
}

impl SignTest {
    fn of(diffs: &[f64]) -> Self {
        let (positive, negative, ties, p_value) = sign_test(diffs);
        Self {
            positive,
            negative,
            ties,
            p_value,
        }
    }
}

/// Paired per-video comparison of checkpoint `a` against `b`; differences
/// are `a − b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub videos: Vec<VideoComparison>,
    pub mean_tau_a: f64,
    pub mean_tau_b: f64,
    pub mean_tau_difference: f64,
    pub mean_final_similarity_difference: f64,
    pub tau_sign_test: SignTest,
    pub final_similarity_sign_test: SignTest,
}

pub fn compare_curves(
    a: &[SimilarityCurve],
    b: &[SimilarityCurve],
) -> Result<AblationReport, AnalyzeError> {
    if a.is_empty() {
        return Err(AnalyzeError::EmptyEvalSet);
    }
    assert_eq!(a.len(), b.len(), "curves are paired by video");
    let videos: Vec<VideoComparison> = a
        .iter()
        .zip(b)
        .map(|(x, y)| VideoComparison {
            video_id: x.video_id.clone(),
            tau_a: x.kendall_tau,
            tau_b: y.kendall_tau,
            final_similarity_a: x.last(),
            final_similarity_b: y.last(),
            tau_difference: x.kendall_tau - y.kendall_tau,
            final_similarity_difference: x.last() - y.last(),
        })
        .collect();
    let n = videos.len() as f64;
    let mean = |f: fn(&VideoComparison) -> f64| videos.iter().map(f).sum::<f64>() / n;
    let tau_diffs: Vec<f64> = videos.iter().map(|v| v.tau_difference).collect();
    let final_diffs: Vec<f64> = videos.iter().map(|v| v.final_similarity_difference).collect();
    Ok(AblationReport {
        mean_tau_a: mean(|v| v.tau_a),
        mean_tau_b: mean(|v| v.tau_b),
        mean_tau_difference: mean(|v| v.tau_difference),
        mean_final_similarity_difference: mean(|v| v.final_similarity_difference),
        tau_sign_test: SignTest::of(&tau_diffs),
        final_similarity_sign_test: SignTest::of(&final_diffs),
        videos,
    })
}

/// Compares a triplet-on checkpoint (`a`) with a triplet-off one (`b`) on
/// the same evaluation videos.
pub fn ablation_compare(
    a: &Checkpoint,
    b: &Checkpoint,
    manifest: &Manifest,
    entries: &[&ManifestEntry],
) -> Result<AblationReport, AnalyzeError> {
    let (sa, sb) = (checkpoint_state(a)?, checkpoint_state(b)?);
    if sa.profile != sb.profile {
        return Err(AnalyzeError::ProfileMismatch(format!(
            "{} vs {}",
            sa.profile, sb.profile
        )));
    }
    if entries.is_empty() {
        return Err(AnalyzeError::EmptyEvalSet);
    }
    let (ma, mb) = (load_model(a)?, load_model(b)?);
    let loader = FrameLoader::new(manifest, ma.config().image_size);
    let ca = manifest_curves(&ma, entries, &loader, PromptPair::FirstLast)?;
    let cb = manifest_curves(&mb, entries, &loader, PromptPair::FirstLast)?;
    compare_curves(&ca, &cb)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Image,
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub name: String,
    pub kind: FeatureKind,
}

/// Sidecar describing the rows of an embedding file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub dim: usize,
    pub rows: Vec<FeatureRow>,
}

pub fn index_path(features: &Path) -> PathBuf {
    let mut s = features.as_os_str().to_owned();
    s.push(".index.json");
    PathBuf::from(s)
}

/// Loads an image as an RGBA frame at `size × size`. A PNG alpha channel
/// becomes the mask (alpha ≥ 128); images without one get a full mask.
pub fn load_image_frame(path: &Path, size: usize) -> Result<RgbaFrame, AnalyzeError> {
    let img = image::open(path).map_err(|e| file_err(path, e))?;
    let rgb = img.to_rgb8();
    let (h, w) = (rgb.height() as usize, rgb.width() as usize);
    let mask = if img.color().has_alpha() {
        let rgba = img.to_rgba8();
        let bits = rgba.pixels().map(|p| u8::from(p.0[3] >= 128)).collect();
        Mask::from_raw(h, w, bits).map_err(|e| file_err(path, e))?
    } else {
        Mask::ones(h, w)
    };
    assemble_rgba(&rgb, &mask, (size, size)).map_err(|e| file_err(path, e))
}

/// Sorted `*.png` files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, AnalyzeError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| file_err(dir, e))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Image rows (frozen image encoder) followed by prompt rows (frozen text
/// encoder, no action injection).
pub fn compute_features(
    model: &RoboticClip,
    images: &[(String, RgbaFrame)],
    prompts: &[String],
) -> Result<(FeatureIndex, Array2<f64>), AnalyzeError> {
    let cfg = model.config();
    let tokenizer = HashTokenizer::new(cfg.vocab_size, cfg.context_length);
    let mut rows = Vec::new();
    let mut vectors = Vec::new();
    for (name, frame) in images {
        vectors.push(model.encoder.encode_image(frame)?);
        rows.push(FeatureRow {
            name: name.clone(),
            kind: FeatureKind::Image,
        });
    }
    for prompt in prompts {
        let (tokens, _) = encode_words(&tokenizer, &normalize_words(prompt));
        vectors.push(model.encoder.encode_prompt(&tokens)?);
        rows.push(FeatureRow {
            name: prompt.clone(),
            kind: FeatureKind::Prompt,
        });
    }
    let matrix = if vectors.is_empty() {
        Array2::zeros((0, cfg.embed_dim))
    } else {
        stack_rows(&vectors)
    };
    Ok((
        FeatureIndex {
            dim: cfg.embed_dim,
            rows,
        },
        matrix,
    ))
}

/// Row-major little-endian f32 matrix plus `<path>.index.json`.
pub fn write_features(
    path: &Path,
    index: &FeatureIndex,
    matrix: &Array2<f64>,
) -> Result<(), AnalyzeError> {
    let bytes: Vec<u8> = matrix
        .iter()
        .flat_map(|&x| (x as f32).to_le_bytes())
        .collect();
    let mut f = fs::File::create(path).map_err(|e| file_err(path, e))?;
    f.write_all(&bytes).map_err(|e| file_err(path, e))?;
    let side = index_path(path);
    let json = serde_json::to_string_pretty(index).expect("index serializes");
    fs::write(&side, json).map_err(|e| file_err(&side, e))
}

pub fn read_features(path: &Path) -> Result<(FeatureIndex, Array2<f32>), AnalyzeError> {
    let side = index_path(path);
    let text = fs::read_to_string(&side).map_err(|e| file_err(&side, e))?;
    let index: FeatureIndex = serde_json::from_str(&text).map_err(|e| file_err(&side, e))?;
    let bytes = fs::read(path).map_err(|e| file_err(path, e))?;
    let expected = index.rows.len() * index.dim * 4;
    if bytes.len() != expected {
        return Err(file_err(
            path,
            format!("{} bytes, expected {expected}", bytes.len()),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let matrix = Array2::from_shape_vec((index.rows.len(), index.dim), data)
        .map_err(|e| file_err(path, e))?;
    Ok((index, matrix))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn kendall_examples() {
        assert_eq!(kendall_tau(&[0.0, 1.0], &[0.1, 0.2]), Some(1.0));
        assert_eq!(kendall_tau(&[0.0, 1.0], &[0.2, 0.1]), Some(-1.0));
        assert_eq!(kendall_tau(&[0.0, 1.0], &[0.2, 0.2]), None);
        assert_eq!(kendall_tau(&[0.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]), Some(1.0));
    }

    #[test]
    fn kendall_matches_pair_count_oracle() {
        // 5 points, no ties: tau = (C - D) / 10.
        let y = [0.3, 0.1, 0.4, 0.5, 0.2];
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let mut c = 0;
        let mut d = 0;
        for i in 0..5 {
            for j in i + 1..5 {
                if y[j] > y[i] { c += 1 } else { d += 1 }
            }
        }
        let expected = (c - d) as f64 / 10.0;
        assert!((kendall_tau(&x, &y).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn sign_test_examples() {
        assert_eq!(sign_test(&[0.0, 0.0]).3, 1.0);
        // 6 of 6 positive: p = 2 / 64
        let (pos, neg, ties, p) = sign_test(&[1.0; 6]);
        assert_eq!((pos, neg, ties), (6, 0, 0));
        assert!((p - 2.0 / 64.0).abs() < 1e-12);
    }

    #[test]
    fn identical_frames_give_degenerate_curve() {
        let model = RoboticClip::new(&ModelConfig::toy(), 1).unwrap();
        let f = RgbaFrame::filled(32, 32, [0.2, 0.4, 0.6, 1.0]);
        let curve = similarity_curve(&model, "v", "move it", &[1, 9, 2], &[0, 1, 0], &[&f, &f, &f], PromptPair::FirstLast).unwrap();
        assert!(curve.degenerate);
        assert_eq!(curve.kendall_tau, 0.0);
        assert_eq!(curve.similarities.len(), 3);
    }

    #[test]
    fn two_frame_curve_tau_is_discrete() {
        let model = RoboticClip::new(&ModelConfig::toy(), 1).unwrap();
        let a = RgbaFrame::filled(32, 32, [0.2, 0.4, 0.6, 1.0]);
        let b = RgbaFrame::filled(32, 32, [0.9, 0.1, 0.3, 0.0]);
        let curve = similarity_curve(&model, "v", "p", &[1, 9, 2], &[0, 1, 0], &[&a, &b], PromptPair::FirstLast).unwrap();
        assert_eq!(curve.similarities.len(), 2);
        assert!([-1.0, 0.0, 1.0].contains(&curve.kendall_tau));
        assert!(curve.similarities.iter().all(|s| (-1.0..=1.0).contains(s)));
    }

    #[test]
    fn comparison_of_identical_curves_is_zero_and_symmetric() {
        let c = |id: &str, s: Vec<f64>, tau: f64| SimilarityCurve {
            video_id: id.into(),
            prompt: String::new(),
            similarities: s,
            kendall_tau: tau,
            degenerate: false,
        };
        let a = vec![c("x", vec![0.1, 0.3], 1.0), c("y", vec![0.5, 0.2], -1.0)];
        let b = vec![c("x", vec![0.2, 0.1], -1.0), c("y", vec![0.1, 0.4], 1.0)];
        let same = compare_curves(&a, &a).unwrap();
        assert!(same.videos.iter().all(|v| v.tau_difference == 0.0 && v.final_similarity_difference == 0.0));
        let ab = compare_curves(&a, &b).unwrap();
        let ba = compare_curves(&b, &a).unwrap();
        assert_eq!(ab.mean_tau_difference, -ba.mean_tau_difference);
        for (x, y) in ab.videos.iter().zip(&ba.videos) {
            assert_eq!(x.tau_difference, -y.tau_difference);
            assert_eq!(x.final_similarity_difference, -y.final_similarity_difference);
        }
        assert!(matches!(compare_curves(&[], &[]), Err(AnalyzeError::EmptyEvalSet)));
    }
}
