//! Procedural action videos: a colored shape slides onto a colored target.
//!
//! Layout on disk matches what [`crate::dataprep::discover_corpus`] expects:
//! `<root>/<dataset>/<video_id>/{prompt.txt, frames/NNNNNN.png}`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::Rng;
use thiserror::Error;

use crate::dataprep::frame_file_name;
use crate::dataprep::palette_color;
use crate::dataset::rng_for;

#[derive(Debug, Error)]
pub enum SynthError {
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
    #[error("invalid synthetic corpus settings: {0}")]
    Config(String),
}

pub const COLORS: &[&str] = &["red", "green", "blue", "yellow", "purple", "cyan", "orange", "pink"];
pub const SHAPES: &[&str] = &["square", "circle", "triangle", "diamond"];
pub const TARGETS: &[&str] = &["bowl", "plate", "tray", "box"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub videos: usize,
    pub frames: usize,
    pub size: u32,
    pub seed: u64,
    pub dataset: String,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos: 64,
            frames: 8,
            size: 32,
            seed: 0,
            dataset: "synthetic".into(),
            id_prefix: "synth".into(),
        }
    }
}

/// Parameters of one generated video.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub video_id: String,
    pub prompt: String,
    pub shape: &'static str,
    pub shape_color: &'static str,
    pub target: &'static str,
    pub target_color: &'static str,
    /// (row, col) of the shape center in the first frame.
    pub start: (f64, f64),
    /// (row, col) of the target center; the shape ends here.
    pub goal: (f64, f64),
    pub background: [u8; 3],
}

/// Minimum RGB distance between a background and any palette color, so
/// color-keyed segmentation never fires on the background.
const BACKGROUND_CLEARANCE: f64 = 80.0;

fn palette_distance(rgb: [u8; 3]) -> f64 {
    crate::dataprep::PALETTE
        .iter()
        .map(|(_, c)| {
            (0..3)
                .map(|k| (rgb[k] as f64 - c[k] as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

fn inside_shape(shape: &str, dy: f64, dx: f64, r: f64) -> bool {
    match shape {
        "square" => dy.abs() <= r && dx.abs() <= r,
        "circle" => dy * dy + dx * dx <= r * r,
        "diamond" => dy.abs() + dx.abs() <= r,
        // apex up, base at dy = r
        _ => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
    }
}

fn inside_target(target: &str, dy: f64, dx: f64, r: f64) -> bool {
    let d2 = dy * dy + dx * dx;
    match target {
        "bowl" => d2 <= r * r && d2 >= (r - 2.0) * (r - 2.0),
        "plate" => d2 <= r * r,
        "tray" => dy.abs() <= r * 0.6 && dx.abs() <= r,
        _ => {
            let (ay, ax) = (dy.abs(), dx.abs());
            ay <= r && ax <= r && (ay >= r - 2.0 || ax >= r - 2.0)
        }
    }
}

/// Renders frame `t` of `video`.
pub fn render_frame(video: &SynthVideo, t: usize, frames: usize, size: u32) -> RgbImage {
    let scale = size as f64 / 32.0;
    let (shape_r, target_r) = (3.0 * scale, 6.0 * scale);
    let alpha = if frames > 1 { t as f64 / (frames - 1) as f64 } else { 0.0 };
    let cy = video.start.0 + alpha * (video.goal.0 - video.start.0);
    let cx = video.start.1 + alpha * (video.goal.1 - video.start.1);
    let shape_rgb = palette_color(video.shape_color).expect("palette color");
    let target_rgb = palette_color(video.target_color).expect("palette color");
    RgbImage::from_fn(size, size, |x, y| {
        let (py, px) = (y as f64, x as f64);
        if inside_shape(video.shape, py - cy, px - cx, shape_r) {
            Rgb(shape_rgb)
        } else if inside_target(video.target, py - video.goal.0, px - video.goal.1, target_r) {
            Rgb(target_rgb)
        } else {
            Rgb(video.background)
        }
    })
}

/// Draws the parameters of video `index` from `rng_for([seed, index])`.
pub fn sample_video(config: &SynthConfig, index: usize) -> SynthVideo {
    let mut rng = rng_for(&[config.seed, index as u64, 0x5e]);
    let shape = *SHAPES.choose(&mut rng).expect("non-empty");
    let target = *TARGETS.choose(&mut rng).expect("non-empty");
    let shape_color = *COLORS.choose(&mut rng).expect("non-empty");
    let target_color = loop {
        let c = *COLORS.choose(&mut rng).expect("non-empty");
        if c != shape_color {
            break c;
        }
    };
    let s = config.size as f64;
    let margin = 7.0 * s / 32.0;
    let point = |rng: &mut rand_chacha::ChaCha8Rng| {
        (
            rng.random_range(margin..s - 1.0 - margin),
            rng.random_range(margin..s - 1.0 - margin),
        )
    };
    let goal = point(&mut rng);
    // Keep the start away from the target. Every goal has a corner of the
    // sampling square at least (s - 2 margin - 1) / sqrt(2) away, so this
    // threshold is always reachable.
    let min_travel = 0.3 * s;
    let start = loop {
        let p = point(&mut rng);
        if ((p.0 - goal.0).powi(2) + (p.1 - goal.1).powi(2)).sqrt() >= min_travel {
            break p;
        }
    };
    // mid-gray 128 clears the palette, so this terminates
    let background = loop {
        let c = [
            rng.random_range(90..=170u8),
            rng.random_range(90..=170u8),
            rng.random_range(90..=170u8),
        ];
        if palette_distance(c) >= BACKGROUND_CLEARANCE {
            break c;
        }
    };
    SynthVideo {
        video_id: format!("{}_{index:04}", config.id_prefix),
        prompt: format!("move {shape_color} {shape} to {target_color} {target}"),
        shape,
        shape_color,
        target,
        target_color,
        start,
        goal,
        background,
    }
}

/// Writes the corpus under `root` and returns the generated videos.
pub fn generate_corpus(root: &Path, config: &SynthConfig) -> Result<Vec<SynthVideo>, SynthError> {
    if config.frames < 2 || config.size < 16 {
        return Err(SynthError::Config(
            "need at least 2 frames and a side of at least 16 pixels".into(),
        ));
    }
    let mut videos = Vec::with_capacity(config.videos);
    for i in 0..config.videos {
        let video = sample_video(config, i);
        let dir = root.join(&config.dataset).join(&video.video_id);
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir).map_err(|source| SynthError::Io {
            path: frames_dir.clone(),
            source,
        })?;
        let prompt_path = dir.join("prompt.txt");
        fs::write(&prompt_path, format!("{}\n", video.prompt)).map_err(|source| {
            SynthError::Io {
                path: prompt_path,
                source,
            }
        })?;
        for t in 0..config.frames {
            let path = frames_dir.join(frame_file_name(t));
            render_frame(&video, t, config.frames, config.size)
                .save(&path)
                .map_err(|source| SynthError::Image { path, source })?;
        }
        videos.push(video);
    }
    Ok(videos)
}
