//! Object segmentation interface and the deterministic stubs.

use image::RgbImage;

use crate::frame::Mask;

/// Produces a binary mask for one named object in one frame.
pub trait Segmenter: Send + Sync {
    fn name(&self) -> &str;

    /// `Ok(None)` means the object was not found in this frame.
    fn segment(&self, frame: &RgbImage, object: &str) -> Result<Option<Mask>, String>;
}

/// Marks the whole frame for every object.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullImageSegmenter;

impl Segmenter for FullImageSegmenter {
    fn name(&self) -> &str {
        "stub-full-v1"
    }

    fn segment(&self, frame: &RgbImage, _object: &str) -> Result<Option<Mask>, String> {
        Ok(Some(Mask::ones(
            frame.height() as usize,
            frame.width() as usize,
        )))
    }
}

/// Named colors understood by [`CenteredBoxSegmenter`].
pub const PALETTE: &[(&str, [u8; 3])] = &[
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [40, 80, 220]),
    ("yellow", [230, 210, 40]),
    ("orange", [240, 140, 30]),
    ("purple", [140, 60, 200]),
    ("pink", [240, 120, 180]),
    ("cyan", [40, 210, 220]),
    ("white", [245, 245, 245]),
    ("black", [10, 10, 10]),
];

pub fn palette_color(name: &str) -> Option<[u8; 3]> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// Square box of fixed size per object.
///
/// If the object phrase names a palette color, the box is centered on the
/// centroid of pixels close to that color (and the object is "not found"
/// when there are none). Otherwise the box sits at the image center.
#[derive(Debug, Clone, Copy)]
pub struct CenteredBoxSegmenter {
    /// Box half-extent as a fraction of the shorter image side.
    pub half_extent: f64,
    /// Maximum Euclidean RGB distance for a pixel to match a color.
    pub color_tolerance: f64,
}

impl Default for CenteredBoxSegmenter {
    fn default() -> Self {
        Self {
            half_extent: 0.125,
            color_tolerance: 60.0,
        }
    }
}

impl CenteredBoxSegmenter {
    fn centroid(&self, frame: &RgbImage, rgb: [u8; 3]) -> Option<(f64, f64)> {
        let tol2 = self.color_tolerance * self.color_tolerance;
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
        for (x, y, p) in frame.enumerate_pixels() {
            let d2: f64 = (0..3)
                .map(|c| {
                    let d = p.0[c] as f64 - rgb[c] as f64;
                    d * d
                })
                .sum();
            if d2 <= tol2 {
                sy += y as f64;
                sx += x as f64;
                n += 1;
            }
        }
        (n > 0).then(|| (sy / n as f64, sx / n as f64))
    }
}

impl Segmenter for CenteredBoxSegmenter {
    fn name(&self) -> &str {
        "stub-box-v1"
    }

    fn segment(&self, frame: &RgbImage, object: &str) -> Result<Option<Mask>, String> {
        let (h, w) = (frame.height() as usize, frame.width() as usize);
        let color = object.split_whitespace().find_map(palette_color);
        let center = match color {
            Some(rgb) => match self.centroid(frame, rgb) {
                Some(c) => c,
                None => return Ok(None),
            },
            None => ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0),
        };
        let half = (self.half_extent * h.min(w) as f64).round().max(1.0) as i64;
        let (cy, cx) = (center.0.round() as i64, center.1.round() as i64);
        Ok(Some(Mask::rect(h, w, cy - half, cx - half, cy + half, cx + half)))
    }
}

/// Delegates to an external program: `<program> <frame.png> <object>` must
/// write a PNG mask (nonzero = object) to stdout, or nothing if not found.
#[derive(Debug, Clone)]
pub struct ExternalSegmenter {
    pub program: String,
}

impl Segmenter for ExternalSegmenter {
    fn name(&self) -> &str {
        &self.program
    }

    fn segment(&self, frame: &RgbImage, object: &str) -> Result<Option<Mask>, String> {
        let dir = std::env::temp_dir().join(format!("robotic-clip-seg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let path = dir.join("frame.png");
        frame.save(&path).map_err(|e| e.to_string())?;
        let out = std::process::Command::new(&self.program)
            .arg(&path)
            .arg(object)
            .output()
            .map_err(|e| format!("{}: {e}", self.program))?;
        if !out.status.success() {
            return Err(format!("{} exited with {}", self.program, out.status));
        }
        if out.stdout.is_empty() {
            return Ok(None);
        }
        let img = image::load_from_memory(&out.stdout).map_err(|e| e.to_string())?;
        Ok(Some(Mask::from_luma(&img.to_luma8())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskOutcome {
    pub mask: Mask,
    /// No object produced any pixel.
    pub empty: bool,
}

/// Union of the per-object masks for one frame.
pub fn generate_alpha_mask(
    frame: &RgbImage,
    objects: &[String],
    segmenter: &dyn Segmenter,
) -> Result<MaskOutcome, String> {
    let (h, w) = (frame.height() as usize, frame.width() as usize);
    let mut mask = Mask::zeros(h, w);
    for object in objects {
        if let Some(m) = segmenter.segment(frame, object)? {
            let m = if m.dims() == (h, w) {
                m
            } else {
                m.resize_nearest(h, w)
            };
            mask = mask.union(&m).map_err(|e| e.to_string())?;
        }
    }
    let empty = mask.is_empty();
    Ok(MaskOutcome { mask, empty })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 32×32 dark frame with a red 4×4 block at (4,4) and a blue one at (20,22).
    fn two_object_fixture() -> RgbImage {
        RgbImage::from_fn(32, 32, |x, y| {
            if (4..8).contains(&y) && (4..8).contains(&x) {
                image::Rgb(palette_color("red").unwrap())
            } else if (20..24).contains(&y) && (22..26).contains(&x) {
                image::Rgb(palette_color("blue").unwrap())
            } else {
                image::Rgb([60, 60, 60])
            }
        })
    }

    #[test]
    fn full_stub_marks_everything() {
        let f = two_object_fixture();
        let out = generate_alpha_mask(&f, &["anything".into()], &FullImageSegmenter).unwrap();
        assert_eq!(out.mask.count(), 32 * 32);
        assert!(!out.empty);
    }

    #[test]
    fn no_objects_gives_empty_mask() {
        let f = two_object_fixture();
        let out = generate_alpha_mask(&f, &[], &FullImageSegmenter).unwrap();
        assert!(out.empty);
        assert_eq!(out.mask.count(), 0);
    }

    #[test]
    fn union_of_two_boxes_matches_pixel_loop() {
        let f = two_object_fixture();
        let seg = CenteredBoxSegmenter::default();
        let objects = vec!["red block".to_string(), "blue cube".to_string()];
        let out = generate_alpha_mask(&f, &objects, &seg).unwrap();
        let a = seg.segment(&f, &objects[0]).unwrap().unwrap();
        let b = seg.segment(&f, &objects[1]).unwrap().unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let expected = a.get(y, x).max(b.get(y, x));
                assert_eq!(out.mask.get(y, x), expected, "pixel ({y},{x})");
            }
        }
        assert_eq!(out.mask.count(), a.count() + b.count());
        // red centroid is (5.5, 5.5) -> rounds to (6, 6); half extent 4
        assert!(a.get(2, 2) && a.get(9, 9) && !a.get(10, 10) && !a.get(1, 1));
    }

    #[test]
    fn missing_color_is_not_found() {
        let f = two_object_fixture();
        let seg = CenteredBoxSegmenter::default();
        assert!(seg.segment(&f, "green bowl").unwrap().is_none());
    }

    #[test]
    fn colorless_object_gets_center_box() {
        let f = two_object_fixture();
        let m = CenteredBoxSegmenter::default()
            .segment(&f, "towel")
            .unwrap()
            .unwrap();
        assert!(m.get(16, 16));
        assert!(!m.get(0, 0));
    }
}
