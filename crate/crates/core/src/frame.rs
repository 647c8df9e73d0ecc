//! Binary object masks and 4-channel frames.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("shape mismatch: expected {expected:?}, got {actual:?}")]
pub struct ShapeMismatch {
    pub expected: (usize, usize),
    pub actual: (usize, usize),
}

/// Single-channel binary mask, row-major, values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    /// Builds a mask from arbitrary bytes; any nonzero value is set.
    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ShapeMismatch> {
        if data.len() != height * width {
            return Err(ShapeMismatch {
                expected: (height, width),
                actual: (data.len() / width.max(1), width),
            });
        }
        let data = data.into_iter().map(|v| u8::from(v != 0)).collect();
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Inclusive-exclusive rectangle `[y0, y1) × [x0, x1)`, clipped to the mask.
    pub fn rect(height: usize, width: usize, y0: i64, x0: i64, y1: i64, x1: i64) -> Self {
        let mut m = Self::zeros(height, width);
        let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
        for y in clamp(y0, height)..clamp(y1, height) {
            for x in clamp(x0, width)..clamp(x1, width) {
                m.data[y * width + x] = 1;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Pixelwise union.
    pub fn union(&self, other: &Mask) -> Result<Mask, ShapeMismatch> {
        if self.dims() != other.dims() {
            return Err(ShapeMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a | b)
            .collect();
        Ok(Mask {
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Nearest-neighbour resample; keeps the mask binary.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        let mut out = Mask::zeros(height, width);
        for y in 0..height {
            let sy = nearest_source(y, height, self.height);
            for x in 0..width {
                let sx = nearest_source(x, width, self.width);
                out.data[y * width + x] = self.data[sy * self.width + sx];
            }
        }
        out
    }

    /// Encodes as an 8-bit grayscale image with values {0, 255}.
    pub fn to_luma(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Decodes a grayscale mask; pixels ≥ 128 are set.
    pub fn from_luma(img: &image::GrayImage) -> Mask {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.pixels().map(|p| u8::from(p.0[0] >= 128)).collect();
        Mask {
            height: h,
            width: w,
            data,
        }
    }
}

fn nearest_source(out_idx: usize, out_len: usize, in_len: usize) -> usize {
    let pos = (out_idx as f64 + 0.5) * in_len as f64 / out_len as f64;
    (pos.floor() as usize).min(in_len - 1)
}

/// H×W×4 frame, channels (R, G, B, alpha), color scaled to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbaFrame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbaFrame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ShapeMismatch> {
        if data.len() != height * width * 4 {
            return Err(ShapeMismatch {
                expected: (height, width),
                actual: (data.len() / (4 * width.max(1)), width),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgba: [f32; 4]) -> Self {
        let data = (0..height * width).flat_map(|_| rgba).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 4] {
        let o = (y * self.width + x) * 4;
        [
            self.data[o],
            self.data[o + 1],
            self.data[o + 2],
            self.data[o + 3],
        ]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, value: [f32; 4]) {
        let o = (y * self.width + x) * 4;
        self.data[o..o + 4].copy_from_slice(&value);
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn alpha_sum(&self) -> f64 {
        self.data.chunks_exact(4).map(|p| p[3] as f64).sum()
    }

    /// Replaces the alpha channel.
    pub fn with_alpha(mut self, mask: &Mask) -> Result<Self, ShapeMismatch> {
        if mask.dims() != self.dims() {
            return Err(ShapeMismatch {
                expected: self.dims(),
                actual: mask.dims(),
            });
        }
        for (px, &a) in self.data.chunks_exact_mut(4).zip(mask.as_slice()) {
            px[3] = a as f32;
        }
        Ok(self)
    }
}

/// Combines a color frame with its object mask and resamples to
/// `target = (height, width)`: color by area averaging, alpha by nearest
/// neighbour.
pub fn assemble_rgba(
    frame: &RgbImage,
    mask: &Mask,
    target: (usize, usize),
) -> Result<RgbaFrame, ShapeMismatch> {
    let src = (frame.height() as usize, frame.width() as usize);
    if mask.dims() != src {
        return Err(ShapeMismatch {
            expected: src,
            actual: mask.dims(),
        });
    }
    let (th, tw) = target;
    let color = area_resample(frame, th, tw);
    let alpha = mask.resize_nearest(th, tw);
    let mut data = Vec::with_capacity(th * tw * 4);
    for (rgb, &a) in color.chunks_exact(3).zip(alpha.as_slice()) {
        data.extend_from_slice(rgb);
        data.push(a as f32);
    }
    Ok(RgbaFrame {
        height: th,
        width: tw,
        data,
    })
}

/// Box-filter resample with fractional pixel coverage; returns H×W×3 in [0, 1].
fn area_resample(img: &RgbImage, th: usize, tw: usize) -> Vec<f32> {
    let (sh, sw) = (img.height() as usize, img.width() as usize);
    let ys = coverage(sh, th);
    let xs = coverage(sw, tw);
    let mut out = vec![0f32; th * tw * 3];
    for (oy, ycov) in ys.iter().enumerate() {
        for (ox, xcov) in xs.iter().enumerate() {
            let mut acc = [0f64; 3];
            let mut total = 0f64;
            for &(sy, wy) in ycov {
                for &(sx, wx) in xcov {
                    let w = wy * wx;
                    let p = img.get_pixel(sx as u32, sy as u32).0;
                    for c in 0..3 {
                        acc[c] += w * p[c] as f64 / 255.0;
                    }
                    total += w;
                }
            }
            let o = (oy * tw + ox) * 3;
            for c in 0..3 {
                out[o + c] = (acc[c] / total) as f32;
            }
        }
    }
    out
}

/// For each output cell, the source indices it overlaps and the overlap length.
fn coverage(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let w = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                    (w > 1e-12).then_some((s, w))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient_image(size: u32) -> RgbImage {
        RgbImage::from_fn(size, size, |x, y| {
            image::Rgb([(x * 4) as u8, (y * 4) as u8, ((x + y) * 2) as u8])
        })
    }

    #[test]
    fn all_ones_mask_gives_unit_alpha() {
        let f = assemble_rgba(&gradient_image(32), &Mask::ones(32, 32), (32, 32)).unwrap();
        assert!(f.as_slice().chunks_exact(4).all(|p| p[3] == 1.0));
    }

    #[test]
    fn all_zeros_mask_gives_zero_alpha() {
        let f = assemble_rgba(&gradient_image(32), &Mask::zeros(32, 32), (32, 32)).unwrap();
        assert!(f.as_slice().chunks_exact(4).all(|p| p[3] == 0.0));
    }

    #[test]
    fn identity_resample_keeps_colors() {
        let img = gradient_image(32);
        let f = assemble_rgba(&img, &Mask::ones(32, 32), (32, 32)).unwrap();
        let p = f.pixel(5, 7);
        assert!((p[0] - 28.0 / 255.0).abs() < 1e-6);
        assert!((p[1] - 20.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn downsized_half_plane_mask_halves_alpha() {
        let img = gradient_image(64);
        let mut mask = Mask::zeros(64, 64);
        // exact area by pixel loop at source resolution
        let mut exact_on = 0usize;
        for y in 0..64 {
            for x in 0..32 {
                mask.set(y, x, true);
                exact_on += 1;
            }
        }
        let f = assemble_rgba(&img, &mask, (32, 32)).unwrap();
        let expected_fraction = exact_on as f64 / (64.0 * 64.0);
        for y in 0..32 {
            let row_sum: f64 = (0..32).map(|x| f.pixel(y, x)[3] as f64).sum();
            assert!((row_sum - expected_fraction * 32.0).abs() <= 1.0, "row {y}: {row_sum}");
        }
        assert!((f.alpha_sum() - expected_fraction * 1024.0).abs() <= 32.0);
        assert!(f.as_slice().chunks_exact(4).all(|p| p[3] == 0.0 || p[3] == 1.0));
    }

    #[test]
    fn area_average_of_checkerboard_is_gray() {
        let img = RgbImage::from_fn(64, 64, |x, y| {
            let v = if (x + y) % 2 == 0 { 255 } else { 0 };
            image::Rgb([v, v, v])
        });
        let f = assemble_rgba(&img, &Mask::ones(64, 64), (32, 32)).unwrap();
        assert!(f.as_slice().chunks_exact(4).all(|p| (p[0] - 0.5).abs() < 1e-6));
    }

    #[test]
    fn mismatched_mask_is_rejected() {
        let err = assemble_rgba(&gradient_image(32), &Mask::ones(16, 16), (32, 32)).unwrap_err();
        assert_eq!(err.expected, (32, 32));
    }

    fn arb_mask() -> impl Strategy<Value = (Mask, Mask)> {
        proptest::collection::vec(0u8..2, 64).prop_flat_map(|a| {
            proptest::collection::vec(0u8..2, 64).prop_map(move |b| {
                (
                    Mask::from_raw(8, 8, a.clone()).unwrap(),
                    Mask::from_raw(8, 8, b).unwrap(),
                )
            })
        })
    }

    proptest! {
        #[test]
        fn union_is_commutative_and_idempotent((a, b) in arb_mask()) {
            prop_assert_eq!(a.union(&b).unwrap(), b.union(&a).unwrap());
            prop_assert_eq!(a.union(&a).unwrap(), a.clone());
        }
    }
}
