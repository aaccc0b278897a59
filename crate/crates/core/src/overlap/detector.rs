//! Fallback keypoint detector: Harris corners described by normalized
//! intensity patches. Lets the overlap pipeline run without an external
//! feature extractor.

use crate::error::{Error, Result};
use crate::scene::{ImageExtent, ImageId};

use super::keypoints::{Keypoint, KeypointSet};

/// Row-major single-channel image with float intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorParams {
    pub max_keypoints: usize,
    /// Harris sensitivity `k` in `det - k * trace^2`.
    pub harris_k: f32,
    /// Responses below this fraction of the strongest one are dropped.
    pub relative_threshold: f32,
    /// Non-maximum suppression radius, pixels.
    pub nms_radius: usize,
    /// Odd patch side length.
    pub patch_size: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            max_keypoints: 500,
            harris_k: 0.04,
            relative_threshold: 0.01,
            nms_radius: 3,
            patch_size: 11,
        }
    }
}

fn harris_response(img: &GrayImage, k: f32) -> Vec<f32> {
    let (w, h) = (img.width, img.height);
    let mut ix = vec![0f32; w * h];
    let mut iy = vec![0f32; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let p = |dx: isize, dy: isize| {
                img.at((x as isize + dx) as usize, (y as isize + dy) as usize)
            };
            ix[y * w + x] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            iy[y * w + x] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
        }
    }
    let mut resp = vec![0f32; w * h];
    for y in 2..h.saturating_sub(2) {
        for x in 2..w.saturating_sub(2) {
            let (mut sxx, mut syy, mut sxy) = (0f32, 0f32, 0f32);
            for yy in y - 1..=y + 1 {
                for xx in x - 1..=x + 1 {
                    let gx = ix[yy * w + xx];
                    let gy = iy[yy * w + xx];
                    sxx += gx * gx;
                    syy += gy * gy;
                    sxy += gx * gy;
                }
            }
            let trace = sxx + syy;
            resp[y * w + x] = sxx * syy - sxy * sxy - k * trace * trace;
        }
    }
    resp
}

/// Mean/variance-normalized patch centered on `(x, y)`; flat patches map to zeros.
fn patch_descriptor(img: &GrayImage, x: usize, y: usize, size: usize) -> Vec<f32> {
    let r = size / 2;
    let mut v = Vec::with_capacity(size * size);
    for yy in y - r..=y + r {
        for xx in x - r..=x + r {
            v.push(img.at(xx, yy));
        }
    }
    let n = v.len() as f32;
    let mean = v.iter().sum::<f32>() / n;
    let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f32>() / n;
    let sd = var.sqrt();
    if sd < 1e-6 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|a| (a - mean) / sd).collect()
}

/// Detects up to `max_keypoints` Harris corners, strongest first (ties by
/// raster order), and describes each with a normalized patch.
pub fn detect_keypoints(img: &GrayImage, image_id: ImageId, params: &DetectorParams) -> Result<KeypointSet> {
    if params.patch_size.is_multiple_of(2) {
        return Err(Error::Validation("patch size must be odd".into()));
    }
    let extent = ImageExtent {
        width: img.width as u32,
        height: img.height as u32,
    };
    let dim = params.patch_size * params.patch_size;
    let margin = (params.patch_size / 2).max(2).max(params.nms_radius);
    if img.width <= 2 * margin || img.height <= 2 * margin {
        return KeypointSet::new(image_id, extent, dim, Vec::new());
    }
    let resp = harris_response(img, params.harris_k);
    let peak = resp.iter().copied().fold(0f32, f32::max);
    if peak <= 0.0 {
        return KeypointSet::new(image_id, extent, dim, Vec::new());
    }
    let threshold = params.relative_threshold * peak;
    let w = img.width;
    let r = params.nms_radius;
    let mut corners = Vec::new();
    for y in margin..img.height - margin {
        for x in margin..w - margin {
            let v = resp[y * w + x];
            if v <= threshold {
                continue;
            }
            // strict maximum over earlier raster neighbours, non-strict over later ones
            let is_max = (y - r..=y + r).all(|yy| {
                (x - r..=x + r).all(|xx| {
                    let o = resp[yy * w + xx];
                    if (yy, xx) < (y, x) {
                        o < v
                    } else {
                        o <= v
                    }
                })
            });
            if is_max {
                corners.push((v, x, y));
            }
        }
    }
    corners.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    corners.truncate(params.max_keypoints);
    let keypoints = corners
        .into_iter()
        .map(|(_, x, y)| Keypoint {
            position: [x as f32, y as f32],
            descriptor: patch_descriptor(img, x, y, params.patch_size),
        })
        .collect();
    KeypointSet::new(image_id, extent, dim, keypoints)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| if (x / 16 + y / 16) % 2 == 0 { 1.0 } else { 0.0 })
    }

    #[test]
    fn uniform_image_has_no_corners() {
        let img = GrayImage::from_fn(64, 48, |_, _| 0.5);
        let set = detect_keypoints(&img, ImageId(0), &DetectorParams::default()).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.dim, 121);
    }

    #[test]
    fn checkerboard_corners_found_at_junctions() {
        let img = checker(96, 96);
        let set = detect_keypoints(&img, ImageId(0), &DetectorParams::default()).unwrap();
        assert!(!set.is_empty());
        for k in &set.keypoints {
            let [x, y] = k.position;
            let dx = (x as i32 % 16).min(16 - x as i32 % 16);
            let dy = (y as i32 % 16).min(16 - y as i32 % 16);
            assert!(dx <= 2 && dy <= 2, "corner at ({x}, {y})");
        }
        set.validate().unwrap();
    }

    #[test]
    fn patch_is_normalized() {
        let img = checker(40, 40);
        let d = patch_descriptor(&img, 16, 16, 11);
        let mean: f32 = d.iter().sum::<f32>() / d.len() as f32;
        let var: f32 = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d.len() as f32;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_size() {
        assert!(GrayImage::new(3, 3, vec![0.0; 8]).is_err());
    }
}
