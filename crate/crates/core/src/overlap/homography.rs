//! Geometric verification by RANSAC over planar homographies.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::keypoints::KeypointSet;
use super::matching::MatchSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    /// Maximum reprojection error of an inlier, pixels.
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 500,
            inlier_threshold: 3.0,
            seed: 0,
        }
    }
}

/// Homography from exactly four correspondences with `h33 = 1`.
fn homography_from_four(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Option<Matrix3<f64>> {
    if has_collinear_triple(src) || has_collinear_triple(dst) {
        return None;
    }
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let [x, y] = src[i];
        let [u, v] = dst[i];
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    if h.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

fn has_collinear_triple(p: &[[f64; 2]; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES.iter().any(|&[i, j, k]| {
        let area = (p[j][0] - p[i][0]) * (p[k][1] - p[i][1])
            - (p[j][1] - p[i][1]) * (p[k][0] - p[i][0]);
        area.abs() < 1e-6
    })
}

fn transfer_error(h: &Matrix3<f64>, p: [f64; 2], q: [f64; 2]) -> f64 {
    let w = h * Vector3::new(p[0], p[1], 1.0);
    if w[2].abs() < 1e-12 {
        return f64::INFINITY;
    }
    (w[0] / w[2] - q[0]).hypot(w[1] / w[2] - q[1])
}

/// Largest inlier set consistent with one homography. Matches are returned
/// with posterior 1 for inliers and 0 otherwise. Fewer than four matches
/// cannot be verified and yield no inliers.
pub fn ransac_homography(
    matches: &MatchSet,
    a: &KeypointSet,
    b: &KeypointSet,
    params: &RansacParams,
) -> MatchSet {
    let pts: Vec<([f64; 2], [f64; 2])> = matches
        .pairs
        .iter()
        .map(|m| {
            let p = a.keypoints[m.a].position;
            let q = b.keypoints[m.b].position;
            (
                [f64::from(p[0]), f64::from(p[1])],
                [f64::from(q[0]), f64::from(q[1])],
            )
        })
        .collect();
    let mut out = matches.clone();
    if pts.len() < 4 {
        out.pairs.iter_mut().for_each(|m| m.posterior = 0.0);
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Vec<bool> = vec![false; pts.len()];
    let mut best_count = 0;
    for _ in 0..params.iterations {
        let idx = rand::seq::index::sample(&mut rng, pts.len(), 4);
        let mut src = [[0.0; 2]; 4];
        let mut dst = [[0.0; 2]; 4];
        for (k, i) in idx.iter().enumerate() {
            src[k] = pts[i].0;
            dst[k] = pts[i].1;
        }
        let Some(h) = homography_from_four(&src, &dst) else {
            continue;
        };
        let flags: Vec<bool> = pts
            .iter()
            .map(|(p, q)| transfer_error(&h, *p, *q) < params.inlier_threshold)
            .collect();
        let count = flags.iter().filter(|f| **f).count();
        if count > best_count {
            best_count = count;
            best = flags;
        }
    }
    for (m, f) in out.pairs.iter_mut().zip(best) {
        m.posterior = if f { 1.0 } else { 0.0 };
    }
    out
}
