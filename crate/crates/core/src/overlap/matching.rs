use crate::error::{Error, Result};

use super::keypoints::KeypointSet;

/// One candidate correspondence between keypoint `a` of the first set and
/// keypoint `b` of the second.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    /// Posterior probability that the match is an inlier.
    pub posterior: f64,
}

/// One-to-one set of candidate matches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn inliers(&self) -> impl Iterator<Item = &Match> {
        self.pairs.iter().filter(|m| m.posterior > 0.5)
    }

    pub fn inlier_count(&self) -> usize {
        self.inliers().count()
    }

    /// Checks index bounds and the one-to-one property against two sets.
    pub fn validate(&self, a: &KeypointSet, b: &KeypointSet) -> Result<()> {
        let mut used_a = vec![false; a.len()];
        let mut used_b = vec![false; b.len()];
        for m in &self.pairs {
            if m.a >= a.len() || m.b >= b.len() {
                return Err(Error::Validation(format!(
                    "match ({}, {}) out of range for sets of size {} and {}",
                    m.a,
                    m.b,
                    a.len(),
                    b.len()
                )));
            }
            if std::mem::replace(&mut used_a[m.a], true) || std::mem::replace(&mut used_b[m.b], true) {
                return Err(Error::Validation(format!(
                    "match ({}, {}) reuses a keypoint",
                    m.a, m.b
                )));
            }
            if !(0.0..=1.0).contains(&m.posterior) {
                return Err(Error::Validation(format!(
                    "posterior {} outside [0, 1]",
                    m.posterior
                )));
            }
        }
        Ok(())
    }
}

fn dist_sq(x: &[f32], y: &[f32]) -> f32 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Nearest and second-nearest squared distances from `q` into `set`
/// (first index wins ties).
fn two_nearest(q: &[f32], set: &KeypointSet) -> (usize, f32, f32) {
    let mut best = (usize::MAX, f32::INFINITY);
    let mut second = f32::INFINITY;
    for (j, k) in set.keypoints.iter().enumerate() {
        let d = dist_sq(q, &k.descriptor);
        if d < best.1 {
            second = best.1;
            best = (j, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0, best.1, second)
}

/// Mutual nearest neighbours in descriptor space that also pass the distance
/// ratio test `nearest / second_nearest < ratio` (Euclidean distances, from
/// the side of `a`). Posteriors start at 1.
pub fn match_candidates(a: &KeypointSet, b: &KeypointSet, ratio: f64) -> Result<MatchSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Validation(format!("ratio must lie in (0, 1], got {ratio}")));
    }
    if a.is_empty() || b.is_empty() {
        return Ok(MatchSet::default());
    }
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            expected: a.dim,
            actual: b.dim,
        });
    }
    let back: Vec<usize> = b
        .keypoints
        .iter()
        .map(|k| two_nearest(&k.descriptor, a).0)
        .collect();
    let ratio_sq = (ratio * ratio) as f32;
    let pairs = a
        .keypoints
        .iter()
        .enumerate()
        .filter_map(|(i, k)| {
            let (j, d1, d2) = two_nearest(&k.descriptor, b);
            let passes = d2.is_infinite() || d1 < ratio_sq * d2;
            (back[j] == i && passes).then_some(Match {
                a: i,
                b: j,
                posterior: 1.0,
            })
        })
        .collect();
    Ok(MatchSet { pairs })
}
