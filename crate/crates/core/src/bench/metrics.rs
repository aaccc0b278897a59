//! Recognition curves, difficulty tables and rank statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Top-rank threshold.
    pub x: usize,
    /// Fraction of tasks whose relevant image ranks within the top `x`.
    pub y: f64,
}

/// `y(x) = |{rank <= x}| / n` for `x = 1..=pool`.
pub fn recognition_curve(ranks: &[usize], pool: usize) -> Result<Vec<CurvePoint>> {
    if ranks.is_empty() {
        return Err(Error::InsufficientData("no results for a recognition curve".into()));
    }
    let mut counts = vec![0usize; pool + 1];
    for &r in ranks {
        if r == 0 || r > pool {
            return Err(Error::Validation(format!("rank {r} outside 1..={pool}")));
        }
        counts[r] += 1;
    }
    let n = ranks.len() as f64;
    let mut acc = 0;
    Ok((1..=pool)
        .map(|x| {
            acc += counts[x];
            CurvePoint { x, y: acc as f64 / n }
        })
        .collect())
}

/// Mean of `y` over all thresholds; 1 for a perfect ranker, about 0.5 for chance.
pub fn area_under_curve(curve: &[CurvePoint]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    curve.iter().map(|p| p.y).sum::<f64>() / curve.len() as f64
}

/// Rank mapped to `[0, 1]`: 0 for first place, 1 for last.
pub fn normalized_rank(rank: usize, pool: usize) -> f64 {
    if pool <= 1 {
        0.0
    } else {
        (rank - 1) as f64 / (pool - 1) as f64
    }
}

/// Decile bin `0..=9` of a one-based rank, bin `i` covering `[i/10, (i+1)/10)` of the pool.
pub fn rank_decile(rank: usize, pool: usize) -> usize {
    ((10 * (rank.saturating_sub(1))) / pool.max(1)).min(9)
}

pub const OVERLAP_BUCKET_WIDTH: u32 = 10;

/// Overlap bucket: 0 holds the no-overlap tasks, bucket `k >= 1` holds
/// overlaps `10(k-1)+1 ..= 10k`.
pub fn overlap_bucket(overlap: u32) -> usize {
    if overlap == 0 {
        0
    } else {
        ((overlap - 1) / OVERLAP_BUCKET_WIDTH + 1) as usize
    }
}

pub fn overlap_bucket_label(bucket: usize) -> String {
    if bucket == 0 {
        "NO".to_string()
    } else {
        let w = OVERLAP_BUCKET_WIDTH as usize;
        format!("{}-{}", (bucket - 1) * w + 1, bucket * w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRow {
    pub overlap_bucket: String,
    pub count: usize,
    /// Fraction of the bucket's tasks in each rank decile.
    pub deciles: [f64; 10],
}

/// Distribution of normalized relevant rank over deciles, per overlap bucket.
/// Buckets run from no-overlap up to the largest observed overlap; empty
/// buckets are zero rows.
pub fn perf_vs_difficulty(results: &[(u32, usize, usize)]) -> Vec<DifficultyRow> {
    let top = results.iter().map(|r| overlap_bucket(r.0)).max().unwrap_or(0);
    let mut counts = vec![[0usize; 10]; top + 1];
    for &(overlap, rank, pool) in results {
        counts[overlap_bucket(overlap)][rank_decile(rank, pool)] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| {
            let n: usize = c.iter().sum();
            let mut deciles = [0.0; 10];
            if n > 0 {
                for (d, k) in deciles.iter_mut().zip(c) {
                    *d = k as f64 / n as f64;
                }
            }
            DifficultyRow {
                overlap_bucket: overlap_bucket_label(b),
                count: n,
                deciles,
            }
        })
        .collect()
}

/// Ranks with ties given their average position, one-based.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant or fewer than two pairs are given.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Ranks a uniformly random ranker gives the relevant image over `n_tasks` tasks.
pub fn random_ranks(n_tasks: usize, pool: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_tasks).map(|_| rng.random_range(1..=pool)).collect()
}

/// The chance line `y = x / pool`.
pub fn chance_curve(pool: usize) -> Vec<CurvePoint> {
    (1..=pool)
        .map(|x| CurvePoint {
            x,
            y: x as f64 / pool as f64,
        })
        .collect()
}

/// Standard deviation of a success fraction over `n` Bernoulli(`p`) trials.
pub fn binomial_sigma(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Standard deviation of the normalized rank of a uniformly random ranker.
pub fn uniform_normalized_rank_sigma(pool: usize) -> f64 {
    if pool <= 1 {
        return 0.0;
    }
    let n = pool as f64;
    ((n + 1.0) / (12.0 * (n - 1.0))).sqrt()
}
