//! View overlap between a query and its relevant image, the localization
//! difficulty index derived from it, and difficulty-ranked task selection.

pub mod consensus;
pub mod detector;
pub mod homography;
pub mod keypoints;
pub mod matching;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LocalizationTask;

pub use consensus::{consensus_filter, ConsensusParams, ConsensusResult};
pub use detector::{detect_keypoints, DetectorParams, GrayImage};
pub use homography::{ransac_homography, RansacParams};
pub use keypoints::{load_keypoints, save_keypoints, Keypoint, KeypointSet};
pub use matching::{match_candidates, Match, MatchSet};

/// Localization difficulty: the reciprocal of view overlap, or the
/// distinguished no-overlap class when nothing matched.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ldi {
    Finite(f64),
    NoOverlap,
}

impl Ldi {
    /// Numeric value with the no-overlap class mapped to `+inf`.
    pub fn value(&self) -> f64 {
        match self {
            Ldi::Finite(v) => *v,
            Ldi::NoOverlap => f64::INFINITY,
        }
    }

    pub fn is_no_overlap(&self) -> bool {
        matches!(self, Ldi::NoOverlap)
    }
}

pub fn ldi(overlap: u32) -> Ldi {
    if overlap == 0 {
        Ldi::NoOverlap
    } else {
        Ldi::Finite(1.0 / f64::from(overlap))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// Candidate matches verified by the EM displacement-field filter.
    #[default]
    Consensus,
    /// Candidate matches verified by a RANSAC homography.
    Ransac,
    /// Unverified candidate matches.
    Raw,
}

impl FromStr for OverlapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consensus" | "vfc" => Ok(Self::Consensus),
            "ransac" => Ok(Self::Ransac),
            "raw" => Ok(Self::Raw),
            other => Err(Error::Validation(format!("unknown overlap mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlapParams {
    pub mode: OverlapMode,
    pub ratio: f64,
    pub consensus: ConsensusParams,
    pub ransac: RansacParams,
}

impl Default for OverlapParams {
    fn default() -> Self {
        Self {
            mode: OverlapMode::Consensus,
            ratio: 0.8,
            consensus: ConsensusParams::default(),
            ransac: RansacParams::default(),
        }
    }
}

/// Number of verified keypoint matches from `query` to `relevant`.
pub fn overlap(query: &KeypointSet, relevant: &KeypointSet, params: &OverlapParams) -> Result<u32> {
    let candidates = match_candidates(query, relevant, params.ratio)?;
    let count = match params.mode {
        OverlapMode::Raw => candidates.len(),
        OverlapMode::Ransac => {
            ransac_homography(&candidates, query, relevant, &params.ransac).inlier_count()
        }
        OverlapMode::Consensus => {
            consensus_filter(&candidates, query, relevant, &params.consensus)?.inlier_count()
        }
    };
    Ok(count as u32)
}

/// Normalized-rank interval `[min_pct, max_pct)` in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRange {
    pub min_pct: f64,
    pub max_pct: f64,
}

impl RankRange {
    pub fn new(min_pct: f64, max_pct: f64) -> Result<Self> {
        if !(0.0 <= min_pct && min_pct < max_pct && max_pct <= 100.0) {
            return Err(Error::Validation(format!(
                "invalid rank range {min_pct}%-{max_pct}%"
            )));
        }
        Ok(Self { min_pct, max_pct })
    }

    /// The five difficulty ranges of the benchmark protocol.
    pub fn standard() -> [RankRange; 5] {
        [
            RankRange { min_pct: 0.0, max_pct: 20.0 },
            RankRange { min_pct: 0.0, max_pct: 50.0 },
            RankRange { min_pct: 0.0, max_pct: 100.0 },
            RankRange { min_pct: 50.0, max_pct: 100.0 },
            RankRange { min_pct: 80.0, max_pct: 100.0 },
        ]
    }

    pub fn contains(&self, pct: f64) -> bool {
        pct >= self.min_pct && pct < self.max_pct
    }
}

impl fmt::Display for RankRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.min_pct, self.max_pct)
    }
}

impl FromStr for RankRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .trim_end_matches('%')
            .split_once('-')
            .ok_or_else(|| Error::Validation(format!("rank range {s:?} is not MIN-MAX")))?;
        let parse = |t: &str| {
            t.trim()
                .trim_end_matches('%')
                .parse::<f64>()
                .map_err(|_| Error::Validation(format!("bad rank range bound {t:?}")))
        };
        RankRange::new(parse(a)?, parse(b)?)
    }
}

/// Sorts tasks by ascending difficulty (ties by query id) and stamps each with
/// its normalized rank `100 * position / count`.
pub fn rank_tasks(tasks: &[LocalizationTask]) -> Result<Vec<LocalizationTask>> {
    let mut keyed = Vec::with_capacity(tasks.len());
    for t in tasks {
        let l = t.ldi.ok_or_else(|| {
            Error::Validation(format!("task for query {} has no ldi", t.query_id))
        })?;
        keyed.push((l.value(), t));
    }
    keyed.sort_by(|(la, ta), (lb, tb)| la.total_cmp(lb).then(ta.query_id.cmp(&tb.query_id)));
    let n = keyed.len() as f64;
    Ok(keyed
        .into_iter()
        .enumerate()
        .map(|(pos, (_, t))| {
            let mut t = t.clone();
            t.difficulty_rank_pct = Some(100.0 * pos as f64 / n);
            t
        })
        .collect())
}

/// Ranks `tasks` and keeps those whose normalized rank falls in `range`.
pub fn rank_and_stratify(tasks: &[LocalizationTask], range: RankRange) -> Result<Vec<LocalizationTask>> {
    RankRange::new(range.min_pct, range.max_pct)?;
    Ok(rank_tasks(tasks)?
        .into_iter()
        .filter(|t| range.contains(t.difficulty_rank_pct.unwrap_or(f64::NAN)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ImageId;

    fn task(id: u64, l: Option<Ldi>) -> LocalizationTask {
        LocalizationTask {
            query_id: ImageId(id),
            relevant_id: ImageId(1000 + id),
            destructor_ids: vec![],
            overlap: None,
            ldi: l,
            difficulty_rank_pct: None,
        }
    }

    #[test]
    fn ldi_values() {
        assert_eq!(ldi(50), Ldi::Finite(0.02));
        assert_eq!(ldi(1), Ldi::Finite(1.0));
        assert_eq!(ldi(0), Ldi::NoOverlap);
        assert!(ldi(0).value().is_infinite());
        for o in 1..200 {
            assert!(ldi(o + 1).value() < ldi(o).value());
        }
    }

    #[test]
    fn stratify_half() {
        let tasks: Vec<_> = (0..10)
            .map(|i| task(i, Some(Ldi::Finite(1.0 / (10 - i) as f64))))
            .collect();
        let got = rank_and_stratify(&tasks, RankRange::new(0.0, 50.0).unwrap()).unwrap();
        let ids: Vec<u64> = got.iter().map(|t| t.query_id.0).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        let all = rank_and_stratify(&tasks, RankRange::new(0.0, 100.0).unwrap()).unwrap();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn no_overlap_sorts_last_and_ties_by_id() {
        let tasks = vec![
            task(5, Some(Ldi::NoOverlap)),
            task(3, Some(Ldi::Finite(0.5))),
            task(1, Some(Ldi::Finite(0.5))),
        ];
        let ranked = rank_tasks(&tasks).unwrap();
        let ids: Vec<u64> = ranked.iter().map(|t| t.query_id.0).collect();
        assert_eq!(ids, vec![1, 3, 5]);
        assert_eq!(ranked[2].difficulty_rank_pct, Some(200.0 / 3.0));
    }

    #[test]
    fn unset_ldi_is_error() {
        assert!(rank_tasks(&[task(1, None)]).is_err());
        assert!(RankRange::new(50.0, 50.0).is_err());
    }

    #[test]
    fn parse_range() {
        let r: RankRange = "80-100".parse().unwrap();
        assert_eq!(r, RankRange::new(80.0, 100.0).unwrap());
        assert!("80".parse::<RankRange>().is_err());
        assert_eq!("0%-20%".parse::<RankRange>().unwrap().max_pct, 20.0);
    }
}
