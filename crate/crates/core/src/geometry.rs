//! Viewing-area geometry, relevant-image selection and localization-task sampling.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{read_file, write_file};
use crate::error::{Error, Result};
use crate::overlap::Ldi;
use crate::scene::{heading_difference, ImageId, Viewpoint};

/// Isosceles triangle approximating what a camera at `apex` can see.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewingTriangle {
    pub apex: [f64; 2],
    pub heading: f64,
    pub apex_angle: f64,
    pub leg: f64,
}

impl ViewingTriangle {
    pub fn new(v: &Viewpoint, apex_angle: f64, leg: f64) -> Result<Self> {
        if !(leg > 0.0 && leg.is_finite()) {
            return Err(Error::Validation(format!("leg must be positive, got {leg}")));
        }
        if !(apex_angle > 0.0 && apex_angle < std::f64::consts::PI) {
            return Err(Error::Validation(format!(
                "apex angle must lie in (0, pi), got {apex_angle}"
            )));
        }
        Ok(Self {
            apex: v.position(),
            heading: v.heading,
            apex_angle,
            leg,
        })
    }

    /// Apex, then the left and right leg ends (counter-clockwise order).
    pub fn vertices(&self) -> [[f64; 2]; 3] {
        let half = self.apex_angle / 2.0;
        let end = |a: f64| {
            [
                self.apex[0] + self.leg * a.cos(),
                self.apex[1] + self.leg * a.sin(),
            ]
        };
        [self.apex, end(self.heading - half), end(self.heading + half)]
    }

    /// Strict interior test, used for landmark visibility.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let v = self.vertices();
        (0..3).all(|i| cross(v[i], v[(i + 1) % 3], p) > 0.0)
    }
}

pub fn viewing_triangle(v: &Viewpoint, apex_angle: f64, leg: f64) -> Result<ViewingTriangle> {
    ViewingTriangle::new(v, apex_angle, leg)
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// True iff the two triangles share a region of positive area.
///
/// Separating-axis test over the six edge normals: convex interiors are
/// disjoint exactly when some edge direction of either triangle admits a
/// (possibly touching) separating line. Contact within `1e-9 * leg` counts
/// as separation, so shared edges and apexes do not overlap.
pub fn triangles_overlap(a: &ViewingTriangle, b: &ViewingTriangle) -> bool {
    let scale = a.leg.max(b.leg);
    let dx = a.apex[0] - b.apex[0];
    let dy = a.apex[1] - b.apex[1];
    let reach = a.leg + b.leg;
    if dx * dx + dy * dy > reach * reach {
        return false;
    }
    let eps = 1e-9 * scale;
    let va = a.vertices();
    let vb = b.vertices();
    for poly in [&va, &vb] {
        for i in 0..3 {
            let p = poly[i];
            let q = poly[(i + 1) % 3];
            let axis = [q[1] - p[1], p[0] - q[0]];
            let len = axis[0].hypot(axis[1]);
            let axis = [axis[0] / len, axis[1] / len];
            let (amin, amax) = project(&va, axis);
            let (bmin, bmax) = project(&vb, axis);
            if amax <= bmin + eps || bmax <= amin + eps {
                return false;
            }
        }
    }
    true
}

fn project(v: &[[f64; 2]; 3], axis: [f64; 2]) -> (f64, f64) {
    v.iter()
        .map(|p| p[0] * axis[0] + p[1] * axis[1])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        })
}

/// Database entry nearest in position to `query`; ties by smaller heading
/// difference, then smaller id.
pub fn select_relevant(query: &Viewpoint, database: &[(ImageId, Viewpoint)]) -> Result<ImageId> {
    database
        .iter()
        .min_by(|(ia, va), (ib, vb)| {
            query
                .distance_sq(va)
                .total_cmp(&query.distance_sq(vb))
                .then(
                    heading_difference(query.heading, va.heading)
                        .total_cmp(&heading_difference(query.heading, vb.heading)),
                )
                .then(ia.cmp(ib))
        })
        .map(|(id, _)| *id)
        .ok_or_else(|| Error::InsufficientData("empty database".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    /// Size of each task's candidate list (relevant plus destructors).
    pub n_d: usize,
    /// Heading difference that alone makes an image a destructor, radians.
    pub t_theta: f64,
    pub apex_angle: f64,
    pub leg: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            n_d: 100,
            t_theta: 45f64.to_radians(),
            apex_angle: 40f64.to_radians(),
            leg: 50.0,
        }
    }
}

impl TaskParams {
    /// Whether an image at `candidate` may serve as a destructor for `query`.
    pub fn is_destructor(&self, query: &Viewpoint, candidate: &Viewpoint) -> Result<bool> {
        if heading_difference(query.heading, candidate.heading) >= self.t_theta {
            return Ok(true);
        }
        let tq = ViewingTriangle::new(query, self.apex_angle, self.leg)?;
        let tc = ViewingTriangle::new(candidate, self.apex_angle, self.leg)?;
        Ok(!triangles_overlap(&tq, &tc))
    }
}

/// One self-localization task: a query, its relevant image and destructors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationTask {
    pub query_id: ImageId,
    pub relevant_id: ImageId,
    pub destructor_ids: Vec<ImageId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ldi: Option<Ldi>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty_rank_pct: Option<f64>,
}

impl LocalizationTask {
    /// Relevant image followed by the destructors.
    pub fn candidates(&self) -> impl Iterator<Item = ImageId> + '_ {
        std::iter::once(self.relevant_id).chain(self.destructor_ids.iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        seen.insert(self.query_id);
        for id in self.candidates() {
            if !seen.insert(id) {
                return Err(Error::Validation(format!(
                    "task for query {}: id {id} repeated",
                    self.query_id
                )));
            }
        }
        Ok(())
    }
}

/// Samples one task for `query` from `database` (which may contain the query
/// itself; it is excluded).
pub fn sample_task(
    query: (ImageId, Viewpoint),
    database: &[(ImageId, Viewpoint)],
    seed: u64,
    params: &TaskParams,
) -> Result<LocalizationTask> {
    if params.n_d < 1 {
        return Err(Error::Validation("n_d must be at least 1".into()));
    }
    let (qid, qvp) = query;
    let others: Vec<(ImageId, Viewpoint)> = database
        .iter()
        .filter(|(id, _)| *id != qid)
        .copied()
        .collect();
    let relevant_id = select_relevant(&qvp, &others)?;
    let mut eligible = Vec::new();
    for (id, vp) in &others {
        if *id != relevant_id && params.is_destructor(&qvp, vp)? {
            eligible.push(*id);
        }
    }
    eligible.sort_unstable();
    eligible.dedup();
    let need = params.n_d - 1;
    if eligible.len() < need {
        return Err(Error::InsufficientData(format!(
            "query {qid}: {} eligible destructors, {need} required",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut destructor_ids: Vec<ImageId> = rand::seq::index::sample(&mut rng, eligible.len(), need)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    destructor_ids.sort_unstable();
    Ok(LocalizationTask {
        query_id: qid,
        relevant_id,
        destructor_ids,
        overlap: None,
        ldi: None,
        difficulty_rank_pct: None,
    })
}

/// Per-query seed derived from a run seed, independent of evaluation order.
pub fn task_seed(seed: u64, query: ImageId) -> u64 {
    let mut z = seed ^ query.0.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples a task for every query in parallel. Queries without enough eligible
/// destructors are skipped and returned separately.
pub fn sample_tasks(
    queries: &[(ImageId, Viewpoint)],
    database: &[(ImageId, Viewpoint)],
    seed: u64,
    params: &TaskParams,
) -> Result<(Vec<LocalizationTask>, Vec<ImageId>)> {
    let results: Vec<_> = queries
        .par_iter()
        .map(|q| (q.0, sample_task(*q, database, task_seed(seed, q.0), params)))
        .collect();
    let mut tasks = Vec::new();
    let mut skipped = Vec::new();
    for (id, r) in results {
        match r {
            Ok(t) => tasks.push(t),
            Err(Error::InsufficientData(msg)) => {
                log::warn!("{msg}");
                skipped.push(id);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((tasks, skipped))
}

pub fn write_tasks(tasks: &[LocalizationTask], path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    for t in tasks {
        serde_json::to_writer(&mut out, t)?;
        out.push(b'\n');
    }
    write_file(path.as_ref(), &out)
}

pub fn read_tasks(path: impl AsRef<Path>) -> Result<Vec<LocalizationTask>> {
    let bytes = read_file(path.as_ref())?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::Format(format!("tasks file is not UTF-8: {e}")))?;
    let mut tasks = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let t: LocalizationTask = serde_json::from_str(line)?;
        t.validate()?;
        tasks.push(t);
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn vp(x: f64, y: f64, h: f64) -> Viewpoint {
        Viewpoint::new(x, y, h).unwrap()
    }

    fn tri(x: f64, y: f64, h: f64) -> ViewingTriangle {
        ViewingTriangle::new(&vp(x, y, h), 40f64.to_radians(), 50.0).unwrap()
    }

    #[test]
    fn triangle_vertices_heading_zero() {
        let t = tri(0.0, 0.0, 0.0);
        let v = t.vertices();
        let a = 20f64.to_radians();
        assert_eq!(v[0], [0.0, 0.0]);
        assert!((v[1][0] - 50.0 * a.cos()).abs() < 1e-12);
        assert!((v[1][1] + 50.0 * a.sin()).abs() < 1e-12);
        assert!((v[2][0] - 50.0 * a.cos()).abs() < 1e-12);
        assert!((v[2][1] - 50.0 * a.sin()).abs() < 1e-12);
    }

    #[test]
    fn triangle_rotates_with_heading() {
        let t0 = tri(0.0, 0.0, 0.0).vertices();
        let t1 = tri(0.0, 0.0, PI / 2.0).vertices();
        for (p, q) in t0.iter().zip(t1.iter()) {
            // rotating (x, y) by 90 degrees gives (-y, x)
            assert!((q[0] + p[1]).abs() < 1e-9);
            assert!((q[1] - p[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_parameters_rejected() {
        let v = vp(0.0, 0.0, 0.0);
        assert!(ViewingTriangle::new(&v, 0.0, 50.0).is_err());
        assert!(ViewingTriangle::new(&v, PI, 50.0).is_err());
        assert!(ViewingTriangle::new(&v, 0.5, 0.0).is_err());
    }

    #[test]
    fn overlap_examples() {
        let a = tri(0.0, 0.0, 0.3);
        assert!(triangles_overlap(&a, &a));
        assert!(!triangles_overlap(&tri(0.0, 0.0, 0.0), &tri(200.0, 0.0, PI)));
        assert!(!triangles_overlap(&tri(0.0, 0.0, 0.0), &tri(0.0, 0.0, PI)));
        assert!(triangles_overlap(&tri(0.0, 0.0, 0.0), &tri(10.0, 0.0, 0.1)));
        // facing each other across 40 m
        assert!(triangles_overlap(&tri(0.0, 0.0, 0.0), &tri(40.0, 0.0, PI)));
    }

    #[test]
    fn contains_is_strict() {
        let t = tri(0.0, 0.0, 0.0);
        assert!(t.contains([25.0, 0.0]));
        assert!(!t.contains([0.0, 0.0]));
        assert!(!t.contains([25.0, 20.0]));
    }

    #[test]
    fn relevant_tie_breaks() {
        let q = vp(0.0, 0.0, 0.0);
        let db = vec![
            (ImageId(5), vp(1.0, 0.0, 1.0)),
            (ImageId(7), vp(-1.0, 0.0, 0.1)),
            (ImageId(2), vp(0.0, 3.0, 0.0)),
        ];
        assert_eq!(select_relevant(&q, &db).unwrap(), ImageId(7));
        let db = vec![(ImageId(9), vp(0.0, 1.0, 0.0)), (ImageId(4), vp(0.0, -1.0, 0.0))];
        assert_eq!(select_relevant(&q, &db).unwrap(), ImageId(4));
        assert_eq!(
            select_relevant(&q, &[(ImageId(1), q)]).unwrap(),
            ImageId(1)
        );
        assert!(select_relevant(&q, &[]).is_err());
    }

    #[test]
    fn colocated_candidates_are_ineligible() {
        let q = (ImageId(0), vp(0.0, 0.0, 0.0));
        let db: Vec<_> = (1..50).map(|i| (ImageId(i), vp(0.0, 0.0, 0.0))).collect();
        let p = TaskParams {
            n_d: 10,
            ..Default::default()
        };
        match sample_task(q, &db, 1, &p) {
            Err(Error::InsufficientData(msg)) => assert!(msg.contains("0 eligible"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn task_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let tasks = vec![
            LocalizationTask {
                query_id: ImageId(1),
                relevant_id: ImageId(2),
                destructor_ids: vec![ImageId(3), ImageId(4)],
                overlap: Some(0),
                ldi: Some(Ldi::NoOverlap),
                difficulty_rank_pct: Some(50.0),
            },
            LocalizationTask {
                query_id: ImageId(5),
                relevant_id: ImageId(6),
                destructor_ids: vec![],
                overlap: Some(4),
                ldi: Some(Ldi::Finite(0.25)),
                difficulty_rank_pct: None,
            },
        ];
        write_tasks(&tasks, &path).unwrap();
        assert_eq!(read_tasks(&path).unwrap(), tasks);
    }

    #[test]
    fn task_validation_catches_duplicates() {
        let t = LocalizationTask {
            query_id: ImageId(1),
            relevant_id: ImageId(2),
            destructor_ids: vec![ImageId(2)],
            overlap: None,
            ldi: None,
            difficulty_rank_pct: None,
        };
        assert!(t.validate().is_err());
    }
}
