//! Seeded synthetic place-recognition datasets.
//!
//! A flat world holds landmarks with latent appearance vectors. Database
//! images are taken along a smooth random path; queries are perturbed copies
//! of database viewpoints. An image sees the landmarks inside its viewing
//! triangle, so two images share scenery exactly when their triangles do.
//! Descriptors are landmark appearances plus Gaussian noise plus a bias that
//! depends on the world region ("atmosphere"), which makes images of one
//! region alike even when they share no landmark. Keypoints are landmark
//! sub-points projected through a pinhole camera, so views of a shared
//! landmark carry planted correspondences.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{select_relevant, task_seed, viewing_triangle, TaskParams, ViewingTriangle};
use crate::overlap::keypoints::{save_keypoints, Keypoint, KeypointSet};
use crate::scene::{
    normalize_angle, save_pack, save_poses, BoundingBox, DescriptorPack, ImageExtent, ImageId, Level,
    PartDescriptor, SceneModel, Viewpoint,
};

/// Query ids start here so they never collide with database ids.
pub const QUERY_ID_BASE: u64 = 1_000_000;

const CAMERA_HEIGHT: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub n_database: usize,
    pub n_queries: usize,
    /// Extra queries looking away from their anchor, sharing no scenery with it.
    pub no_overlap_queries: usize,
    /// Side of the square world, meters.
    pub world_size: f64,
    /// Distance between consecutive database viewpoints, meters.
    pub step: f64,
    /// Standard deviation of the heading change per step, radians.
    pub turn_sigma: f64,
    pub landmarks: usize,
    pub dim: usize,
    /// Part descriptors per image, not counting the image-level one.
    pub parts: usize,
    /// Descriptor noise relative to a unit-norm appearance.
    pub noise: f64,
    /// Additional query noise at zero shared scenery, scaled by the unshared fraction.
    pub overlap_noise: f64,
    /// Norm of the per-region bias relative to a unit-norm appearance.
    pub atmosphere: f64,
    /// The world is split into `regions x regions` atmosphere cells.
    pub regions: usize,
    pub max_position_offset: f64,
    pub max_heading_offset: f64,
    pub subpoints: usize,
    pub clutter: usize,
    pub keypoint_dim: usize,
    pub keypoint_noise: f64,
    pub extent: ImageExtent,
    pub view: TaskParams,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            n_database: 300,
            n_queries: 500,
            no_overlap_queries: 0,
            world_size: 300.0,
            step: 2.0,
            turn_sigma: 0.15,
            landmarks: 1600,
            dim: 256,
            parts: 20,
            noise: 0.3,
            overlap_noise: 0.5,
            atmosphere: 0.5,
            regions: 3,
            max_position_offset: 15.0,
            max_heading_offset: 35f64.to_radians(),
            subpoints: 6,
            clutter: 20,
            keypoint_dim: 32,
            keypoint_noise: 0.05,
            extent: ImageExtent::default(),
            view: TaskParams::default(),
            seed: 0,
        }
    }
}

/// Ground truth recorded for each query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryTruth {
    pub query_id: ImageId,
    pub anchor_id: ImageId,
    pub relevant_id: ImageId,
    /// Fraction of the query's visible landmarks the relevant image also sees.
    pub shared_fraction: f64,
    pub no_overlap: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub database: DescriptorPack,
    pub queries: DescriptorPack,
    /// Database sets first, then query sets.
    pub keypoints: Vec<KeypointSet>,
    pub truth: Vec<QueryTruth>,
}

struct SubPoint {
    offset: [f64; 3],
    descriptor: Vec<f64>,
}

struct Landmark {
    position: [f64; 2],
    size: f64,
    appearance: Vec<f64>,
    subpoints: Vec<SubPoint>,
}

struct World {
    landmarks: Vec<Landmark>,
    region_bias: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    let s = scale / (dim as f64).sqrt();
    (0..dim).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
}

impl World {
    fn generate(p: &SyntheticParams, rng: &mut ChaCha8Rng) -> Self {
        let landmarks = (0..p.landmarks)
            .map(|_| {
                let position = [rng.random_range(0.0..p.world_size), rng.random_range(0.0..p.world_size)];
                let size = rng.random_range(1.0..4.0);
                let appearance = gaussian_vec(rng, p.dim, 1.0);
                let subpoints = (0..p.subpoints)
                    .map(|_| SubPoint {
                        offset: [
                            rng.random_range(-size..size),
                            rng.random_range(-size..size),
                            rng.random_range(0.0..2.0 * size),
                        ],
                        descriptor: gaussian_vec(rng, p.keypoint_dim, 1.0),
                    })
                    .collect();
                Landmark {
                    position,
                    size,
                    appearance,
                    subpoints,
                }
            })
            .collect();
        let region_bias = (0..p.regions * p.regions)
            .map(|_| gaussian_vec(rng, p.dim, p.atmosphere))
            .collect();
        Self { landmarks, region_bias }
    }

    fn region(&self, p: &SyntheticParams, v: &Viewpoint) -> usize {
        let cell = |c: f64| ((c / p.world_size * p.regions as f64).floor().max(0.0) as usize).min(p.regions - 1);
        cell(v.y) * p.regions + cell(v.x)
    }

    /// Indices of landmarks inside the viewing triangle, by apparent size
    /// (largest first, ties by index).
    fn visible(&self, tri: &ViewingTriangle, v: &Viewpoint) -> Vec<(usize, f64)> {
        let mut seen: Vec<(usize, f64)> = self
            .landmarks
            .iter()
            .enumerate()
            .filter(|(_, l)| tri.contains(l.position))
            .map(|(i, l)| {
                let (fwd, _) = camera_frame(v, l.position);
                (i, l.size / fwd.max(1e-6))
            })
            .collect();
        seen.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        seen
    }
}

/// Forward and rightward coordinates of `p` in the camera frame of `v`.
fn camera_frame(v: &Viewpoint, p: [f64; 2]) -> (f64, f64) {
    let dx = p[0] - v.x;
    let dy = p[1] - v.y;
    let (s, c) = v.heading.sin_cos();
    (dx * c + dy * s, dx * s - dy * c)
}

struct Camera {
    focal: f64,
    cx: f64,
    cy: f64,
    width: f64,
    height: f64,
}

impl Camera {
    fn new(extent: ImageExtent, apex_angle: f64) -> Self {
        let width = f64::from(extent.width);
        Self {
            focal: 0.5 * width / (0.5 * apex_angle).tan(),
            cx: 0.5 * width,
            cy: 0.5 * f64::from(extent.height),
            width,
            height: f64::from(extent.height),
        }
    }

    fn project(&self, v: &Viewpoint, p: [f64; 2], z: f64) -> Option<[f64; 2]> {
        let (fwd, right) = camera_frame(v, p);
        if fwd < 0.5 {
            return None;
        }
        let u = self.cx + self.focal * right / fwd;
        let w = self.cy - self.focal * (z - CAMERA_HEIGHT) / fwd;
        (u >= 0.0 && u < self.width && w >= 0.0 && w < self.height).then_some([u, w])
    }

    fn part_box(&self, v: &Viewpoint, l: &Landmark) -> BoundingBox {
        let (fwd, right) = camera_frame(v, l.position);
        let fwd = fwd.max(0.5);
        let uc = self.cx + self.focal * right / fwd;
        let vc = self.cy - self.focal * (l.size - CAMERA_HEIGHT) / fwd;
        let half = self.focal * l.size / fwd;
        let clip = |a: f64, hi: f64| a.clamp(0.0, hi - 1.0).floor();
        let left = clip(uc - half, self.width);
        let top = clip(vc - half, self.height);
        let right_edge = (uc + half).clamp(left + 1.0, self.width).floor();
        let bottom = (vc + half).clamp(top + 1.0, self.height).floor();
        BoundingBox {
            left: left as u32,
            top: top as u32,
            width: (right_edge - left).max(1.0) as u32,
            height: (bottom - top).max(1.0) as u32,
        }
    }
}

fn smooth_path(p: &SyntheticParams, rng: &mut ChaCha8Rng) -> Vec<Viewpoint> {
    let margin = 0.1 * p.world_size;
    let mut x = rng.random_range(margin..p.world_size - margin);
    let mut y = rng.random_range(margin..p.world_size - margin);
    let mut heading = rng.random_range(-PI..PI);
    let turn = Normal::new(0.0, p.turn_sigma.max(0.0)).expect("finite sigma");
    let mut out = Vec::with_capacity(p.n_database);
    for _ in 0..p.n_database {
        out.push(Viewpoint::new(x, y, heading).expect("finite viewpoint"));
        heading = normalize_angle(heading + turn.sample(rng));
        let (mut nx, mut ny) = (x + p.step * heading.cos(), y + p.step * heading.sin());
        // turn back at the world border
        if nx < margin || nx > p.world_size - margin {
            heading = normalize_angle(PI - heading);
            nx = x + p.step * heading.cos();
        }
        if ny < margin || ny > p.world_size - margin {
            heading = normalize_angle(-heading);
            ny = y + p.step * heading.sin();
        }
        x = nx.clamp(0.0, p.world_size);
        y = ny.clamp(0.0, p.world_size);
    }
    out
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

/// Renders descriptors and keypoints for one viewpoint.
fn render(
    p: &SyntheticParams,
    world: &World,
    camera: &Camera,
    id: ImageId,
    v: Viewpoint,
    noise: f64,
    seed: u64,
) -> Result<(SceneModel, KeypointSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tri = viewing_triangle(&v, p.view.apex_angle, p.view.leg)?;
    let visible = world.visible(&tri, &v);
    let bias = &world.region_bias[world.region(p, &v)];
    let noisy = |base: &[f64], rng: &mut ChaCha8Rng| -> Vec<f32> {
        let n = gaussian_vec(rng, p.dim, noise);
        let out: Vec<f64> = base.iter().zip(bias).zip(n).map(|((a, b), e)| a + b + e).collect();
        to_f32(&out)
    };

    let mut global = vec![0.0; p.dim];
    let weight: f64 = visible.iter().map(|(_, w)| w).sum();
    for (i, w) in &visible {
        for (g, a) in global.iter_mut().zip(&world.landmarks[*i].appearance) {
            *g += a * w / weight;
        }
    }
    let mut parts = vec![PartDescriptor {
        bbox: BoundingBox::full(p.extent),
        level: Level::Image,
        vector: noisy(&global, &mut rng),
    }];
    for (i, _) in visible.iter().take(p.parts) {
        let l = &world.landmarks[*i];
        parts.push(PartDescriptor {
            bbox: camera.part_box(&v, l),
            level: Level::Part,
            vector: noisy(&l.appearance, &mut rng),
        });
    }

    let mut keypoints = Vec::new();
    let kp_scale = p.keypoint_noise / (p.keypoint_dim as f64).sqrt();
    for (i, _) in &visible {
        let l = &world.landmarks[*i];
        for s in &l.subpoints {
            let at = [l.position[0] + s.offset[0], l.position[1] + s.offset[1]];
            if let Some(uv) = camera.project(&v, at, s.offset[2]) {
                let d: Vec<f64> = s
                    .descriptor
                    .iter()
                    .map(|x| x + kp_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                keypoints.push(Keypoint {
                    position: [uv[0] as f32, uv[1] as f32],
                    descriptor: to_f32(&d),
                });
            }
        }
    }
    for _ in 0..p.clutter {
        keypoints.push(Keypoint {
            position: [
                rng.random_range(0.0..camera.width) as f32,
                rng.random_range(0.0..camera.height) as f32,
            ],
            descriptor: to_f32(&gaussian_vec(&mut rng, p.keypoint_dim, 1.0)),
        });
    }
    let scene = SceneModel {
        image_id: id,
        viewpoint: Some(v),
        parts,
    };
    let kps = KeypointSet::new(id, p.extent, p.keypoint_dim, keypoints)?;
    Ok((scene, kps))
}

fn shared_fraction(p: &SyntheticParams, world: &World, a: &Viewpoint, b: &Viewpoint) -> Result<f64> {
    let ta = viewing_triangle(a, p.view.apex_angle, p.view.leg)?;
    let tb = viewing_triangle(b, p.view.apex_angle, p.view.leg)?;
    let seen: Vec<&Landmark> = world.landmarks.iter().filter(|l| ta.contains(l.position)).collect();
    if seen.is_empty() {
        return Ok(0.0);
    }
    let shared = seen.iter().filter(|l| tb.contains(l.position)).count();
    Ok(shared as f64 / seen.len() as f64)
}

/// Generates a dataset; identical parameters give identical output.
pub fn generate_synthetic(p: &SyntheticParams) -> Result<SyntheticDataset> {
    if p.n_database == 0 || p.dim == 0 || p.regions == 0 || p.keypoint_dim == 0 {
        return Err(crate::Error::Validation(
            "synthetic dataset needs images, regions and non-zero dimensions".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let world = World::generate(p, &mut rng);
    let camera = Camera::new(p.extent, p.view.apex_angle);
    let path = smooth_path(p, &mut rng);
    let db_poses: Vec<(ImageId, Viewpoint)> =
        path.iter().enumerate().map(|(i, v)| (ImageId(i as u64), *v)).collect();

    let mut query_specs = Vec::new();
    for i in 0..p.n_queries + p.no_overlap_queries {
        let anchor = rng.random_range(0..p.n_database);
        let a = path[anchor];
        let no_overlap = i >= p.n_queries;
        let (x, y, heading) = if no_overlap {
            let d: f64 = rng.random_range(0.0..2.0);
            let phi: f64 = rng.random_range(-PI..PI);
            (a.x + d * phi.cos(), a.y + d * phi.sin(), a.heading + PI + rng.random_range(-0.3..0.3))
        } else {
            let u: f64 = rng.random();
            let phi: f64 = rng.random_range(-PI..PI);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            (
                a.x + u * p.max_position_offset * phi.cos(),
                a.y + u * p.max_position_offset * phi.sin(),
                a.heading + sign * u * p.max_heading_offset,
            )
        };
        let v = Viewpoint::new(x, y, normalize_angle(heading))?;
        query_specs.push((ImageId(QUERY_ID_BASE + i as u64), ImageId(anchor as u64), v, no_overlap));
    }

    let truth = query_specs
        .par_iter()
        .map(|(qid, anchor, v, no_overlap)| {
            let relevant_id = select_relevant(v, &db_poses)?;
            let rel = &path[relevant_id.0 as usize];
            Ok(QueryTruth {
                query_id: *qid,
                anchor_id: *anchor,
                relevant_id,
                shared_fraction: shared_fraction(p, &world, v, rel)?,
                no_overlap: *no_overlap,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let db: Vec<(SceneModel, KeypointSet)> = db_poses
        .par_iter()
        .map(|(id, v)| render(p, &world, &camera, *id, *v, p.noise, task_seed(p.seed, *id)))
        .collect::<Result<_>>()?;
    let qs: Vec<(SceneModel, KeypointSet)> = query_specs
        .par_iter()
        .zip(&truth)
        .map(|((id, _, v, _), t)| {
            let noise = p.noise + p.overlap_noise * (1.0 - t.shared_fraction);
            render(p, &world, &camera, *id, *v, noise, task_seed(p.seed, *id))
        })
        .collect::<Result<_>>()?;

    let (db_models, mut keypoints): (Vec<_>, Vec<_>) = db.into_iter().unzip();
    let (q_models, q_kps): (Vec<_>, Vec<_>) = qs.into_iter().unzip();
    keypoints.extend(q_kps);
    Ok(SyntheticDataset {
        database: DescriptorPack::new(p.extent, db_models)?,
        queries: DescriptorPack::new(p.extent, q_models)?,
        keypoints,
        truth,
    })
}

impl SyntheticDataset {
    /// Writes the standard dataset files into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        save_pack(&self.database, dir.join(super::DATABASE_PACK))?;
        save_pack(&self.queries, dir.join(super::QUERY_PACK))?;
        save_poses(&self.database.poses(), dir.join(super::DATABASE_POSES))?;
        save_poses(&self.queries.poses(), dir.join(super::QUERY_POSES))?;
        save_keypoints(&self.keypoints, dir.join(super::KEYPOINTS))?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for t in &self.truth {
            w.serialize(t)?;
        }
        let bytes = w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))?;
        crate::codec::write_file(&dir.join(super::TRUTH), &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticParams {
        SyntheticParams {
            n_database: 40,
            n_queries: 10,
            no_overlap_queries: 3,
            landmarks: 400,
            dim: 16,
            parts: 5,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.database.encode().unwrap(), b.database.encode().unwrap());
        let c = generate_synthetic(&SyntheticParams { seed: 4, ..small() }).unwrap();
        assert_ne!(a.database, c.database);
    }

    #[test]
    fn valid_outputs() {
        let d = generate_synthetic(&small()).unwrap();
        d.database.validate().unwrap();
        d.queries.validate().unwrap();
        assert_eq!(d.database.models.len(), 40);
        assert_eq!(d.queries.models.len(), 13);
        assert_eq!(d.keypoints.len(), 53);
        for m in &d.database.models {
            assert!(m.parts.len() <= 6);
        }
        for t in d.truth.iter().filter(|t| t.no_overlap) {
            assert_eq!(t.shared_fraction, 0.0);
        }
    }

    #[test]
    fn noiseless_unperturbed_queries_copy_their_anchor() {
        let p = SyntheticParams {
            noise: 0.0,
            overlap_noise: 0.0,
            max_position_offset: 0.0,
            max_heading_offset: 0.0,
            ..small()
        };
        let d = generate_synthetic(&p).unwrap();
        for (q, t) in d.queries.models.iter().zip(&d.truth).filter(|(_, t)| !t.no_overlap) {
            assert_eq!(t.relevant_id, t.anchor_id);
            assert_eq!(t.shared_fraction, 1.0);
            let rel = &d.database.models[t.relevant_id.0 as usize];
            let qv: Vec<_> = q.parts.iter().map(|p| &p.vector).collect();
            let rv: Vec<_> = rel.parts.iter().map(|p| &p.vector).collect();
            assert_eq!(qv, rv);
        }
    }
}
