//! Benchmark execution: tasks, overlap, per-method ranking.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sample_tasks, LocalizationTask, TaskParams};
use crate::index::{ExperienceIndex, IndexConfig, QueryMode};
use crate::overlap::keypoints::{load_keypoints, KeypointSet};
use crate::overlap::{ldi, overlap, rank_tasks, Ldi, OverlapMode, OverlapParams, RankRange};
use crate::scene::{load_pack, load_poses, DescriptorPack, ImageId, SceneModel, Viewpoint};

use super::methods::{MethodConfig, SharedModels};
use super::{DATABASE_PACK, DATABASE_POSES, KEYPOINTS, QUERY_PACK, QUERY_POSES};

/// Everything a benchmark run reads.
#[derive(Clone, Debug)]
pub struct BenchDataset {
    pub database: DescriptorPack,
    pub queries: DescriptorPack,
    pub database_poses: Vec<(ImageId, Viewpoint)>,
    pub query_poses: Vec<(ImageId, Viewpoint)>,
    pub keypoints: BTreeMap<ImageId, KeypointSet>,
}

impl BenchDataset {
    pub fn from_synthetic(d: &super::synthetic::SyntheticDataset) -> Self {
        Self {
            database_poses: d.database.poses(),
            query_poses: d.queries.poses(),
            database: d.database.clone(),
            queries: d.queries.clone(),
            keypoints: d.keypoints.iter().map(|k| (k.image_id, k.clone())).collect(),
        }
    }

    /// Reads the standard dataset files from `dir`; a missing file is
    /// reported by name.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let database = load_pack(dir.join(DATABASE_PACK))?;
        let queries = load_pack(dir.join(QUERY_PACK))?;
        let database_poses = load_poses(dir.join(DATABASE_POSES))?;
        let query_poses = load_poses(dir.join(QUERY_POSES))?;
        let keypoints = load_keypoints(dir.join(KEYPOINTS))?
            .into_iter()
            .map(|k| (k.image_id, k))
            .collect();
        Ok(Self {
            database,
            queries,
            database_poses,
            query_poses,
            keypoints,
        })
    }

    fn keypoints_of(&self, id: ImageId) -> Result<&KeypointSet> {
        self.keypoints
            .get(&id)
            .ok_or_else(|| Error::Validation(format!("no keypoints for image {id}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub methods: Vec<MethodConfig>,
    pub ranges: Vec<RankRange>,
    pub tasks_per_range: usize,
    pub task: TaskParams,
    pub overlap_mode: OverlapMode,
    pub ratio: f64,
    pub n_p: usize,
    /// Hamming probe radius for bag-of-parts binary methods; exact when unset.
    pub probe_radius: Option<u32>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: MethodConfig::ALL.to_vec(),
            ranges: RankRange::standard().to_vec(),
            tasks_per_range: 100,
            task: TaskParams::default(),
            overlap_mode: OverlapMode::Consensus,
            ratio: 0.8,
            n_p: 1,
            probe_radius: None,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn overlap_params(&self) -> OverlapParams {
        OverlapParams {
            mode: self.overlap_mode,
            ratio: self.ratio,
            ..Default::default()
        }
    }
}

/// Rank of one task's relevant image under one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub method: MethodConfig,
    pub query_id: ImageId,
    pub relevant_id: ImageId,
    pub overlap: u32,
    pub ldi: Ldi,
    pub difficulty_rank_pct: f64,
    /// One-based rank among the task's candidates.
    pub rank: usize,
    pub pool: usize,
}

/// Samples tasks for every query and fills in overlap and LDI. Queries
/// without enough destructors are returned separately.
pub fn build_tasks(
    data: &BenchDataset,
    params: &TaskParams,
    overlap_params: &OverlapParams,
    seed: u64,
) -> Result<(Vec<LocalizationTask>, Vec<ImageId>)> {
    let (tasks, skipped) = sample_tasks(&data.query_poses, &data.database_poses, seed, params)?;
    let tasks = tasks
        .into_par_iter()
        .map(|mut t| {
            let o = overlap(
                data.keypoints_of(t.query_id)?,
                data.keypoints_of(t.relevant_id)?,
                overlap_params,
            )?;
            t.overlap = Some(o);
            t.ldi = Some(ldi(o));
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rank_tasks(&tasks)?, skipped))
}

/// One-based rank of the relevant image among the task's candidates.
pub fn candidate_rank(list: &crate::index::RankedList, task: &LocalizationTask) -> Result<usize> {
    let pos: HashMap<ImageId, usize> = list.entries.iter().enumerate().map(|(i, e)| (e.image_id, i)).collect();
    let at = |id: ImageId| {
        pos.get(&id)
            .copied()
            .ok_or_else(|| Error::Validation(format!("image {id} is not indexed")))
    };
    let rel = at(task.relevant_id)?;
    let mut ahead = 0;
    for id in &task.destructor_ids {
        if at(*id)? < rel {
            ahead += 1;
        }
    }
    Ok(ahead + 1)
}

/// Ranks every task with one method.
pub fn evaluate_method(
    data: &BenchDataset,
    tasks: &[LocalizationTask],
    models: &SharedModels,
    method: MethodConfig,
    config: &BenchConfig,
) -> Result<Vec<TaskResult>> {
    let index = ExperienceIndex::build(
        models.encoder(method)?,
        IndexConfig {
            scope: method.scope(),
            n_p: config.n_p,
            library: None,
        },
        &data.database.models,
    )?;
    let queries: HashMap<ImageId, &SceneModel> = data.queries.models.iter().map(|m| (m.image_id, m)).collect();
    let mode = match (method.bits(), config.probe_radius) {
        (Some(_), Some(r)) => QueryMode::Probe(r),
        _ => QueryMode::Exact,
    };
    tasks
        .par_iter()
        .map(|t| {
            let scene = queries
                .get(&t.query_id)
                .ok_or_else(|| Error::Validation(format!("no descriptors for query {}", t.query_id)))?;
            let q = index.encode(scene)?;
            let list = match method.scope() {
                crate::index::Scope::ImageLevel => index.query_global(&q)?,
                crate::index::Scope::AllParts => index.query_nbnn(&q, mode)?,
            };
            let missing = |what: &str| Error::Validation(format!("task for query {} has no {what}", t.query_id));
            Ok(TaskResult {
                method,
                query_id: t.query_id,
                relevant_id: t.relevant_id,
                overlap: t.overlap.ok_or_else(|| missing("overlap"))?,
                ldi: t.ldi.ok_or_else(|| missing("ldi"))?,
                difficulty_rank_pct: t.difficulty_rank_pct.ok_or_else(|| missing("difficulty rank"))?,
                rank: candidate_rank(&list, t)?,
                pool: t.destructor_ids.len() + 1,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct BenchOutcome {
    pub tasks: Vec<LocalizationTask>,
    pub skipped: Vec<ImageId>,
    pub results: Vec<TaskResult>,
    pub models: SharedModels,
}

/// Runs every configured method over every sampled task.
pub fn run_bench(data: &BenchDataset, config: &BenchConfig) -> Result<BenchOutcome> {
    if config.methods.is_empty() {
        return Err(Error::Validation("no methods selected".into()));
    }
    for r in &config.ranges {
        RankRange::new(r.min_pct, r.max_pct)?;
    }
    let (tasks, skipped) = build_tasks(data, &config.task, &config.overlap_params(), config.seed)?;
    if tasks.is_empty() {
        return Err(Error::InsufficientData("no query has enough destructors".into()));
    }
    log::info!("{} tasks sampled, {} queries skipped", tasks.len(), skipped.len());
    let models = SharedModels::train(&data.database, &config.methods, config.seed)?;
    let mut results = Vec::new();
    for m in &config.methods {
        log::info!("evaluating {m}");
        results.extend(evaluate_method(data, &tasks, &models, *m, config)?);
    }
    Ok(BenchOutcome {
        tasks,
        skipped,
        results,
        models,
    })
}
