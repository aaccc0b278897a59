//! Report files: per-(method, range) curves, difficulty tables and a JSON summary.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{read_file, write_file};
use crate::error::{Error, Result};
use crate::geometry::{write_tasks, LocalizationTask};
use crate::overlap::RankRange;

use super::methods::{derive_seed, MethodConfig};
use super::metrics::{
    area_under_curve, chance_curve, normalized_rank, perf_vs_difficulty, recognition_curve, spearman, CurvePoint,
    DifficultyRow,
};
use super::runner::{BenchConfig, BenchOutcome, TaskResult};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;
pub const RESULTS_FILE: &str = "results.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const TASKS_FILE: &str = "tasks.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// What a report needs besides the per-task results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config: BenchConfig,
    pub n_tasks: usize,
    pub skipped: Vec<crate::scene::ImageId>,
    /// PCA width each compressing method actually used.
    pub effective_dims: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeSummary {
    pub range: String,
    pub n_tasks: usize,
    pub auc: f64,
    pub top1: f64,
    /// Recognition rate at a tenth of the pool.
    pub top10pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: MethodConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effective_dim: Option<usize>,
    pub n_tasks: usize,
    pub mean_normalized_rank: f64,
    /// Between overlap count and normalized relevant rank; negative when
    /// easier tasks rank better.
    pub spearman_overlap_rank: Option<f64>,
    pub ranges: Vec<RangeSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub seed: u64,
    pub pool_size: usize,
    pub n_tasks: usize,
    pub n_skipped: usize,
    pub chance_auc: f64,
    pub methods: Vec<MethodSummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub summary: Summary,
    pub curves: Vec<(MethodConfig, RankRange, Vec<CurvePoint>)>,
    pub tables: Vec<(MethodConfig, Vec<DifficultyRow>)>,
    pub pool: usize,
}

/// The tasks of one difficulty range used for its curve: all of them, or a
/// seeded subset of `limit` when there are more. The subset depends only on
/// query ids, so every method sees the same tasks.
pub fn select_range<'a>(results: &[&'a TaskResult], range: RankRange, limit: usize, seed: u64) -> Vec<&'a TaskResult> {
    let mut inside: Vec<&TaskResult> = results
        .iter()
        .copied()
        .filter(|r| range.contains(r.difficulty_rank_pct))
        .collect();
    inside.sort_by_key(|r| r.query_id);
    if inside.len() <= limit {
        return inside;
    }
    let tag = ((range.min_pct * 1000.0) as u64) << 32 | (range.max_pct * 1000.0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag));
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, inside.len(), limit).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| inside[i]).collect()
}

pub fn build_report(results: &[TaskResult], run: &RunInfo) -> Result<Report> {
    let config = &run.config;
    let pool = config.task.n_d;
    if let Some(r) = results.iter().find(|r| r.pool != pool) {
        return Err(Error::Validation(format!(
            "result for query {} has pool {}, run used {pool}",
            r.query_id, r.pool
        )));
    }
    let mut curves = Vec::new();
    let mut tables = Vec::new();
    let mut methods = Vec::new();
    for &m in &config.methods {
        let mine: Vec<&TaskResult> = results.iter().filter(|r| r.method == m).collect();
        if mine.is_empty() {
            continue;
        }
        let mut ranges = Vec::new();
        for &range in &config.ranges {
            let chosen = select_range(&mine, range, config.tasks_per_range, config.seed);
            if chosen.is_empty() {
                log::warn!("{m}: no tasks in range {range}");
                ranges.push(RangeSummary {
                    range: range.to_string(),
                    n_tasks: 0,
                    auc: 0.0,
                    top1: 0.0,
                    top10pct: 0.0,
                });
                continue;
            }
            let ranks: Vec<usize> = chosen.iter().map(|r| r.rank).collect();
            let curve = recognition_curve(&ranks, pool)?;
            ranges.push(RangeSummary {
                range: range.to_string(),
                n_tasks: chosen.len(),
                auc: area_under_curve(&curve),
                top1: curve[0].y,
                top10pct: curve[(pool / 10).max(1) - 1].y,
            });
            curves.push((m, range, curve));
        }
        let triples: Vec<(u32, usize, usize)> = mine.iter().map(|r| (r.overlap, r.rank, r.pool)).collect();
        tables.push((m, perf_vs_difficulty(&triples)));
        let overlaps: Vec<f64> = mine.iter().map(|r| f64::from(r.overlap)).collect();
        let norm: Vec<f64> = mine.iter().map(|r| normalized_rank(r.rank, r.pool)).collect();
        methods.push(MethodSummary {
            method: m,
            effective_dim: run.effective_dims.get(&m.name()).copied(),
            n_tasks: mine.len(),
            mean_normalized_rank: norm.iter().sum::<f64>() / norm.len() as f64,
            spearman_overlap_rank: spearman(&overlaps, &norm),
            ranges,
        });
    }
    Ok(Report {
        summary: Summary {
            schema_version: SUMMARY_SCHEMA_VERSION,
            seed: config.seed,
            pool_size: pool,
            n_tasks: run.n_tasks,
            n_skipped: run.skipped.len(),
            chance_auc: area_under_curve(&chance_curve(pool)),
            methods,
        },
        curves,
        tables,
        pool,
    })
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn curve_csv(points: &[CurvePoint]) -> Result<Vec<u8>> {
    csv_bytes(points.iter().map(|p| (p.x, p.y)).collect::<Vec<_>>()).map(|b| [b"x,y\n".as_slice(), &b].concat())
}

fn table_csv(rows: &[DifficultyRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["overlap_bucket".to_string()];
    header.extend((0..10).map(|i| format!("decile_{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.overlap_bucket.clone()];
        rec.extend(r.deciles.iter().map(|d| d.to_string()));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes curves, tables and the summary into `dir`.
pub fn write_report(report: &Report, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("curves"))?;
    std::fs::create_dir_all(dir.join("difficulty"))?;
    for (m, range, curve) in &report.curves {
        write_file(&dir.join("curves").join(format!("{m}_{range}.csv")), &curve_csv(curve)?)?;
    }
    write_file(&dir.join("curves").join("chance.csv"), &curve_csv(&chance_curve(report.pool))?)?;
    for (m, rows) in &report.tables {
        write_file(&dir.join("difficulty").join(format!("{m}.csv")), &table_csv(rows)?)?;
    }
    let mut json = serde_json::to_vec_pretty(&report.summary)?;
    json.push(b'\n');
    write_file(&dir.join(SUMMARY_FILE), &json)
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for t in items {
        serde_json::to_writer(&mut out, t)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn run_info(outcome: &BenchOutcome, config: &BenchConfig) -> RunInfo {
    let effective_dims = config
        .methods
        .iter()
        .filter_map(|m| outcome.models.effective_dim(*m).map(|d| (m.name(), d)))
        .collect();
    RunInfo {
        config: config.clone(),
        n_tasks: outcome.tasks.len(),
        skipped: outcome.skipped.clone(),
        effective_dims,
    }
}

/// Writes the raw run (tasks, results, run info) and the derived report.
pub fn write_bench(outcome: &BenchOutcome, config: &BenchConfig, dir: impl AsRef<Path>) -> Result<Report> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let run = run_info(outcome, config);
    write_tasks(&outcome.tasks, dir.join(TASKS_FILE))?;
    write_file(&dir.join(RESULTS_FILE), &jsonl(&outcome.results)?)?;
    let mut json = serde_json::to_vec_pretty(&run)?;
    json.push(b'\n');
    write_file(&dir.join(RUN_FILE), &json)?;
    let report = build_report(&outcome.results, &run)?;
    write_report(&report, dir)?;
    Ok(report)
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<TaskResult>> {
    let text = String::from_utf8(read_file(path.as_ref())?)
        .map_err(|e| Error::Format(format!("results file is not UTF-8: {e}")))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Rebuilds the report of a finished run directory from its raw results.
pub fn regenerate_report(run_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<Report> {
    let run_dir = run_dir.as_ref();
    let run: RunInfo = serde_json::from_slice(&read_file(&run_dir.join(RUN_FILE))?)?;
    let results = read_results(run_dir.join(RESULTS_FILE))?;
    let report = build_report(&results, &run)?;
    write_report(&report, out_dir)?;
    Ok(report)
}

/// Tasks with their overlap-derived difficulty, as written by a run.
pub fn read_run_tasks(run_dir: impl AsRef<Path>) -> Result<Vec<LocalizationTask>> {
    crate::geometry::read_tasks(run_dir.as_ref().join(TASKS_FILE))
}
