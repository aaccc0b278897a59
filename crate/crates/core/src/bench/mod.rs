//! Benchmark harness: synthetic data, the method matrix, recognition metrics
//! and report emission.

pub mod methods;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod synthetic;

pub use methods::{parse_methods, MethodConfig, SharedModels};
pub use metrics::{recognition_curve, CurvePoint, DifficultyRow};
pub use report::{build_report, regenerate_report, write_bench, Report, RunInfo, Summary};
pub use runner::{build_tasks, evaluate_method, run_bench, BenchConfig, BenchDataset, BenchOutcome, TaskResult};
pub use synthetic::{generate_synthetic, QueryTruth, SyntheticDataset, SyntheticParams};

pub const DATABASE_PACK: &str = "database.nbnp";
pub const QUERY_PACK: &str = "queries.nbnp";
pub const DATABASE_POSES: &str = "database_poses.csv";
pub const QUERY_POSES: &str = "query_poses.csv";
pub const KEYPOINTS: &str = "keypoints.nbkp";
pub const TRUTH: &str = "truth.csv";
