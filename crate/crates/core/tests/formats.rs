use std::path::Path;

use nbnn_core::bench::report::{read_results, read_run_tasks, RESULTS_FILE, SUMMARY_FILE};
use nbnn_core::bench::{
    generate_synthetic, regenerate_report, run_bench, write_bench, BenchConfig, BenchDataset, MethodConfig,
    SyntheticParams,
};
use nbnn_core::binary::{load_projection, save_projection, train_projection};
use nbnn_core::index::{
    load_index, load_library, save_index, save_library, Encoder, ExperienceIndex, IndexConfig, Library, QueryMode,
};
use nbnn_core::overlap::{load_keypoints, save_keypoints};
use nbnn_core::pca::{load_pca, save_pca, train_pca};
use nbnn_core::scene::{load_pack, load_poses, save_pack, save_poses};
use nbnn_core::Error;

fn small(seed: u64) -> SyntheticParams {
    SyntheticParams {
        n_database: 150,
        n_queries: 40,
        no_overlap_queries: 5,
        dim: 32,
        parts: 6,
        landmarks: 600,
        seed,
        ..Default::default()
    }
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn every_model_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&small(1)).unwrap();

    let pack_path = dir.path().join("db.nbnp");
    save_pack(&data.database, &pack_path).unwrap();
    assert_eq!(load_pack(&pack_path).unwrap(), data.database);

    let kp_path = dir.path().join("kp.nbkp");
    save_keypoints(&data.keypoints, &kp_path).unwrap();
    assert_eq!(load_keypoints(&kp_path).unwrap(), data.keypoints);

    let poses = data.database.poses();
    let pose_path = dir.path().join("poses.csv");
    save_poses(&poses, &pose_path).unwrap();
    assert_eq!(load_poses(&pose_path).unwrap(), poses);

    let vectors: Vec<&[f32]> = data.database.models.iter().flat_map(|m| m.parts.iter().map(|p| p.vector.as_slice())).collect();
    let pca = train_pca(&vectors, 16).unwrap();
    let pca_path = dir.path().join("m.nbpc");
    save_pca(&pca, &pca_path).unwrap();
    assert_eq!(load_pca(&pca_path).unwrap(), pca);

    let training: Vec<Vec<f64>> = vectors.iter().map(|v| pca.project(v).unwrap()).collect();
    let proj = train_projection(4, 16, 12, &training).unwrap();
    let proj_path = dir.path().join("b.nbbp");
    save_projection(&proj, &proj_path).unwrap();
    assert_eq!(load_projection(&proj_path).unwrap(), proj);

    let encoder = Encoder::Binary { pca: Some(pca), projection: proj };
    let codes = vectors.iter().filter_map(|v| match encoder.encode_vector(v).unwrap() {
        nbnn_core::index::FeatureValue::Code(c) => Some(c),
        _ => None,
    });
    let lib = Library::from_codes(12, codes).unwrap();
    let lib_path = dir.path().join("l.nblb");
    save_library(&lib, &lib_path).unwrap();
    assert_eq!(load_library(&lib_path).unwrap(), lib);

    let config = IndexConfig { n_p: 2, library: Some(lib), ..Default::default() };
    let index = ExperienceIndex::build(encoder, config, &data.database.models).unwrap();
    let index_path = dir.path().join("i.nbix");
    save_index(&index, &index_path).unwrap();
    let loaded = load_index(&index_path).unwrap();
    assert_eq!(loaded, index);
    let q = loaded.encode(&data.queries.models[0]).unwrap();
    assert_eq!(loaded.query_nbnn(&q, QueryMode::Exact).unwrap(), index.query_nbnn(&q, QueryMode::Exact).unwrap());
}

#[test]
fn loaders_reject_foreign_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.nbnp");
    assert!(matches!(load_pack(&missing), Err(Error::MissingFile(p)) if p == missing));

    let pca = train_pca(&[vec![0.0f64, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]], 1).unwrap();
    let pca_path = dir.path().join("m.nbpc");
    save_pca(&pca, &pca_path).unwrap();
    assert!(matches!(load_pack(&pca_path), Err(Error::Format(_))));
    assert!(load_index(&pca_path).is_err());
    assert!(load_projection(&pca_path).is_err());
    assert!(load_library(&pca_path).is_err());
    assert!(load_keypoints(&pca_path).is_err());

    let mut cut = bytes(&pca_path);
    cut.truncate(cut.len() - 3);
    std::fs::write(&pca_path, cut).unwrap();
    assert!(load_pca(&pca_path).is_err());
}

#[test]
fn dataset_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&small(2)).unwrap();
    data.save(dir.path()).unwrap();
    let loaded = BenchDataset::load(dir.path()).unwrap();
    let direct = BenchDataset::from_synthetic(&data);
    assert_eq!(loaded.database, direct.database);
    assert_eq!(loaded.queries, direct.queries);
    assert_eq!(loaded.database_poses, direct.database_poses);
    assert_eq!(loaded.query_poses, direct.query_poses);
    assert_eq!(loaded.keypoints, direct.keypoints);

    std::fs::remove_file(dir.path().join("keypoints.nbkp")).unwrap();
    assert!(matches!(BenchDataset::load(dir.path()), Err(Error::MissingFile(_))));
}

fn config() -> BenchConfig {
    BenchConfig {
        methods: vec![MethodConfig::Dcnn, MethodConfig::Pca(128), MethodConfig::Bin(12), MethodConfig::Bodw(16), MethodConfig::Bodf],
        tasks_per_range: 10,
        task: nbnn_core::geometry::TaskParams { n_d: 30, ..Default::default() },
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn bench_run_is_reproducible_and_report_regenerates() {
    let data = BenchDataset::from_synthetic(&generate_synthetic(&small(3)).unwrap());
    let cfg = config();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| run_bench(&data, &cfg)).unwrap();
    let b = four.install(|| run_bench(&data, &cfg)).unwrap();
    assert_eq!(a.results, b.results);
    assert_eq!(a.tasks, b.tasks);
    assert_eq!(a.results.len(), a.tasks.len() * cfg.methods.len());
    // pca128 is capped to the 32-dim synthetic descriptors.
    assert_eq!(a.models.effective_dim(MethodConfig::Pca(128)), Some(32));

    let run = tempfile::tempdir().unwrap();
    let report = write_bench(&a, &cfg, run.path()).unwrap();
    assert_eq!(read_results(run.path().join(RESULTS_FILE)).unwrap(), a.results);
    assert_eq!(read_run_tasks(run.path()).unwrap(), a.tasks);

    let out = tempfile::tempdir().unwrap();
    let again = regenerate_report(run.path(), out.path()).unwrap();
    assert_eq!(again, report);
    assert_eq!(bytes(&run.path().join(SUMMARY_FILE)), bytes(&out.path().join(SUMMARY_FILE)));
    let curve = std::fs::read_to_string(out.path().join("curves").join("bodw16_0-100.csv")).unwrap();
    assert!(curve.starts_with("x,y\n1,"));
    assert_eq!(curve.lines().count(), 31);
    let table = std::fs::read_to_string(out.path().join("difficulty").join("dcnn.csv")).unwrap();
    assert!(table.starts_with("overlap_bucket,decile_0,"));
    let chance = std::fs::read_to_string(out.path().join("curves").join("chance.csv")).unwrap();
    assert_eq!(chance.lines().nth(1).unwrap().split(',').next(), Some("1"));

    let summary: serde_json::Value = serde_json::from_slice(&bytes(&out.path().join(SUMMARY_FILE))).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["methods"].as_array().unwrap().len(), cfg.methods.len());
}

#[test]
fn bench_rejects_empty_method_list() {
    let data = BenchDataset::from_synthetic(&generate_synthetic(&small(4)).unwrap());
    let cfg = BenchConfig { methods: vec![], ..config() };
    assert!(run_bench(&data, &cfg).is_err());
}
