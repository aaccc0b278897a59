use std::path::Path;
use std::process::{Command, Output};

fn nbnn(args: &[&str]) -> Output {
    nbnn_env(args, &[])
}

fn nbnn_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nbnn"));
    cmd.args(args).env_remove("RUST_LOG");
    for (k, _) in std::env::vars() {
        if k.starts_with("NBNN_") {
            cmd.env_remove(k);
        }
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) {
    ok(&nbnn(&["synth", "--out", p(dir), "--seed", seed, "--n-database", "120", "--n-queries", "40"]));
}

#[test]
fn no_arguments_prints_help_and_fails() {
    let out = nbnn(&[]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("Usage"));
    assert!(text.contains("pca-train"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(nbnn(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(nbnn(&["synth", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(nbnn(&["synth"]).status.code(), Some(1));
    assert_eq!(nbnn(&["bench", "--data", "x", "--out", "y", "--methods", "bin99"]).status.code(), Some(1));
    assert_eq!(nbnn(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbnn(&["pca-train", "--pack", p(&dir.path().join("nope.nbnp")), "--out", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing input file"));
    assert!(out.stdout.is_empty());
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&nbnn(&["synth", "--out", p(a.path()), "--seed", "7"]));
    ok(&nbnn(&["synth", "--out", p(b.path()), "--seed", "7"]));
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn train_index_and_query() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(&d.join("data"), "1");
    let db = d.join("data/database.nbnp");
    let queries = d.join("data/queries.nbnp");
    let before = std::fs::read(&db).unwrap();

    ok(&nbnn(&["pca-train", "--pack", p(&db), "--dim", "128", "--out", p(&d.join("m.nbpc"))]));
    ok(&nbnn(&["proj-train", "--pack", p(&db), "--pca", p(&d.join("m.nbpc")), "--bits", "16", "--out", p(&d.join("b.nbbp"))]));
    ok(&nbnn(&["lib-build", "--bits", "16", "--out", p(&d.join("l.nblb"))]));
    ok(&nbnn(&[
        "index", "--pack", p(&db), "--pca", p(&d.join("m.nbpc")), "--proj", p(&d.join("b.nbbp")),
        "--library", p(&d.join("l.nblb")), "--out", p(&d.join("i.nbix")),
    ]));
    let out = ok(&nbnn(&[
        "query", "--index", p(&d.join("i.nbix")), "--pack", p(&queries), "--query-id", "1000000", "--top", "10",
    ]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 10);
    let mut last = f64::MIN;
    for l in &lines {
        let (id, dist) = l.split_once('\t').unwrap();
        id.parse::<u64>().unwrap();
        let dist: f64 = dist.parse().unwrap();
        assert!(dist >= last);
        last = dist;
    }
    let probe = ok(&nbnn(&[
        "query", "--index", p(&d.join("i.nbix")), "--pack", p(&queries), "--query-id", "1000000", "--top", "10",
        "--probe-radius", "16",
    ]));
    assert_eq!(probe, out);

    // Vector index over the image-level descriptors, all queries.
    ok(&nbnn(&["index", "--pack", p(&db), "--pca", p(&d.join("m.nbpc")), "--scope", "image", "--out", p(&d.join("v.nbix"))]));
    let all = ok(&nbnn(&["query", "--index", p(&d.join("v.nbix")), "--pack", p(&queries), "--top", "3", "--global"]));
    assert_eq!(all.lines().filter(|l| l.starts_with("# query")).count(), 40);
    assert_eq!(all.lines().count(), 40 * 4);

    assert_eq!(std::fs::read(&db).unwrap(), before);
}

#[test]
fn index_rejects_mismatched_models() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(&d.join("data"), "2");
    let db = d.join("data/database.nbnp");
    ok(&nbnn(&["proj-train", "--input-dim", "17", "--bits", "12", "--out", p(&d.join("b.nbbp"))]));
    let out = nbnn(&["index", "--pack", p(&db), "--proj", p(&d.join("b.nbbp")), "--out", p(&d.join("i.nbix"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ldi_of_an_image_with_itself() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "3");
    let kp = dir.path().join("keypoints.nbkp");
    let out = ok(&nbnn(&["ldi", "--keypoints", p(&kp), "--query", "5", "--relevant", "5"]));
    let fields: Vec<&str> = out.trim().split('\t').collect();
    assert_eq!(fields[..2], ["5", "5"]);
    let overlap: u32 = fields[2].parse().unwrap();
    assert!(overlap > 0);
    assert_eq!(fields[3].parse::<f64>().unwrap(), 1.0 / f64::from(overlap));
    assert_eq!(nbnn(&["ldi", "--keypoints", p(&kp), "--query", "5", "--relevant", "999999"]).status.code(), Some(2));
}

#[test]
fn bench_config_threads_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(&d.join("data"), "4");
    let cfg = d.join("run.conf");
    std::fs::write(&cfg, "# small run\nmethods = dcnn,bodw12\nn_d = 30\ntasks_per_range = 10\nseed = 1\n").unwrap();
    let run1 = d.join("run1");
    let run2 = d.join("run2");
    let s1 = ok(&nbnn(&["--config", p(&cfg), "--threads", "1", "bench", "--data", p(&d.join("data")), "--out", p(&run1)]));
    let s2 = ok(&nbnn_env(
        &["--config", p(&cfg), "bench", "--data", p(&d.join("data")), "--out", p(&run2)],
        &[("NBNN_THREADS", "3")],
    ));
    assert_eq!(s1, s2);
    assert!(s1.lines().any(|l| l.starts_with("bodw12\t")));
    for f in ["summary.json", "results.jsonl", "tasks.jsonl", "difficulty/dcnn.csv", "curves/bodw12_0-20.csv"] {
        assert_eq!(std::fs::read(run1.join(f)).unwrap(), std::fs::read(run2.join(f)).unwrap(), "{f}");
    }
    let summary = std::fs::read_to_string(run1.join("summary.json")).unwrap();
    assert!(summary.contains("\"pool_size\": 30"));

    // Flags beat the environment, which beats the file.
    let run3 = d.join("run3");
    ok(&nbnn_env(
        &["--config", p(&cfg), "bench", "--data", p(&d.join("data")), "--out", p(&run3), "--n-d", "20"],
        &[("NBNN_N_D", "25")],
    ));
    assert!(std::fs::read_to_string(run3.join("summary.json")).unwrap().contains("\"pool_size\": 20"));
    let run4 = d.join("run4");
    ok(&nbnn_env(
        &["--config", p(&cfg), "bench", "--data", p(&d.join("data")), "--out", p(&run4)],
        &[("NBNN_N_D", "25")],
    ));
    assert!(std::fs::read_to_string(run4.join("summary.json")).unwrap().contains("\"pool_size\": 25"));

    let rep = d.join("rep");
    let again = ok(&nbnn(&["report", "--run", p(&run1), "--out", p(&rep)]));
    assert_eq!(again, s1);
    assert_eq!(std::fs::read(rep.join("summary.json")).unwrap(), std::fs::read(run1.join("summary.json")).unwrap());

    let tasks = d.join("tasks.jsonl");
    ok(&nbnn(&["--config", p(&cfg), "tasks", "--data", p(&d.join("data")), "--out", p(&tasks)]));
    assert_eq!(std::fs::read(&tasks).unwrap(), std::fs::read(run1.join("tasks.jsonl")).unwrap());
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "colour = blue\n").unwrap();
    assert_eq!(nbnn(&["--config", p(&cfg), "synth", "--out", "x"]).status.code(), Some(1));
    std::fs::write(&cfg, "seed = seven\n").unwrap();
    let out = nbnn(&["--config", p(&cfg), "synth", "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(nbnn_env(&["synth", "--out", p(&dir.path().join("d"))], &[("NBNN_SEED", "x")]).status.code(), Some(1));
}
