//! `nbnn`: train models, build and query indexes, measure localization
//! difficulty and run the retrieval benchmark.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use nbnn_core::bench::{
    self, build_tasks, generate_synthetic, parse_methods, regenerate_report, run_bench, write_bench, BenchConfig,
    BenchDataset, SyntheticParams,
};
use nbnn_core::binary::{load_projection, save_projection, train_projection};
use nbnn_core::geometry::{write_tasks, TaskParams};
use nbnn_core::index::{
    load_index, load_library, save_index, save_library, Encoder, ExperienceIndex, FeatureValue, IndexConfig, Library,
    QueryMode, Scope,
};
use nbnn_core::overlap::{ldi, load_keypoints, overlap, Ldi, OverlapMode, OverlapParams};
use nbnn_core::pca::{load_pca, save_pca, train_pca, PcaModel};
use nbnn_core::scene::{load_pack, DescriptorPack, ImageId};

use config::Settings;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] nbnn_core::Error),
    #[error("cannot write output: {0}")]
    Output(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "nbnn", version, about = "Place recognition with NBNN over compressed part descriptors")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Flat `key = value` settings file; flags and NBNN_* variables override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a PCA model on a descriptor pack.
    PcaTrain(PcaTrainArgs),
    /// Train a random-projection binarizer.
    ProjTrain(ProjTrainArgs),
    /// Build a feature library for a code width.
    LibBuild(LibBuildArgs),
    /// Build an experience index over a database pack.
    Index(IndexArgs),
    /// Rank indexed images for each scene of a query pack.
    Query(QueryArgs),
    /// Overlap and localization difficulty of one image pair.
    Ldi(LdiArgs),
    /// Sample localization tasks and rank them by difficulty.
    Tasks(TasksArgs),
    /// Run the benchmark over every configured method.
    Bench(BenchArgs),
    /// Rebuild curves, tables and summary from a finished bench run.
    Report(ReportArgs),
    /// Write a deterministic synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct PcaTrainArgs {
    #[arg(long)]
    pack: PathBuf,
    /// Output dimension (128, 256 and 512 are the standard widths).
    #[arg(long)]
    dim: Option<usize>,
    /// Train on `parts` (image-level and parts jointly) or `image` descriptors only.
    #[arg(long)]
    scope: Option<Scope>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProjTrainArgs {
    /// Training descriptors; thresholds are their medians.
    #[arg(long)]
    pack: Option<PathBuf>,
    /// Apply this PCA model before projecting.
    #[arg(long)]
    pca: Option<PathBuf>,
    /// Input dimension when training without a pack.
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LibBuildArgs {
    #[arg(long)]
    bits: Option<u32>,
    /// Build an explicit library from the codes of this pack instead of the
    /// implicit full one.
    #[arg(long, requires = "proj")]
    pack: Option<PathBuf>,
    #[arg(long)]
    pca: Option<PathBuf>,
    #[arg(long)]
    proj: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct IndexArgs {
    #[arg(long)]
    pack: PathBuf,
    #[arg(long)]
    pca: Option<PathBuf>,
    /// Binarize with this projection model.
    #[arg(long)]
    proj: Option<PathBuf>,
    /// Explicit library; binary indexes default to the implicit full library.
    #[arg(long, requires = "proj")]
    library: Option<PathBuf>,
    #[arg(long)]
    scope: Option<Scope>,
    #[arg(long)]
    n_p: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    pack: PathBuf,
    /// Lines printed per query; all indexed images when omitted.
    #[arg(long)]
    top: Option<usize>,
    /// Only this query scene of the pack.
    #[arg(long)]
    query_id: Option<u64>,
    /// Hamming probe radius (binary indexes only).
    #[arg(long)]
    probe_radius: Option<u32>,
    /// Rank by image-level descriptors only.
    #[arg(long)]
    global: bool,
}

#[derive(Debug, Args)]
struct LdiArgs {
    /// Keypoint file holding both images.
    #[arg(long)]
    keypoints: PathBuf,
    /// Keypoint file for the relevant image, when it is not in `--keypoints`.
    #[arg(long)]
    relevant_keypoints: Option<PathBuf>,
    #[arg(long)]
    query: u64,
    #[arg(long)]
    relevant: u64,
    #[command(flatten)]
    overlap: OverlapArgs,
}

#[derive(Debug, Args)]
struct OverlapArgs {
    /// consensus, ransac or raw.
    #[arg(long)]
    overlap_mode: Option<OverlapMode>,
    /// Nearest-neighbor ratio test threshold.
    #[arg(long)]
    ratio: Option<f64>,
}

#[derive(Debug, Args)]
struct TaskArgs {
    /// Candidates per task: the relevant image plus destructors.
    #[arg(long)]
    n_d: Option<usize>,
    /// Heading threshold for destructors, degrees.
    #[arg(long)]
    t_theta: Option<f64>,
    /// Viewing-triangle apex angle, degrees.
    #[arg(long)]
    apex_angle: Option<f64>,
    /// Viewing-triangle leg length.
    #[arg(long)]
    leg: Option<f64>,
}

#[derive(Debug, Args)]
struct TasksArgs {
    /// Dataset directory (packs, poses, keypoints).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output task file (JSON lines).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    overlap: OverlapArgs,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated method names, or `all`.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tasks_per_range: Option<usize>,
    #[arg(long)]
    n_p: Option<usize>,
    /// Hamming probe radius for bag-of-parts binary methods.
    #[arg(long)]
    probe_radius: Option<u32>,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    overlap: OverlapArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory written by `bench`.
    #[arg(long)]
    run: PathBuf,
    /// Report directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_database: Option<usize>,
    #[arg(long)]
    n_queries: Option<usize>,
    /// Extra queries facing away from everything their anchor sees.
    #[arg(long)]
    no_overlap_queries: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    if let Some(n) = settings.get::<usize>("threads", cli.threads)? {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))?;
    }
    match cli.command {
        Command::PcaTrain(a) => pca_train(a, &settings),
        Command::ProjTrain(a) => proj_train(a, &settings),
        Command::LibBuild(a) => lib_build(a, &settings),
        Command::Index(a) => index(a, &settings),
        Command::Query(a) => query(a, &settings),
        Command::Ldi(a) => ldi_cmd(a, &settings),
        Command::Tasks(a) => tasks(a, &settings),
        Command::Bench(a) => bench_cmd(a, &settings),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a, &settings),
    }
}

fn training_vectors(pack: &DescriptorPack, scope: Scope) -> Vec<&[f32]> {
    pack.models
        .iter()
        .flat_map(|m| match scope {
            Scope::ImageLevel => vec![m.image_level().vector.as_slice()],
            Scope::AllParts => m.parts.iter().map(|p| p.vector.as_slice()).collect(),
        })
        .collect()
}

fn pca_train(a: PcaTrainArgs, s: &Settings) -> Result<()> {
    let out: PathBuf = s.require("out", a.out)?;
    let dim = s.get_or("pca_dim", a.dim, 128)?;
    let scope = s.get_or("scope", a.scope, Scope::AllParts)?;
    if dim == 0 {
        return Err(CliError::Usage("--dim must be positive".into()));
    }
    let pack = load_pack(&a.pack)?;
    let vectors = training_vectors(&pack, scope);
    let cap = pack.dim.min(vectors.len().saturating_sub(1));
    let k = if dim > cap && cap > 0 {
        log::warn!("PCA width {dim} exceeds the data ({} dims, {} vectors); using {cap}", pack.dim, vectors.len());
        cap
    } else {
        dim
    };
    let model = train_pca(&vectors, k)?;
    if model.rank_deficient {
        log::warn!("training data spans fewer than {k} dimensions");
    }
    save_pca(&model, &out)?;
    log::info!("PCA {} -> {} written to {}", model.input_dim, model.output_dim, out.display());
    Ok(())
}

fn project_all(pca: Option<&PcaModel>, vectors: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
    Ok(vectors
        .iter()
        .map(|v| match pca {
            Some(p) => p.project(v),
            None => Ok(v.iter().map(|&x| f64::from(x)).collect()),
        })
        .collect::<nbnn_core::Result<_>>()?)
}

fn proj_train(a: ProjTrainArgs, s: &Settings) -> Result<()> {
    let out: PathBuf = s.require("out", a.out)?;
    let bits = s.require("bits", a.bits)?;
    let seed = s.get_or("seed", a.seed, 0)?;
    let pca = a.pca.as_deref().map(load_pca).transpose()?;
    let (input_dim, training) = match &a.pack {
        Some(p) => {
            let pack = load_pack(p)?;
            let training = project_all(pca.as_ref(), &training_vectors(&pack, Scope::AllParts))?;
            (pca.as_ref().map_or(pack.dim, |m| m.output_dim), training)
        }
        None => {
            let dim = match (&pca, a.input_dim) {
                (Some(m), _) => m.output_dim,
                (None, Some(d)) => d,
                (None, None) => return Err(CliError::Usage("give --pack, --pca or --input-dim".into())),
            };
            (dim, Vec::new())
        }
    };
    let model = train_projection(seed, input_dim, bits, &training)?;
    save_projection(&model, &out)?;
    log::info!("{bits}-bit projection from {input_dim} dims written to {}", out.display());
    Ok(())
}

fn encoder_from(pca: Option<&Path>, proj: Option<&Path>, dim: usize) -> Result<Encoder> {
    let pca = pca.map(load_pca).transpose()?;
    let encoder = match (pca, proj) {
        (pca, Some(p)) => Encoder::Binary {
            pca,
            projection: load_projection(p)?,
        },
        (Some(p), None) => Encoder::Pca(p),
        (None, None) => Encoder::Raw { dim },
    };
    encoder.check()?;
    if encoder.input_dim() != dim {
        return Err(nbnn_core::Error::DimensionMismatch {
            expected: encoder.input_dim(),
            actual: dim,
        }
        .into());
    }
    Ok(encoder)
}

fn lib_build(a: LibBuildArgs, s: &Settings) -> Result<()> {
    let out: PathBuf = s.require("out", a.out)?;
    let lib = match &a.pack {
        None => Library::implicit(s.require("bits", a.bits)?)?,
        Some(p) => {
            let pack = load_pack(p)?;
            let encoder = encoder_from(a.pca.as_deref(), a.proj.as_deref(), pack.dim)?;
            let bits = encoder.bits().expect("binary encoder");
            if let Some(b) = s.get::<u32>("bits", a.bits)? {
                if b != bits {
                    return Err(CliError::Usage(format!("--bits {b} disagrees with the {bits}-bit projection")));
                }
            }
            let mut codes = Vec::new();
            for v in training_vectors(&pack, Scope::AllParts) {
                if let FeatureValue::Code(c) = encoder.encode_vector(v)? {
                    codes.push(c);
                }
            }
            Library::from_codes(bits, codes)?
        }
    };
    save_library(&lib, &out)?;
    log::info!("{} library features written to {}", lib.len(), out.display());
    Ok(())
}

fn index(a: IndexArgs, s: &Settings) -> Result<()> {
    let out: PathBuf = s.require("out", a.out)?;
    let pack = load_pack(&a.pack)?;
    let encoder = encoder_from(a.pca.as_deref(), a.proj.as_deref(), pack.dim)?;
    let config = IndexConfig {
        scope: s.get_or("scope", a.scope, Scope::AllParts)?,
        n_p: s.get_or("n_p", a.n_p, 1)?,
        library: a.library.as_deref().map(load_library).transpose()?,
    };
    let index = ExperienceIndex::build(encoder, config, &pack.models)?;
    save_index(&index, &out)?;
    log::info!("{} images indexed into {}", index.len(), out.display());
    Ok(())
}

fn query(a: QueryArgs, s: &Settings) -> Result<()> {
    let index = load_index(&a.index)?;
    let pack = load_pack(&a.pack)?;
    let radius = s.get::<u32>("probe_radius", a.probe_radius)?;
    if radius.is_some() && a.global {
        return Err(CliError::Usage("--probe-radius does not apply to --global".into()));
    }
    let mode = radius.map_or(QueryMode::Exact, QueryMode::Probe);
    let scenes: Vec<_> = match a.query_id {
        Some(id) => {
            let m = pack
                .models
                .iter()
                .find(|m| m.image_id == ImageId(id))
                .ok_or(nbnn_core::Error::UnknownImage(id))?;
            vec![m]
        }
        None => pack.models.iter().collect(),
    };
    let stdout = std::io::stdout();
    let mut w = std::io::BufWriter::new(stdout.lock());
    for scene in &scenes {
        let q = index.encode(scene)?;
        let list = if a.global {
            index.query_global(&q)?
        } else {
            index.query_nbnn(&q, mode)?
        };
        if scenes.len() > 1 {
            writeln!(w, "# query {}", scene.image_id)?;
        }
        for e in list.entries.iter().take(a.top.unwrap_or(usize::MAX)) {
            writeln!(w, "{}\t{}", e.image_id, e.distance)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn overlap_params(a: &OverlapArgs, s: &Settings) -> Result<OverlapParams> {
    let d = OverlapParams::default();
    Ok(OverlapParams {
        mode: s.get_or("overlap_mode", a.overlap_mode, d.mode)?,
        ratio: s.get_or("ratio", a.ratio, d.ratio)?,
        ..d
    })
}

fn ldi_cmd(a: LdiArgs, s: &Settings) -> Result<()> {
    let params = overlap_params(&a.overlap, s)?;
    let mut sets = load_keypoints(&a.keypoints)?;
    if let Some(p) = &a.relevant_keypoints {
        sets.extend(load_keypoints(p)?);
    }
    let find = |id: u64| {
        sets.iter()
            .find(|k| k.image_id == ImageId(id))
            .ok_or(nbnn_core::Error::UnknownImage(id))
    };
    let o = overlap(find(a.query)?, find(a.relevant)?, &params)?;
    let l = match ldi(o) {
        Ldi::Finite(v) => v.to_string(),
        Ldi::NoOverlap => "no_overlap".into(),
    };
    println!("{}\t{}\t{o}\t{l}", a.query, a.relevant);
    Ok(())
}

fn task_params(a: &TaskArgs, s: &Settings) -> Result<TaskParams> {
    let d = TaskParams::default();
    let deg = |key: &str, flag: Option<f64>, default: f64| -> Result<f64> {
        Ok(s.get(key, flag)?.map_or(default, f64::to_radians))
    };
    Ok(TaskParams {
        n_d: s.get_or("n_d", a.n_d, d.n_d)?,
        t_theta: deg("t_theta", a.t_theta, d.t_theta)?,
        apex_angle: deg("apex_angle", a.apex_angle, d.apex_angle)?,
        leg: s.get_or("leg", a.leg, d.leg)?,
    })
}

fn tasks(a: TasksArgs, s: &Settings) -> Result<()> {
    let data: PathBuf = s.require("data", a.data)?;
    let out: PathBuf = s.require("out", a.out)?;
    let seed = s.get_or("seed", a.seed, 0)?;
    let params = task_params(&a.task, s)?;
    let dataset = BenchDataset::load(&data)?;
    let (tasks, skipped) = build_tasks(&dataset, &params, &overlap_params(&a.overlap, s)?, seed)?;
    if !skipped.is_empty() {
        log::warn!("{} queries have too few destructors and were skipped", skipped.len());
    }
    write_tasks(&tasks, &out)?;
    log::info!("{} tasks written to {}", tasks.len(), out.display());
    Ok(())
}

fn bench_cmd(a: BenchArgs, s: &Settings) -> Result<()> {
    let data: PathBuf = s.require("data", a.data)?;
    let out: PathBuf = s.require("out", a.out)?;
    let d = BenchConfig::default();
    let methods = match s.get::<String>("methods", a.methods)? {
        Some(m) => parse_methods(&m).map_err(|e| CliError::Usage(e.to_string()))?,
        None => d.methods.clone(),
    };
    let op = overlap_params(&a.overlap, s)?;
    let config = BenchConfig {
        methods,
        tasks_per_range: s.get_or("tasks_per_range", a.tasks_per_range, d.tasks_per_range)?,
        task: task_params(&a.task, s)?,
        overlap_mode: op.mode,
        ratio: op.ratio,
        n_p: s.get_or("n_p", a.n_p, d.n_p)?,
        probe_radius: s.get("probe_radius", a.probe_radius)?,
        seed: s.get_or("seed", a.seed, d.seed)?,
        ..d
    };
    let dataset = BenchDataset::load(&data)?;
    let outcome = run_bench(&dataset, &config)?;
    let report = write_bench(&outcome, &config, &out)?;
    print_summary(&report.summary)?;
    Ok(())
}

fn print_summary(summary: &bench::Summary) -> Result<()> {
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    writeln!(w, "method\tmean_normalized_rank\tspearman\tauc_by_range")?;
    for m in &summary.methods {
        let aucs: Vec<String> = m.ranges.iter().map(|r| format!("{}={:.3}", r.range, r.auc)).collect();
        let rho = m.spearman_overlap_rank.map_or("nan".into(), |r| format!("{r:.3}"));
        writeln!(w, "{}\t{:.4}\t{rho}\t{}", m.method, m.mean_normalized_rank, aucs.join(" "))?;
    }
    writeln!(w, "chance\t0.5000\t-\tauc={:.3}", summary.chance_auc)?;
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let out = a.out.unwrap_or_else(|| a.run.clone());
    let report = regenerate_report(&a.run, &out)?;
    print_summary(&report.summary)
}

fn synth(a: SynthArgs, s: &Settings) -> Result<()> {
    let out: PathBuf = s.require("out", a.out)?;
    let d = SyntheticParams::default();
    let params = SyntheticParams {
        seed: s.get_or("seed", a.seed, d.seed)?,
        n_database: s.get_or("n_database", a.n_database, d.n_database)?,
        n_queries: s.get_or("n_queries", a.n_queries, d.n_queries)?,
        no_overlap_queries: s.get_or("no_overlap_queries", a.no_overlap_queries, d.no_overlap_queries)?,
        ..d
    };
    let dataset = generate_synthetic(&params)?;
    dataset.save(&out)?;
    log::info!(
        "{} database and {} query images written to {}",
        dataset.database.models.len(),
        dataset.queries.models.len(),
        out.display()
    );
    Ok(())
}
