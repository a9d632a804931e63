use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dinoreg_core::benchmark::{pair_noise_seed, run_benchmark, workers_from_env, BenchmarkOptions, PairsManifest, WORKERS_ENV};
use dinoreg_core::camera::CameraModel;
use dinoreg_core::config::PipelineConfig;
use dinoreg_core::dataset::{build_pairs, BuildParams, SceneManifest};
use dinoreg_core::features::Frame;
use dinoreg_core::geometry::io::read_cloud;
use dinoreg_core::geometry::RigidTransform;
use dinoreg_core::model::{init_weights, InitMode, Model};
use dinoreg_core::pipeline::{register, PairInput, Providers};
use dinoreg_core::weights::WeightStore;
use dinoreg_core::Error;

const CONFIG_ERROR: u8 = 2;
const DATA_ERROR: u8 = 3;
const MAJORITY_FAILURE: u8 = 4;

#[derive(Parser)]
#[command(name = "dinoreg", version, about = "Visual-geometric point cloud registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register one pair of clouds.
    Register(RegisterArgs),
    /// Register every pair of a JSON-lines manifest and write a report.
    Benchmark(BenchmarkArgs),
    /// Pair construction from depth scans.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Weights container utilities.
    Weights {
        #[command(subcommand)]
        command: WeightsCommand,
    },
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    source_cloud: PathBuf,
    #[arg(long)]
    target_cloud: PathBuf,
    /// DRFM visual features; needed with the file visual provider.
    #[arg(long)]
    source_vfeat: Option<PathBuf>,
    #[arg(long)]
    target_vfeat: Option<PathBuf>,
    #[arg(long)]
    camera_a: PathBuf,
    #[arg(long)]
    camera_b: PathBuf,
    /// JSON rigid transform mapping target into source coordinates; enables metrics.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated pixel noise levels, one report section each.
    #[arg(long, value_delimiter = ',')]
    noise_sigma: Option<Vec<f64>>,
    /// CSV summary path; defaults to the report path with a `.csv` extension.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DatasetCommand {
    Build(BuildArgs),
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Default frame stride; a scene's own stride takes precedence.
    #[arg(long, default_value_t = 50)]
    stride: usize,
    #[arg(long, default_value_t = 60)]
    group_size: usize,
    #[arg(long, default_value_t = 0.05)]
    min_overlap: f64,
    #[arg(long, value_delimiter = ',', num_args = 3, default_value = "0.10,0.30,0.70")]
    bins: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    scene_cap: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum WeightsCommand {
    /// Write seeded weights for an architecture.
    Init(InitArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Random,
    IdentityReduction,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, conflicts_with = "config", default_value = "standard")]
    profile: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "random")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = if error.is_config() { CONFIG_ERROR } else { DATA_ERROR };
        Self { code, error }
    }
}

fn config_failure(error: Error) -> Failure {
    Failure {
        code: CONFIG_ERROR,
        error,
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

/// `report.json` → `report.timing.json`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn load_model(config: &Path, weights: &Path) -> Result<(PipelineConfig, Model, Providers, String), Failure> {
    let cfg = PipelineConfig::load(config).map_err(config_failure)?;
    let store = WeightStore::load(weights)?;
    let model = Model::from_weights(&store, &cfg)?;
    let providers = Providers::from_config(&cfg)?;
    Ok((cfg, model, providers, store.hash()))
}

fn run_register(a: RegisterArgs) -> Result<u8, Failure> {
    let (cfg, model, providers, _) = load_model(&a.config, &a.weights)?;
    let frame = |cloud: &Path, camera: &Path, vfeat: Option<PathBuf>| -> Result<Frame, Failure> {
        Ok(Frame {
            cloud: read_cloud(cloud)?,
            camera: CameraModel::load(camera)?,
            visual_path: vfeat,
            world_pose: None,
        })
    };
    let gt = match &a.gt {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let t: RigidTransform = serde_json::from_str(&text).map_err(Error::from)?;
            Some(t)
        }
        None => None,
    };
    let pair = PairInput {
        source: frame(&a.source_cloud, &a.camera_a, a.source_vfeat)?,
        target: frame(&a.target_cloud, &a.camera_b, a.target_vfeat)?,
        gt,
    };
    let result = register(&pair, &cfg, &model, &providers, pair_noise_seed(cfg.seed, 0))?;
    write(&a.out, &serde_json::to_string_pretty(&result).expect("result serializes"))?;
    write(
        &sidecar(&a.out, "timing.json"),
        &serde_json::to_string_pretty(&result.timing).expect("timing serializes"),
    )?;
    log::info!("{} inliers, {} point matches", result.inliers, result.point_matches.len());
    Ok(0)
}

fn run_benchmark_cmd(a: BenchmarkArgs) -> Result<u8, Failure> {
    let (cfg, model, providers, weights_hash) = load_model(&a.config, &a.weights)?;
    let manifest = PairsManifest::load(&a.pairs)?;
    let opts = BenchmarkOptions {
        sigmas: a.noise_sigma,
        workers: workers_from_env().map_err(config_failure)?,
    };
    log::info!("{} pairs, {} workers ({WORKERS_ENV})", manifest.pairs.len(), opts.workers);
    let (report, timing) = run_benchmark(&manifest, &cfg, &model, &providers, &weights_hash, &opts)?;
    write(&a.out, &report.to_json())?;
    write(&a.csv.unwrap_or_else(|| a.out.with_extension("csv")), &report.to_csv())?;
    write(
        &sidecar(&a.out, "timing.json"),
        &serde_json::to_string_pretty(&timing).expect("timing serializes"),
    )?;
    for s in &report.sections {
        log::info!(
            "sigma {}: RR {:.3} IR {:.3} FMR {:.3}, {} of {} failed",
            s.noise_sigma,
            s.summary.rr,
            s.summary.ir,
            s.summary.fmr,
            s.failed(),
            s.pairs.len()
        );
    }
    if report.worst_failure_fraction() > 0.5 {
        log::error!("more than half of the pairs failed");
        return Ok(MAJORITY_FAILURE);
    }
    Ok(0)
}

fn run_build(a: BuildArgs) -> Result<u8, Failure> {
    let params = BuildParams {
        stride: a.stride,
        group_size: a.group_size,
        min_overlap: a.min_overlap,
        bins: a.bins.try_into().map_err(|_| config_failure(Error::Config("--bins takes three values".into())))?,
        scene_cap: a.scene_cap,
        ..BuildParams::default()
    };
    params.validate()?;
    let manifest = SceneManifest::load(&a.manifest)?;
    let out = build_pairs(&manifest, &params)?;
    let mut text = String::new();
    for p in &out.pairs {
        text.push_str(&serde_json::to_string(p).expect("record serializes"));
        text.push('\n');
    }
    write(&a.out, &text)?;
    log::info!("{} pairs kept of {} traversed", out.pairs.len(), out.traversed);
    Ok(0)
}

fn run_init(a: InitArgs) -> Result<u8, Failure> {
    let cfg = match &a.config {
        Some(p) => PipelineConfig::load(p),
        None => PipelineConfig::profile(&a.profile),
    }
    .map_err(config_failure)?;
    let mode = match a.mode {
        ModeArg::Random => InitMode::Random,
        ModeArg::IdentityReduction => InitMode::IdentityReduction,
    };
    let store = init_weights(&cfg.architecture, mode, a.seed)?;
    store.save(&a.out)?;
    log::info!("{} tensors, sha256 {}", store.len(), store.hash());
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Register(a) => run_register(a),
        Command::Benchmark(a) => run_benchmark_cmd(a),
        Command::Dataset {
            command: DatasetCommand::Build(a),
        } => run_build(a),
        Command::Weights {
            command: WeightsCommand::Init(a),
        } => run_init(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
