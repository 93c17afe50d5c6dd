use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pointsmile::augment::{self, AugmentError, RngStream, View};
use pointsmile::config::RunConfig;
use pointsmile::eval::{self, ProbeKind};
use pointsmile::geometry::{self, generate_shapes, PoseMode, ShapeConfig};
use pointsmile::gradsuite;
use pointsmile::model::Checkpoint;
use pointsmile::par;
use pointsmile::train::{self, PretrainOptions, TrainError};

#[derive(Parser)]
#[command(name = "pointsmile", version, about = "Self-supervised point-cloud pre-training and probing")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "POINTSMILE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the labelled synthetic shape dataset.
    GenData(GenDataArgs),
    /// Pre-train the encoder and heads.
    Pretrain(PretrainArgs),
    /// Probe frozen encoder features of a checkpoint.
    Eval(EvalArgs),
    /// Write one augmented view of a cloud.
    Augment(AugmentArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Pose {
    Fixed,
    Upright,
    Full,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 256)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative jitter of each primitive's size parameters.
    #[arg(long, default_value_t = 0.25)]
    param_jitter: f64,
    #[arg(long, value_enum, default_value = "upright")]
    pose: Pose,
    /// Largest tilt from vertical for the upright pose, in degrees.
    #[arg(long, default_value_t = 30.0)]
    max_tilt: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Probe {
    Linear,
    Hinge,
    Knn,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "linear")]
    probe: Probe,
    /// Seed of the 80/20 stratified split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON run config whose `eval` section sets probe hyperparameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the feature table as CSV.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Easy,
    Hard,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "easy")]
    family: Family,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON run config whose `augment` section sets the transform ranges.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Runtime(String),
    Usage(String),
    NonFinite(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Usage(_) => 2,
            Failure::NonFinite(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Runtime(m) | Failure::Usage(m) | Failure::NonFinite(m) => m,
        }
    }
}

type Outcome = Result<(), Failure>;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text).map_err(usage)
        }
        None => Ok(RunConfig::default()),
    }
}

fn gen_data(a: GenDataArgs) -> Outcome {
    let pose = match a.pose {
        Pose::Fixed => PoseMode::Fixed,
        Pose::Upright => PoseMode::Upright { max_tilt_deg: a.max_tilt },
        Pose::Full => PoseMode::Full,
    };
    if a.classes > geometry::ShapeKind::ALL.len() {
        return Err(usage(format!("--classes must be at most {}", geometry::ShapeKind::ALL.len())));
    }
    let cfg = ShapeConfig {
        param_jitter: a.param_jitter,
        pose,
        ..ShapeConfig::with_classes(a.classes, a.per_class, a.points, a.seed)
    };
    cfg.validate().map_err(usage)?;
    let set = generate_shapes(&cfg).map_err(runtime)?;
    set.write(&a.out).map_err(runtime)?;
    println!("wrote {} clouds to {}", set.clouds.len(), a.out.display());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Outcome {
    let cfg = load_config(a.config.as_deref())?;
    let resume = match &a.resume {
        Some(p) => Some(Checkpoint::load(p).map_err(usage)?),
        None => None,
    };
    let (_, clouds) = geometry::load_dataset(&a.data).map_err(usage)?;
    let data: Vec<_> = clouds.into_iter().map(|c| c.cloud).collect();
    fs::create_dir_all(&a.out).map_err(runtime)?;
    fs::write(a.out.join("config.resolved.json"), cfg.to_json_pretty() + "\n").map_err(runtime)?;
    let opts = PretrainOptions {
        out_dir: Some(a.out.clone()),
        resume,
        stop_after: None,
    };
    let outcome = train::pretrain(&data, &cfg, opts).map_err(|e| match e {
        TrainError::NonFiniteLoss { .. } => Failure::NonFinite(e.to_string()),
        TrainError::InvalidConfig(_) | TrainError::ResumeMismatch(_) | TrainError::DatasetTooSmall { .. } => usage(e),
        other => runtime(other),
    })?;
    match outcome.metrics.last() {
        Some(last) => println!(
            "step {} l_overall {:.6} mi_fea {:.6} mi_cls {:.6}",
            last.step, last.report.l_overall, last.report.mi_fea_estimate, last.report.mi_cls_estimate
        ),
        None => println!("step {} (no training steps)", outcome.checkpoint.step),
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Outcome {
    if !a.checkpoint.exists() {
        return Err(usage(format!("checkpoint {} not found", a.checkpoint.display())));
    }
    let mut cfg = load_config(a.config.as_deref())?.eval;
    cfg.seed = a.seed;
    cfg.probe = match a.probe {
        Probe::Linear => ProbeKind::Linear,
        Probe::Hinge => ProbeKind::Hinge,
        Probe::Knn => ProbeKind::Knn,
    };
    let ck = Checkpoint::load(&a.checkpoint).map_err(usage)?;
    let (_, clouds) = geometry::load_dataset(&a.data).map_err(usage)?;
    let table = eval::extract(&ck.params, &clouds).map_err(runtime)?;
    if let Some(path) = &a.export {
        eval::export_features(&table, path).map_err(runtime)?;
    }
    let result = eval::run_probe(&table, &cfg).map_err(runtime)?;
    println!("{}", serde_json::to_string(&result).map_err(runtime)?);
    Ok(())
}

fn run_augment(a: AugmentArgs) -> Outcome {
    let cfg = load_config(a.config.as_deref())?.augment;
    let cloud = geometry::read_xyz(&a.input).map_err(usage)?;
    let stream = RngStream::new(a.seed, 0, 0, View::A);
    let out = match a.family {
        Family::Easy => augment::apply_easy(&cloud, &stream, &cfg),
        Family::Hard => augment::apply_hard(&cloud, &stream, &cfg),
    }
    .map_err(|e| match e {
        AugmentError::TooFewPoints { .. } => usage(e),
        other => runtime(other),
    })?;
    geometry::write_xyz(&out, &a.out).map_err(runtime)?;
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Outcome {
    if a.trials == 0 {
        return Err(usage("--trials must be positive"));
    }
    let results = gradsuite::gradient_suite(a.trials, a.seed).map_err(runtime)?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<24} {} max_rel {:.3e} max_abs {:.3e} checked {} excluded {}",
            r.name,
            if r.passed { "ok  " } else { "FAIL" },
            r.max_rel_err,
            r.max_abs_err,
            r.checked,
            r.excluded
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(runtime(format!("{failed} gradient case(s) failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if !par::init_threads(n) && par::parallel_enabled() {
            eprintln!("warning: thread pool already initialised");
        }
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Eval(a) => run_eval(a),
        Command::Augment(a) => run_augment(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
