//! Command-line front end: argument parsing, exit codes and the mapping
//! from flags to library configurations.

pub mod commands;
pub mod config;
pub mod reproduce;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use jacreg::bounds::{BoundInputs, SweepGrid};
use jacreg::data::DatasetStats;
use jacreg::{AttackConfig, Geometry, RegConfig, ScaleRule, TrainConfig};

use commands::{BoundOverrides, ReproduceTarget};
use config::{load_split, resolve_data_dir, ExperimentConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, missing inputs or invalid configuration.
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(anyhow::anyhow!(msg.into()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<jacreg::Error> for CliError {
    fn from(e: jacreg::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(name = "jacreg", version, about = "Jacobian-regularized ReLU networks: training, PGD evaluation, bounds")]
pub struct Cli {
    /// Worker threads (1 makes every output bit-reproducible across machines).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model and write checkpoint, epoch log and summary.
    Train(TrainArgs),
    /// PGD-evaluate a checkpoint on the training subset and the test set.
    Attack(AttackArgs),
    /// Evaluate the generalization bounds for a checkpoint.
    Bounds(BoundsArgs),
    /// Write a CSV of bound values over a parameter grid.
    Sweep(SweepArgs),
    /// Run the randomized identity, derivative and inequality audits.
    Verify(VerifyArgs),
    /// Run the MNIST λ̃ sweeps and the surrogate-vs-PGD training curve.
    Reproduce(ReproduceArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// MNIST directory (defaults to $JACREG_DATA_DIR, then data/mnist).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Training samples drawn from the train split.
    #[arg(long, default_value_t = 1000)]
    pub n_train: usize,
    /// Seed of the training subset (defaults to --seed).
    #[arg(long)]
    pub subset_seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Copy)]
#[group(multiple = false)]
pub struct GeometryArgs {
    /// ℓ2 geometry: Frobenius penalty, ℓ2 PGD (ε = 0.5 by default).
    #[arg(long)]
    pub l2: bool,
    /// ℓ∞ geometry: ℓ1,1 penalty, ℓ∞ PGD (ε = 0.03 by default).
    #[arg(long)]
    pub linf: bool,
}

impl GeometryArgs {
    fn geometry(&self, default: Geometry) -> Geometry {
        if self.l2 {
            Geometry::L2
        } else if self.linf {
            Geometry::Linf
        } else {
            default
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Rerun a config echo; all other training flags are ignored.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    /// λ̃ = λε; λ is derived as λ̃/ε.
    #[arg(long, default_value_t = 0.0)]
    pub effective_lambda: f64,
    /// Attack radius ε the penalty is matched to (defaults per geometry).
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1000)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "100,100,100,100")]
    pub hidden: Vec<usize>,
    #[arg(long, value_enum, default_value_t = InitArg::He)]
    pub init: InitArg,
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    /// Also run PGD at every logged epoch.
    #[arg(long)]
    pub log_attack: bool,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum InitArg {
    He,
    Lecun,
    UniformFanIn,
}

impl From<InitArg> for ScaleRule {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::He => ScaleRule::He,
            InitArg::Lecun => ScaleRule::Lecun,
            InitArg::UniformFanIn => ScaleRule::UniformFanIn,
        }
    }
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Geometry of the attack (ℓ∞ when neither flag is given).
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub random_start: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct BoundsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    /// λ̃ the checkpoint was trained with.
    #[arg(long, default_value_t = 0.0)]
    pub effective_lambda: f64,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Override of the loss range B (default: training-set maximum).
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long)]
    pub b1: Option<f64>,
    #[arg(long)]
    pub b2: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "5")]
    pub depths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "10")]
    pub r_thetas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1000")]
    pub ns: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub r1s: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub r2s: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    pub lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub epsilons: Vec<f64>,
    #[arg(long, default_value_t = 109_400)]
    pub num_params: usize,
    #[arg(long, default_value_t = 1.0)]
    pub mean_x_l2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub mean_x_l2_sq: f64,
    #[arg(long, default_value_t = 1.0)]
    pub r_x: f64,
    #[arg(long, default_value_t = 784)]
    pub d: usize,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 10.0)]
    pub b: f64,
    #[arg(long, default_value_t = 100.0)]
    pub b1: f64,
    #[arg(long, default_value_t = 100.0)]
    pub b2: f64,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Smaller sample sizes.
    #[arg(long)]
    pub quick: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum TargetArg {
    T1,
    T2,
    Fig1,
    All,
}

#[derive(Args, Debug)]
pub struct ReproduceArgs {
    #[arg(long, value_enum)]
    pub table: TargetArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs/reproduce")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    /// Logging interval of the curve run.
    #[arg(long, default_value_t = 25)]
    pub curve_log_every: usize,
    #[command(flatten)]
    pub data: DataArgs,
}

fn default_epsilon(g: Geometry) -> f64 {
    AttackConfig::default_for(g).epsilon
}

fn reg_from(g: Geometry, epsilon: Option<f64>, effective_lambda: f64) -> Result<RegConfig, CliError> {
    let eps = epsilon.unwrap_or_else(|| default_epsilon(g));
    RegConfig::from_effective(g.matched_penalty(), eps, effective_lambda).map_err(|e| CliError::Usage(e.to_string()))
}

/// Resolves training flags into the canonical experiment config.
pub fn experiment_from_args(a: &TrainArgs) -> Result<ExperimentConfig, CliError> {
    let g = a.geometry.geometry(Geometry::L2);
    let reg = reg_from(g, a.epsilon, a.effective_lambda)?;
    let train = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        momentum: a.momentum,
        reg,
        seed: a.seed,
        log_every: a.log_every,
        hidden: a.hidden.clone(),
        init: a.init.into(),
    };
    train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let eval_attack = AttackConfig {
        epsilon: reg.epsilon,
        ..AttackConfig::default_for(g)
    };
    Ok(ExperimentConfig {
        data_dir: resolve_data_dir(a.data.data_dir.clone()),
        n_train: a.data.n_train,
        subset_seed: a.data.subset_seed.unwrap_or(a.seed),
        threads: 0,
        train,
        log_attack: a.log_attack.then_some(eval_attack.clone()),
        eval_attack,
    })
}

fn set_threads(n: usize) -> Result<(), CliError> {
    if n == 0 {
        return Ok(());
    }
    // A second initialization (several commands in one process) keeps the
    // first pool; that is harmless for determinism since chunking is fixed.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn split_for(data: &DataArgs, seed: u64) -> Result<config::Split, CliError> {
    load_split(&resolve_data_dir(data.data_dir.clone()), data.n_train, data.subset_seed.unwrap_or(seed))
}

/// Runs a parsed command, writing its report to `out`.
pub fn execute(cli: Cli, out: &mut impl Write) -> Result<(), CliError> {
    let threads = cli.threads.unwrap_or(0);
    set_threads(threads)?;
    let io = |e: std::io::Error| CliError::runtime(format!("cannot write output: {e}"));
    match cli.command {
        Command::Train(a) => {
            let mut cfg = match &a.config {
                Some(path) => ExperimentConfig::load(path)?,
                None => experiment_from_args(&a)?,
            };
            if a.config.is_none() {
                cfg.threads = threads;
            } else {
                set_threads(cfg.threads)?;
            }
            let report = commands::cmd_train(&cfg, &a.out)?;
            write!(out, "{report}").map_err(io)
        }
        Command::Attack(a) => {
            let g = a.geometry.geometry(Geometry::Linf);
            let d = AttackConfig::default_for(g);
            let attack = AttackConfig {
                epsilon: a.epsilon.unwrap_or(d.epsilon),
                steps: a.steps.unwrap_or(d.steps),
                step_size: a.step_size.unwrap_or(d.step_size),
                random_start: a.random_start,
                seed: a.seed,
                ..d
            };
            attack.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            commands::load_checkpoint(&a.checkpoint)?;
            let split = split_for(&a.data, a.seed)?;
            write!(out, "{}", commands::cmd_attack(&a.checkpoint, &split, &attack)?).map_err(io)
        }
        Command::Bounds(a) => {
            if !(a.delta > 0.0 && a.delta < 1.0) {
                return Err(CliError::Usage(format!("--delta must lie in (0, 1), got {}", a.delta)));
            }
            let g = a.geometry.geometry(Geometry::L2);
            let reg = reg_from(g, a.epsilon, a.effective_lambda)?;
            commands::load_checkpoint(&a.checkpoint)?;
            let split = split_for(&a.data, a.seed)?;
            let overrides = BoundOverrides {
                b: a.b,
                b1: a.b1,
                b2: a.b2,
            };
            write!(out, "{}", commands::cmd_bounds(&a.checkpoint, &split.train, a.delta, &reg, overrides)?).map_err(io)
        }
        Command::Sweep(a) => {
            let stats = DatasetStats {
                n: 1,
                mean_x_l2: a.mean_x_l2,
                mean_x_l2_sq: a.mean_x_l2_sq,
                r_x: a.r_x,
                d: a.d,
                k: a.k,
            };
            let base = BoundInputs {
                r_theta: 1.0,
                num_params: a.num_params,
                depth: 2,
                r1: 1.0,
                r2: 1.0,
                lambda: 0.0,
                epsilon: 0.0,
                b: a.b,
                b1: a.b1,
                b2: a.b2,
                delta: a.delta,
            };
            let grid = SweepGrid {
                depths: a.depths,
                r_thetas: a.r_thetas,
                ns: a.ns,
                r1s: a.r1s,
                r2s: a.r2s,
                lambdas: a.lambdas,
                epsilons: a.epsilons,
            };
            match &a.out {
                Some(path) => {
                    let mut buf = Vec::new();
                    let rows = commands::cmd_sweep(&mut buf, &stats, &base, &grid)?;
                    std::fs::write(path, buf).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
                    writeln!(out, "wrote {rows} rows to {}", path.display()).map_err(io)
                }
                None => commands::cmd_sweep(out, &stats, &base, &grid).map(|_| ()),
            }
        }
        Command::Verify(a) => {
            let (report, ok) = commands::cmd_verify(a.seed, a.quick, jacreg::verify::library_jacobian)?;
            write!(out, "{report}").map_err(io)?;
            if ok {
                Ok(())
            } else {
                Err(CliError::runtime("some audits failed"))
            }
        }
        Command::Reproduce(a) => {
            let split = split_for(&a.data, a.seed)?;
            let mut base = TrainConfig::reference_default(RegConfig::unregularized(jacreg::PenaltyNorm::FrobSq), a.seed);
            base.epochs = a.epochs;
            let target = match a.table {
                TargetArg::T1 => ReproduceTarget::T1,
                TargetArg::T2 => ReproduceTarget::T2,
                TargetArg::Fig1 => ReproduceTarget::Fig1,
                TargetArg::All => ReproduceTarget::All,
            };
            let summary = commands::cmd_reproduce(target, &split, &base, a.curve_log_every, &a.out, |line| {
                eprintln!("{line}");
            })?;
            write!(out, "{summary}").map_err(io)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = write!(err, "{e}");
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}
