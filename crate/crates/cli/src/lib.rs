//! The `sfcm` command-line tool: training runs, ablations, gradient checks,
//! dataset generation and selector-map export.
//!
//! Exit codes: 0 on success, 1 when a check or training run fails, 2 for
//! usage, configuration and input errors.

pub mod config;
pub mod export;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sfcm_core::autograd::suite::{self, SuiteConfig};
use sfcm_core::autograd::{GradcheckConfig, EPS_RANGE};
use sfcm_core::data::cifar::load_cifar10_binary;
use sfcm_core::data::synthetic::{gen_synthetic, SyntheticSpec};
use sfcm_core::data::Dataset;
use sfcm_core::models::Model;
use sfcm_core::sfcm::ConnectionMode;
use sfcm_core::train::{
    evaluate, history_csv, load_checkpoint, save_checkpoint, train_loop_with, EpochRecord, Metrics, Optimizer, Split,
};

use config::{check_compatible, Overrides, Resolved, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable capping worker threads.
pub const THREADS_VAR: &str = "SFCM_THREADS";

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }

    /// Bad input data or configuration.
    pub fn from_core_usage(e: sfcm_core::Error) -> Self {
        Self::usage(e.to_string())
    }

    /// Errors raised while running: divergence is a failed run, everything
    /// else traces back to the inputs.
    pub fn from_core(e: sfcm_core::Error) -> Self {
        match e {
            sfcm_core::Error::Diverged { .. } | sfcm_core::Error::NonDeterministic(_) => Self::failure(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::failure(format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "sfcm", version, about = "Selective feature connection experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Write one selector map of a checkpoint as PGM and CSV.
    ExportSelector(ExportArgs),
    /// Generate a synthetic foreground/clutter dataset.
    SynthData(SynthArgs),
    /// Train the SFCM placement variants and tabulate their error rates.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// TSR1 dataset.
    #[arg(long, conflicts_with = "cifar")]
    pub data: Option<PathBuf>,
    /// CIFAR-10 binary batch file.
    #[arg(long)]
    pub cifar: Option<PathBuf>,
    #[arg(long)]
    pub max_n: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// `all` or one op name.
    #[arg(long, default_value = "all")]
    pub op: String,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the CSV report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// TSR1 dataset supplying the image.
    #[arg(long)]
    pub input: PathBuf,
    /// Selector site in forward order, 0-based.
    #[arg(long, default_value_t = 0)]
    pub site: usize,
    /// Sample index within the dataset.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Output prefix; writes `<out>.pgm` and `<out>.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.1)]
    pub fg_frac: f32,
    #[arg(long, default_value_t = 0.5)]
    pub clutter: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Trend table CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn dispatch(command: Command) -> Result<i32, CliError> {
    let threads = threads_from_env()?;
    match command {
        Command::Train(a) => cmd_train(&a, threads).map(|_| EXIT_OK),
        Command::Eval(a) => cmd_eval(&a, threads).map(|_| EXIT_OK),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::ExportSelector(a) => export::cmd_export_selector(&a).map(|_| EXIT_OK),
        Command::SynthData(a) => cmd_synth_data(&a).map(|_| EXIT_OK),
        Command::Ablate(a) => cmd_ablate(&a, threads).map(|_| EXIT_OK),
    }
}

/// Worker thread cap from `SFCM_THREADS`, default 1.
pub fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Outcome of one training run.
pub struct RunResult {
    pub history: Vec<EpochRecord>,
    pub test: Option<Metrics>,
    pub model: Model<f32>,
}

impl RunResult {
    /// Final test error in percent, or validation error without a test set.
    pub fn error_pct(&self) -> Option<f64> {
        let acc = self.test.map(|m| m.accuracy).or_else(|| {
            self.history
                .iter()
                .rev()
                .find(|r| r.split == Split::Val)
                .map(|r| r.metrics.accuracy)
        })?;
        Some(100.0 * (1.0 - acc))
    }

    /// Training history plus one `test` row after the last epoch.
    pub fn csv(&self) -> String {
        let mut rows = self.history.clone();
        if let Some(m) = self.test {
            rows.push(EpochRecord {
                epoch: rows.last().map_or(0, |r| r.epoch),
                split: Split::Test,
                metrics: m,
            });
        }
        history_csv(&rows)
    }
}

/// Trains the model described by `run` on already loaded data.
pub fn execute(
    run: &Resolved,
    train: &Dataset,
    test: Option<&Dataset>,
    threads: usize,
    quiet: bool,
) -> Result<RunResult, CliError> {
    let model_cfg = &run.config.model;
    check_compatible(model_cfg, train)?;
    if let Some(t) = test {
        check_compatible(model_cfg, t)?;
    }
    let mut train_cfg = run.train.clone();
    train_cfg.threads = threads;
    let mut model = Model::<f32>::new(model_cfg.clone(), train_cfg.seed).map_err(CliError::from_core_usage)?;
    let mut optimizer =
        Optimizer::new(run.optimizer.clone(), train_cfg.epochs).map_err(CliError::from_core_usage)?;
    let name = &run.config.name;
    let history = train_loop_with(&mut model, train, &mut optimizer, &train_cfg, |r| {
        if !quiet {
            eprintln!(
                "[{name}] epoch {:>3} {:<5} loss {:.4} acc {:.4}{}",
                r.epoch,
                r.split.as_str(),
                r.metrics.loss,
                r.metrics.accuracy,
                r.metrics
                    .selector_fg_mass
                    .map(|m| format!(" fg_mass {m:.4}"))
                    .unwrap_or_default()
            );
        }
    })
    .map_err(CliError::from_core)?;
    let test = match test {
        Some(t) => Some(evaluate(&model, t, train_cfg.batch_size, threads).map_err(CliError::from_core)?),
        None => None,
    };
    Ok(RunResult { history, test, model })
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.tsr";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";

fn cmd_train(args: &TrainArgs, threads: usize) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: args.seed,
        epochs: args.epochs,
        batch_size: args.batch_size,
        out_dir: args.out.clone(),
    };
    let run = RunConfig::load(&args.config)?.resolve(&overrides)?;
    let (train, test) = run.config.data.load()?;
    let result = execute(&run, &train, test.as_ref(), threads, args.quiet)?;

    fs::create_dir_all(&run.out_dir).map_err(|e| CliError::io(&run.out_dir, e))?;
    write(&run.out_dir.join(METRICS_FILE), result.csv())?;
    save_checkpoint(run.out_dir.join(CHECKPOINT_FILE), &result.model).map_err(|e| CliError::failure(e.to_string()))?;
    let json = serde_json::to_string_pretty(&run.config).expect("run config serializes");
    write(&run.out_dir.join(RESOLVED_CONFIG_FILE), json + "\n")?;
    if !args.quiet {
        eprintln!("wrote {}", run.out_dir.display());
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs, threads: usize) -> Result<(), CliError> {
    let model: Model<f32> = load_checkpoint(&args.checkpoint).map_err(CliError::from_core_usage)?;
    let data = match (&args.data, &args.cifar) {
        (Some(p), None) => Dataset::load_tsr(p, Some(model.config().classes)),
        (None, Some(p)) => load_cifar10_binary(p, args.max_n),
        _ => return Err(CliError::usage("pass exactly one of --data or --cifar")),
    }
    .map_err(CliError::from_core_usage)?;
    check_compatible(model.config(), &data)?;
    let m = evaluate(&model, &data, args.batch_size, threads).map_err(CliError::from_core)?;
    println!("samples,loss,accuracy,selector_fg_mass");
    println!(
        "{},{},{},{}",
        data.len(),
        m.loss,
        m.accuracy,
        m.selector_fg_mass.map(|v| v.to_string()).unwrap_or_default()
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32, CliError> {
    let ops: Vec<&str> = if args.op == "all" {
        suite::OPS.to_vec()
    } else if suite::OPS.contains(&args.op.as_str()) {
        vec![args.op.as_str()]
    } else {
        return Err(CliError::usage(format!(
            "unknown op {:?}; expected all or one of {}",
            args.op,
            suite::OPS.join(", ")
        )));
    };
    if !(args.eps.is_finite() && args.eps > 0.0) || !(args.tol.is_finite() && args.tol > 0.0) {
        return Err(CliError::usage("--eps and --tol must be positive"));
    }
    let in_range = (EPS_RANGE.0..=EPS_RANGE.1).contains(&args.eps);
    if !in_range {
        eprintln!(
            "warning: --eps {} is outside the recommended range [{}, {}]; expect spurious failures",
            args.eps, EPS_RANGE.0, EPS_RANGE.1
        );
    }
    let config = SuiteConfig {
        instances: args.instances,
        check: GradcheckConfig {
            eps: args.eps,
            tol: args.tol,
            enforce_eps_range: false,
        },
        seed: args.seed,
    };
    let reports = ops
        .iter()
        .map(|op| suite::check_op(op, &config))
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::from_core)?;
    let csv = suite::reports_csv(&reports);
    print!("{csv}");
    if let Some(p) = &args.out {
        write(p, &csv)?;
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        eprintln!("{failed} of {} ops failed", reports.len());
        Ok(EXIT_FAILURE)
    } else {
        Ok(EXIT_OK)
    }
}

fn cmd_synth_data(args: &SynthArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        n: args.n,
        size: args.size,
        classes: args.classes,
        fg_frac: args.fg_frac,
        clutter: args.clutter,
        seed: args.seed,
    };
    let data = gen_synthetic(&spec).map_err(CliError::from_core_usage)?;
    data.save_tsr(&args.out).map_err(|e| CliError::failure(e.to_string()))
}

/// Row labels of the ablation table, with the blocks that get the selector.
pub fn ablation_rows(blocks: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("baseline", vec![]),
        ("first_block", vec![1]),
        ("first_two_blocks", (1..=blocks.min(2)).collect()),
        ("all_blocks", (1..=blocks).collect()),
    ]
}

pub const ABLATION_HEADER: &str = "variant,direct_error_pct,residual_error_pct";

fn cmd_ablate(args: &AblateArgs, threads: usize) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: args.seed,
        epochs: args.epochs,
        ..Overrides::default()
    };
    let base = RunConfig::load(&args.config)?.resolve(&overrides)?;
    let (train, test) = base.config.data.load()?;
    let blocks = base.config.model.blocks;

    // Identical placements (e.g. "first two" and "all" with two blocks) are
    // trained once.
    let mut cache: Vec<((ConnectionMode, Vec<usize>), f64)> = Vec::new();
    let mut run_variant = |mode: ConnectionMode, sites: &[usize]| -> Result<f64, CliError> {
        let key = (mode, sites.to_vec());
        if let Some((_, e)) = cache.iter().find(|(k, _)| *k == key) {
            return Ok(*e);
        }
        let mut run = base.clone();
        run.config.model.mode = mode;
        run.config.model.sfcm_blocks = sites.to_vec();
        run.config.name = format!("{}-{}-{}", base.config.name, mode.as_str(), sites.len());
        let result = execute(&run, &train, test.as_ref(), threads, args.quiet)?;
        let err = result
            .error_pct()
            .ok_or_else(|| CliError::usage("ablation needs a test set or a validation split"))?;
        cache.push((key, err));
        Ok(err)
    };

    let mut csv = format!("{ABLATION_HEADER}\n");
    for (label, sites) in ablation_rows(blocks) {
        let (direct, residual) = if sites.is_empty() {
            let e = run_variant(ConnectionMode::Baseline, &[])?;
            (e, e)
        } else {
            (
                run_variant(ConnectionMode::Direct, &sites)?,
                run_variant(ConnectionMode::Residual, &sites)?,
            )
        };
        csv.push_str(&format!("{label},{direct:.2},{residual:.2}\n"));
    }
    write(&args.out, &csv)?;
    print!("{csv}");
    Ok(())
}
