//! Command-line front end: `run`, `partition`, `eval`, `gradcheck`, `version`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime,
//! numerical or file-format error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dolfin::checkpoint;
use dolfin::config::ExperimentConfig;
use dolfin::data::build_schedule;
use dolfin::federated::{load_dataset, run_experiment_with_state, PartitionPlan};
use dolfin::gradcheck::{run_gradcheck, GradCheckSetup};
use dolfin::metrics::{evaluate, faa, AccuracyMatrix};
use dolfin::report::Timings;
use dolfin::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "dolfin", about = "Federated class-incremental learning with orthogonal LoRA adapters")]
struct Cli {
    /// Worker threads for per-client work (results do not depend on it).
    #[arg(long, global = true, env = "DOLFIN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and write the report and accuracy matrices.
    Run(RunArgs),
    /// Print per-client class histograms of the Dirichlet partition.
    Partition(PartitionArgs),
    /// Recompute FAA from an accuracy CSV, or evaluate a checkpoint.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Print the version.
    Version,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory for report.json and accuracy CSVs.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Save the final model and client memories of the last run.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Include wall-clock timings in the report.
    #[arg(long)]
    timings: bool,
}

#[derive(Debug, Args)]
struct PartitionArgs {
    /// Configuration providing the dataset and defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clients: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Accuracy matrix CSV written by `run`.
    #[arg(long, conflicts_with = "checkpoint")]
    csv: Option<PathBuf>,
    /// Checkpoint to evaluate on the test split described by `--config`.
    #[arg(long, requires = "config")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    rank: usize,
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Parses `argv` (program name first) and runs the subcommand, writing
/// normal output to `out` and diagnostics to `err`.
pub fn run_cli<I, T>(argv: I, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Failure::Config("--threads must be positive".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli.command, out)),
            Err(e) => Err(Failure::Runtime(e.to_string())),
        },
        None => dispatch(&cli.command, out),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Config(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_CONFIG
        }
        Err(Failure::Runtime(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(command: &Command, out: &mut (dyn Write + Send)) -> Result<i32, Failure> {
    match command {
        Command::Run(args) => run(args, out),
        Command::Partition(args) => partition(args, out),
        Command::Eval(args) => eval(args, out),
        Command::Gradcheck(args) => gradcheck(args, out),
        Command::Version => {
            writeln!(out, "dolfin {}", env!("CARGO_PKG_VERSION"))?;
            Ok(EXIT_OK)
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    Ok(ExperimentConfig::load(path)?)
}

fn run(args: &RunArgs, out: &mut (dyn Write + Send)) -> Result<i32, Failure> {
    let config = load_config(&args.config)?;
    let started = Instant::now();
    let (mut report, last) = run_experiment_with_state(&config)?;
    if args.timings {
        report.timings = Some(Timings {
            total_seconds: started.elapsed().as_secs_f64(),
        });
    }
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("report.json"), report.to_json())?;
    for run in &report.runs {
        std::fs::write(args.out.join(format!("accuracy_seed{}.csv", run.seed)), run.accuracy.to_csv())?;
        writeln!(out, "seed {} faa {}", run.seed, run.faa)?;
    }
    writeln!(out, "mean faa {}", report.mean_faa)?;
    if let Some(path) = &args.checkpoint {
        let memories: Vec<_> = last.clients.iter().map(|c| c.memories().to_vec()).collect();
        checkpoint::save(path, &last.server.global, &memories)?;
    }
    Ok(EXIT_OK)
}

fn partition(args: &PartitionArgs, out: &mut (dyn Write + Send)) -> Result<i32, Failure> {
    let mut config = match &args.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(b) = args.beta {
        config.partition.beta = b;
    }
    if let Some(s) = args.seed {
        config.experiment.seed = s;
    }
    if let Some(k) = args.clients {
        config.round.num_clients = k;
    }
    config.validate()?;
    let seed = config.experiment.seed;
    let dataset = load_dataset(&config, seed)?;
    let schedule = build_schedule(dataset.num_classes(), config.experiment.num_tasks, seed)?;
    let plan = PartitionPlan::build(&dataset, &schedule, config.round.num_clients, config.partition.beta, seed)?;
    writeln!(out, "beta {} seed {} clients {}", config.partition.beta, seed, config.round.num_clients)?;
    for (t, classes) in schedule.tasks.iter().enumerate() {
        let header: Vec<String> = classes.iter().map(|c| format!("c{c}")).collect();
        writeln!(out, "task {} client {} total", t + 1, header.join(" "))?;
        for (k, hist) in plan.class_histograms(&dataset, &schedule, t).iter().enumerate() {
            let cells: Vec<String> = hist.iter().map(usize::to_string).collect();
            writeln!(out, "task {} {k} {} {}", t + 1, cells.join(" "), hist.iter().sum::<usize>())?;
        }
    }
    Ok(EXIT_OK)
}

fn eval(args: &EvalArgs, out: &mut (dyn Write + Send)) -> Result<i32, Failure> {
    if let Some(csv) = &args.csv {
        let text = std::fs::read_to_string(csv)?;
        let matrix = AccuracyMatrix::from_csv(&text)?;
        writeln!(out, "{}", faa(&matrix)?)?;
        return Ok(EXIT_OK);
    }
    let (Some(ck), Some(cfg)) = (&args.checkpoint, &args.config) else {
        return Err(Failure::Config("eval needs --csv, or --checkpoint with --config".into()));
    };
    let config = load_config(cfg)?;
    let loaded = checkpoint::load(ck)?;
    let seed = config.experiment.seed;
    let dataset = load_dataset(&config, seed)?;
    let schedule = build_schedule(dataset.num_classes(), config.experiment.num_tasks, seed)?;
    let tasks = loaded.model.task_index();
    if tasks == 0 {
        return Err(Failure::Runtime("checkpoint holds an untrained model".into()));
    }
    let row = evaluate(&loaded.model, &dataset, &schedule, tasks - 1)?;
    let cells: Vec<String> = row.iter().map(f64::to_string).collect();
    writeln!(out, "{}", cells.join(","))?;
    Ok(EXIT_OK)
}

fn gradcheck(args: &GradcheckArgs, out: &mut (dyn Write + Send)) -> Result<i32, Failure> {
    if args.dim == 0 || args.layers == 0 || args.rank == 0 || args.rank > args.dim || args.tokens < 2 || args.classes == 0 || args.batch == 0 {
        return Err(Failure::Config("gradcheck needs positive sizes, rank <= dim and at least 2 tokens".into()));
    }
    let report = run_gradcheck(&GradCheckSetup {
        embed_dim: args.dim,
        num_layers: args.layers,
        num_tokens: args.tokens,
        rank: args.rank,
        classes: args.classes,
        batch: args.batch,
        step: args.step,
        seed: args.seed,
    })?;
    for t in &report.tensors {
        writeln!(out, "{:?} entries {} max_rel_error {:.3e}", t.tensor, t.entries, t.max_rel_error)?;
    }
    writeln!(out, "max relative error {:.3e}", report.max_rel_error)?;
    Ok(if report.max_rel_error <= GRADCHECK_TOLERANCE {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    })
}
