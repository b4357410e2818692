//! `forcempc` command-line front end.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use forcempc::simloop::{ModelKind, Scenario};

use commands::{Ctx, Failure, FitArgs, SimArgs};

#[derive(Parser)]
#[command(name = "forcempc", version, about = "Force and motion MPC with hybrid contact models: data, fitting, simulation, evaluation")]
struct Cli {
    /// scenario file (TOML); built-in defaults when absent
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory, overriding `output.dir`
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// seed for data collection and GP restarts
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// only print results and errors
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect training and evaluation data with the bootstrap controller
    GenData,
    /// Identify force models and report their RMSE
    Fit(FitCmd),
    /// Run closed-loop simulations and write logs and plots
    Simulate(SimCmd),
    /// Print metrics for trajectory logs and compare them
    Evaluate(EvalCmd),
    /// Re-plot trajectory logs and write a markdown summary
    Report(ReportCmd),
}

#[derive(Args)]
struct FitCmd {
    /// hook, hertz, hybrid or all
    #[arg(long, default_value = "all")]
    model: String,
    /// training CSV [default: <out>/train.csv]
    #[arg(long)]
    train: Option<PathBuf>,
    /// evaluation CSV [default: <out>/eval.csv when present]
    #[arg(long)]
    eval: Option<PathBuf>,
    /// lock the Hertz exponent, e.g. 1.5
    #[arg(long)]
    hertz_alpha: Option<f64>,
}

#[derive(Args)]
struct SimCmd {
    /// controller model, overriding `controller.model`
    #[arg(long)]
    model: Option<ModelKind>,
    /// fitted model bundle [default: controller.model_file, then <out>/model_<kind>.json]
    #[arg(long)]
    model_file: Option<PathBuf>,
    /// run each listed model and plot the forces side by side, e.g. hook,hertz,hybrid
    #[arg(long, value_delimiter = ',')]
    compare: Option<Vec<ModelKind>>,
    /// scenario files to run concurrently, one output set each
    #[arg(long, num_args = 1.., conflicts_with_all = ["compare", "model", "model_file"])]
    batch: Vec<PathBuf>,
    /// output file prefix
    #[arg(long, default_value = "run")]
    name: String,
}

#[derive(Args)]
struct EvalCmd {
    /// trajectory CSVs; `<name>_timing.csv` next to each is picked up
    #[arg(required = true)]
    logs: Vec<PathBuf>,
}

#[derive(Args)]
struct ReportCmd {
    /// trajectory CSVs [default: every *_trajectory.csv in the output directory]
    logs: Vec<PathBuf>,
}

fn parse_models(s: &str) -> Result<Vec<ModelKind>, Failure> {
    if s.trim() == "all" {
        return Ok(vec![ModelKind::Hook, ModelKind::Hertz, ModelKind::Hybrid]);
    }
    s.split(',').map(|m| m.parse::<ModelKind>().map_err(Failure::from)).collect()
}

fn context(cli: &Cli) -> Result<Ctx, Failure> {
    let mut scenario = match &cli.config {
        Some(p) => Scenario::load(p).map_err(|e| match Failure::from(e) {
            Failure::Usage(m) | Failure::Runtime(m) => Failure::Usage(format!("{}: {m}", p.display())),
        })?,
        None => Scenario::default(),
    };
    if let Some(seed) = cli.seed {
        scenario.seeds.data = seed;
        scenario.seeds.fit = seed;
    }
    let out_dir = cli.out_dir.clone().unwrap_or_else(|| scenario.output.dir.clone());
    Ok(Ctx { scenario, out_dir, quiet: cli.quiet })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let ctx = context(&cli)?;
    match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Fit(a) => {
            let args = FitArgs { models: parse_models(&a.model)?, train: a.train, eval: a.eval, hertz_alpha: a.hertz_alpha };
            commands::fit(&ctx, &args)
        }
        Command::Simulate(a) => {
            let args = SimArgs { model: a.model, model_file: a.model_file, compare: a.compare, batch: a.batch, name: a.name };
            commands::simulate(&ctx, &args)
        }
        Command::Evaluate(a) => commands::evaluate(&ctx, &a.logs),
        Command::Report(a) => commands::report(&ctx, &a.logs),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = if cli.quiet { log::LevelFilter::Error } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code() as u8)
        }
    }
}
