use std::path::PathBuf;
use std::process::ExitCode;

use cc_calc::cli::{self, parse_grid, Experiment, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cc-calc", version, about = "Numerical calculus on Carnot-Caratheodory spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSV tables.
    Run(RunArgs),
    /// Print the built-in space names.
    List,
}

#[derive(Args)]
struct RunArgs {
    /// Built-in space name or path to a space file.
    #[arg(long, default_value = "heisenberg")]
    space: String,
    #[arg(long, value_enum, default_value = "validate")]
    experiment: Experiment,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    samples: Option<usize>,
    /// Comma-separated grid, e.g. 0.2,0.1,0.05.
    #[arg(long)]
    eps_grid: Option<String>,
    /// Test map for the differential and area experiments.
    #[arg(long)]
    map: Option<String>,
    /// Comma-separated base point.
    #[arg(long)]
    point: Option<String>,
    /// JSON config; its fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn build_config(args: RunArgs) -> Result<ExperimentConfig, cli::ConfigError> {
    let mut cfg = ExperimentConfig::new(args.space, args.experiment, args.seed, args.out);
    cfg.samples = args.samples;
    cfg.eps_grid = args.eps_grid.as_deref().map(parse_grid).transpose()?;
    cfg.map = args.map;
    cfg.point = args.point.as_deref().map(parse_grid).transpose()?;
    if let Some(path) = &args.config {
        cfg.overlay_file(path)?;
    }
    Ok(cfg)
}

fn configure_threads() {
    if let Some(n) = std::env::var("CC_CALC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // fails only if a pool already exists
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    configure_threads();
    match cli.command {
        Command::List => {
            for name in cli::list_builtin() {
                println!("{name}");
            }
            ExitCode::SUCCESS
        }
        Command::Run(args) => {
            let cfg = match build_config(args) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(2);
                }
            };
            match cli::run(&cfg) {
                Ok(outcome) => {
                    for inv in &outcome.invariants {
                        let tag = if inv.passed { "PASS" } else { "FAIL" };
                        println!("{tag} {} = {:e} ({})", inv.name, inv.value, inv.threshold);
                    }
                    ExitCode::from(outcome.exit_code() as u8)
                }
                Err(e) => {
                    eprintln!("config error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
