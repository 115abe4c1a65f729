use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use driml::harness::{compare_runs, run, ExperimentConfig, HarnessError, Preset};

#[derive(Parser)]
#[command(name = "driml", about = "Temporal InfoMax experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one preset.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the `preset` key of the config file.
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact Markov-chain curves, no training.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-task-segment summaries of finished runs.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        metric: String,
        #[arg(long, default_value_t = 100)]
        smoothing: usize,
    },
}

fn execute(cli: Cli) -> Result<String, HarnessError> {
    match cli.command {
        Command::Run { config, preset, seed, out } => {
            let mut cfg = ExperimentConfig::from_file(&config, preset)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.validate()?;
            Ok(serde_json::to_string_pretty(&run(&cfg)?)?)
        }
        Command::Analyze { config, out } => {
            let mut cfg = ExperimentConfig::from_file(&config, Some(Preset::Analyze))?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            Ok(serde_json::to_string_pretty(&run(&cfg)?)?)
        }
        Command::Compare { runs, metric, smoothing } => {
            Ok(serde_json::to_string_pretty(&compare_runs(&runs, &metric, smoothing)?)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
