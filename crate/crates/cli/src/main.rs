use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ldp_aimd::experiment::{self, ExperimentFile, RunOptions};
use ldp_aimd::{solve_optimum, Error};

#[derive(Parser)]
#[command(
    name = "ldp-aimd",
    version,
    about = "Private AIMD allocation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment file (every sweep point) and write summaries.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the system seed (swept seeds still win).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Maximum number of sweep points run concurrently.
        #[arg(long)]
        jobs: Option<usize>,
        /// Also write the full per-step trace.csv for each point.
        #[arg(long)]
        emit_trace: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the bundled reference experiment files.
    PaperSuite {
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the centralised optimum for the base system and print it.
    Solve {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run {
            config,
            seed,
            steps,
            jobs,
            emit_trace,
            out,
        } => {
            let opts = RunOptions {
                seed,
                steps,
                jobs,
                emit_trace,
                out,
            };
            let mut file = ExperimentFile::load(&config)?;
            experiment::apply_overrides(&mut file, &opts)?;
            eprintln!("{}: {} sweep point(s)", config.display(), file.sweep_size());
            let report = experiment::run_experiment(&file, &opts)?;
            for p in report.points.iter().flatten() {
                let ratio = p
                    .summary
                    .cost_ratio
                    .map_or_else(|| "n/a".to_string(), |r| format!("{r:.6}"));
                eprintln!("point {:03}: seed {} cost_ratio {ratio}", p.point, p.seed);
            }
            eprintln!("sweep table: {}", report.sweep_table.display());
            match report.first_error() {
                Some(e) => Err(e),
                None => Ok(()),
            }
        }
        Command::PaperSuite { out } => {
            for path in experiment::emit_paper_suite(&out)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Solve { config } => {
            let file = ExperimentFile::load(&config)?;
            let optimum = solve_optimum(&file.system.costs(), &file.system.resources)?;
            experiment::write_json(io::stdout().lock(), &optimum)
        }
    }
}
