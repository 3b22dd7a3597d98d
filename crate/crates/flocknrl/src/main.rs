use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flocknrl::{eval_run, export_trajectories, run_scenario, Error, Scenario};

/// Mean-field flocking by fictitious play.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run (or resume) a scenario into a run directory.
    Run {
        /// Bundled scenario name or path to a scenario file.
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write agent trajectories under the final policy to CSV.
    Export {
        run_dir: PathBuf,
        #[arg(long)]
        agents: usize,
        #[arg(long)]
        steps: usize,
        /// Output file, `trajectories.csv` in the run directory by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Complete the performance matrix and write plot data.
    Eval { run_dir: PathBuf },
    /// List the bundled scenarios.
    Scenarios,
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { scenario, out, seed } => {
            let mut scenario = Scenario::load(&scenario)?;
            if let Some(seed) = seed {
                scenario.config.seed = seed;
            }
            println!("running {} into {}", scenario.name, out.display());
            run_scenario(&scenario, &out, |p| {
                let r = p.report;
                match r.exploitability.as_ref().and_then(|e| Some((*e.raw.last()?, *e.smoothed.last()?))) {
                    Some((raw, smooth)) => println!(
                        "iteration {}: e = {raw:.4} (smoothed {smooth:.4}), {:.1} s",
                        r.j, p.seconds
                    ),
                    None => println!("iteration {}: {:.1} s", r.j, p.seconds),
                }
            })?;
        }
        Command::Export {
            run_dir,
            agents,
            steps,
            out,
        } => {
            let s = export_trajectories(&run_dir, agents, steps, out.as_deref())?;
            println!(
                "wrote {} rows to {} (obstacle hits on {:.2}% of steps)",
                s.rows,
                s.path.display(),
                100.0 * s.hit_frequency
            );
        }
        Command::Eval { run_dir } => {
            let s = eval_run(&run_dir)?;
            for f in &s.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Scenarios => {
            for (name, _) in flocknrl::scenario::BUNDLED {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
