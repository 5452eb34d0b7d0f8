use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use noisediv_cli::config::RunSpec;
use noisediv_cli::plot::{self, PlotKind};
use noisediv_cli::run::{self, RunOptions};
use noisediv_cli::analyze;

#[derive(Parser)]
#[command(name = "noisediv", version, about = "Optimize initial noises for diverse generated sets")]
struct Cli {
    /// Override the config seed (and any swept seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Runs executed concurrently when a config sweeps several.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory for `run`, output file for `plot`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a TOML run spec.
    Run { config: PathBuf },
    /// Draw a metrics or spectrum table as SVG with a sidecar CSV.
    Plot {
        table: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
    },
    /// Verify a run directory and compute band energies and spectra.
    Analyze { run_dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let spec = RunSpec::load(&config)?;
            let opts = RunOptions {
                seed: cli.seed,
                out: cli.out,
                jobs: cli.jobs,
            };
            let mut failed = 0;
            for (dir, res) in run::run_all(&spec, &opts)? {
                match res {
                    Ok(o) => eprintln!(
                        "{}: {} iterations, v_B {:.4} -> {:.4}, stop {:?}",
                        dir.display(),
                        o.summary.iterations,
                        o.summary.initial.v_b,
                        o.summary.final_.v_b,
                        o.summary.stop_reason
                    ),
                    Err(e) => {
                        failed += 1;
                        eprintln!("{}: failed: {e:#}", dir.display());
                    }
                }
            }
            if failed > 0 {
                bail!("{failed} run(s) failed");
            }
            Ok(())
        }
        Command::Plot { table, kind } => {
            let out = cli.out.unwrap_or_else(|| plot::default_output(&table, kind));
            let series = plot::plot(&table, kind, &out)?;
            eprintln!("{}: {} series", out.display(), series.len());
            Ok(())
        }
        Command::Analyze { run_dir } => {
            let a = analyze::analyze(&run_dir)?;
            let f = a.band_fractions;
            eprintln!(
                "{}: {} files verified; band energy low {:.3} mid {:.3} high {:.3}",
                run_dir.display(),
                a.verified_files,
                f[0],
                f[1],
                f[2]
            );
            Ok(())
        }
    }
}
