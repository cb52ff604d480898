use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use quadrgp::sim::{compute_metrics, Variant};
use quadrgp_cli::spec::{Cell, ExperimentSpec, Overrides};
use quadrgp_cli::suite::{cell_stem, run_cell, write_episode};
use quadrgp_cli::{export_posterior, run_suite, write_report};

#[derive(Parser)]
#[command(name = "quadrgp", version, about = "Quadrotor MPC experiments with online GP drag learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment spec (TOML).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Comma-separated speed limits, m/s.
    #[arg(long, value_delimiter = ',')]
    v_max: Option<Vec<f64>>,
    /// Comma-separated controller variants (nominal, gp, rgp).
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

impl Common {
    fn spec(&self, workers: Option<usize>) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(p) => ExperimentSpec::load(p)?,
            None => ExperimentSpec::default(),
        };
        spec.apply(&Overrides {
            v_max: self.v_max.clone(),
            variants: self.variants.clone(),
            seeds: self.seeds.clone(),
            output_dir: self.output.clone(),
            workers,
        });
        spec.validate()?;
        Ok(spec)
    }

    fn first_cell(spec: &ExperimentSpec) -> Cell {
        Cell {
            v_max: spec.v_max[0],
            seed: spec.seeds[0],
            variant: spec.variants[0],
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample the reference trajectory of the first grid cell to CSV.
    GenTraj {
        #[command(flatten)]
        common: Common,
        /// Destination CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the first grid cell and write its log.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run the whole grid and write logs, tables, posteriors and the report index.
    Suite {
        #[command(flatten)]
        common: Common,
        /// Worker threads (0 = all cores).
        #[arg(short, long)]
        workers: Option<usize>,
    },
    /// Run an online-GP episode and write its posterior at start and end.
    ExportPosterior {
        #[command(flatten)]
        common: Common,
        /// Destination for the end-of-episode posterior; `*_start.json` is written alongside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute tables and the report index from the logs in a directory.
    Report {
        #[arg(short, long, default_value = "out")]
        dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenTraj { common, out } => {
            let spec = common.spec(None)?;
            let cell = Common::first_cell(&spec);
            let traj = spec.trajectory.build(cell.v_max, cell.seed, &spec.sim)?;
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir)?;
            }
            traj.write_csv(fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?)?;
            println!(
                "{}: {} samples, {:.2} s, peak speed {:.3} m/s",
                out.display(),
                traj.len(),
                traj.duration(),
                traj.peak_speed()
            );
            Ok(true)
        }
        Command::Run { common } => {
            let spec = common.spec(None)?;
            let cell = Common::first_cell(&spec);
            let stem = cell_stem(&spec, &cell);
            let (_, ep) = run_cell(&spec, &cell)?;
            write_episode(&spec.output_dir, &stem, &ep)?;
            let m = compute_metrics(&ep.log)?;
            println!(
                "{stem}: {} steps, RMSE {:.2} mm, |cov| [{:.3e}, {:.3e}, {:.3e}], mean solve {:.3} ms",
                m.steps, m.rmse_mm, m.cov_v_e[0], m.cov_v_e[1], m.cov_v_e[2], m.mean_solve_ms
            );
            if let Some(f) = &ep.log.header.failure {
                eprintln!("episode failed: {f}");
                return Ok(false);
            }
            Ok(true)
        }
        Command::Suite { common, workers } => {
            let spec = common.spec(workers)?;
            let report = run_suite(&spec)?;
            print!("{}", fs::read_to_string(spec.output_dir.join(&report.table))?);
            for f in &report.failures {
                eprintln!("FAILED {}: {}", f.stem, f.error);
            }
            Ok(report.all_succeeded)
        }
        Command::ExportPosterior { common, out } => {
            let mut spec = common.spec(None)?;
            spec.variants = vec![Variant::Rgp];
            let cell = Common::first_cell(&spec);
            let (_, ep) = run_cell(&spec, &cell)?;
            let (start, end) = (ep.ensemble_start.as_ref().unwrap(), ep.ensemble_end.as_ref().unwrap());
            let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let start_path = out.with_file_name(format!("{stem}_start.json"));
            export_posterior(start, &[], &start_path)?;
            export_posterior(end, &ep.observations, &out)?;
            println!("{} and {}", start_path.display(), out.display());
            Ok(ep.log.header.failure.is_none())
        }
        Command::Report { dir } => {
            let report = write_report(&dir, &[])?;
            print!("{}", fs::read_to_string(dir.join(&report.table))?);
            for f in &report.failures {
                eprintln!("FAILED {}: {}", f.stem, f.error);
            }
            Ok(report.all_succeeded)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
