use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use quadrgp::sim::{pretrain_gp, run_episode, Episode, SimConfig, Variant};
use quadrgp::trajectory::SampledTrajectory;
use quadrgp::RgpParamVector;
use rayon::prelude::*;

use crate::posterior::export_posterior;
use crate::report::{write_report, CellFailure, Report};
use crate::spec::{Cell, ExperimentSpec, TrajectorySpec};

pub const LOG_DIR: &str = "logs";
pub const POSTERIOR_DIR: &str = "posteriors";

/// Batch GP fitted on the residuals of a nominal run over a random trajectory.
pub fn train_gp(spec: &ExperimentSpec, v_max: f64, seed: u64) -> Result<RgpParamVector> {
    let traj = match &spec.trajectory {
        TrajectorySpec::Random(r) => r.build(v_max, seed, &spec.sim)?,
        _ => spec.gp_training.build(v_max, seed, &spec.sim)?,
    };
    let cfg = SimConfig {
        variant: Variant::Nominal,
        seed,
        pretrained: None,
        ..spec.sim.clone()
    };
    let ep = run_episode(&traj, &cfg)?;
    if let Some(f) = &ep.log.header.failure {
        anyhow::bail!("gp training run failed: {f}");
    }
    Ok(pretrain_gp(&ep.observations, spec.sim.rgp.m, spec.sim.rgp.hyper)?)
}

pub fn cell_config(spec: &ExperimentSpec, cell: &Cell) -> Result<SimConfig> {
    let pretrained = match cell.variant {
        Variant::Gp => Some(train_gp(spec, cell.v_max, cell.seed).context("training the gp baseline")?),
        _ => None,
    };
    Ok(SimConfig {
        variant: cell.variant,
        seed: cell.seed,
        pretrained,
        ..spec.sim.clone()
    })
}

/// Runs one grid cell and labels its log with the grid coordinates.
pub fn run_cell(spec: &ExperimentSpec, cell: &Cell) -> Result<(SampledTrajectory, Episode)> {
    let traj = spec.trajectory.build(cell.v_max, cell.seed, &spec.sim)?;
    let cfg = cell_config(spec, cell)?;
    let mut ep = run_episode(&traj, &cfg)?;
    ep.log.header.trajectory = spec.trajectory.name();
    ep.log.header.v_max = cell.v_max;
    Ok((traj, ep))
}

pub fn cell_stem(spec: &ExperimentSpec, cell: &Cell) -> String {
    let v = (cell.v_max * 1e3).round() / 1e3;
    format!("{}_{}_{}_{}", spec.trajectory.name(), v, cell.variant, cell.seed)
}

/// Writes the episode log and, for the online variant, posterior snapshots at
/// episode start and end.
pub fn write_episode(out: &Path, stem: &str, ep: &Episode) -> Result<Vec<PathBuf>> {
    let mut paths = ep.log.write_files(&out.join(LOG_DIR), stem)?;
    if let (Some(start), Some(end)) = (&ep.ensemble_start, &ep.ensemble_end) {
        let dir = out.join(POSTERIOR_DIR);
        let p = dir.join(format!("{stem}_start.json"));
        export_posterior(start, &[], &p)?;
        paths.push(p);
        let p = dir.join(format!("{stem}_end.json"));
        export_posterior(end, &ep.observations, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Executes the whole grid on a worker pool, writes every artifact and the
/// report. Individual episode failures are recorded and do not stop the suite.
pub fn run_suite(spec: &ExperimentSpec) -> Result<Report> {
    spec.validate()?;
    let out = spec.output_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(spec.workers).build()?;
    let cells = spec.cells();
    let failures: Vec<Option<CellFailure>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let stem = cell_stem(spec, cell);
                log::info!("running {stem}");
                let result = run_cell(spec, cell).and_then(|(_, ep)| write_episode(&out, &stem, &ep));
                match result {
                    Ok(_) => None,
                    Err(e) => {
                        log::error!("{stem}: {e:#}");
                        Some(CellFailure { stem, error: format!("{e:#}") })
                    }
                }
            })
            .collect()
    });
    let failures: Vec<CellFailure> = failures.into_iter().flatten().collect();
    write_report(&out, &failures)
}
