use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use quadrgp::sim::{SimConfig, Variant};
use quadrgp::trajectory::{
    circle_trajectory_with, fit_polynomial, random_waypoints, sample_trajectory, CircleParams, SampledTrajectory,
    YawMode,
};
use serde::{Deserialize, Serialize};

/// Waypoint trajectory through a random cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomSpec {
    /// Cube edge; waypoints lie in `[−h/2, h/2]² × [h, 2h]`.
    pub hsize: f64,
    pub waypoints: usize,
    pub a_max: f64,
    /// Fixed waypoint seed; `None` uses the episode seed.
    pub waypoint_seed: Option<u64>,
    pub yaw: YawMode,
}

impl Default for RandomSpec {
    fn default() -> Self {
        Self {
            hsize: 10.0,
            waypoints: 8,
            a_max: 10.0,
            waypoint_seed: None,
            yaw: YawMode::Velocity,
        }
    }
}

impl RandomSpec {
    pub fn build(&self, v_max: f64, seed: u64, sim: &SimConfig) -> Result<SampledTrajectory> {
        let wp = random_waypoints(self.hsize, self.waypoints, self.waypoint_seed.unwrap_or(seed))?;
        let poly = fit_polynomial(&wp, v_max, self.a_max)?;
        Ok(sample_trajectory(&poly, 1.0 / sim.control_dt, self.yaw, &sim.quad)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CircleSpec {
    pub radius: f64,
    pub altitude: f64,
    pub ramp_laps: f64,
    pub hold_laps: f64,
    pub stop_decel: Option<f64>,
    pub yaw: YawMode,
}

impl Default for CircleSpec {
    fn default() -> Self {
        let p = CircleParams::default();
        Self {
            radius: p.radius,
            altitude: p.altitude,
            ramp_laps: p.ramp_laps,
            hold_laps: p.hold_laps,
            stop_decel: p.stop_decel,
            yaw: p.yaw,
        }
    }
}

impl CircleSpec {
    pub fn params(&self, v_max: f64) -> CircleParams {
        CircleParams {
            radius: self.radius,
            v_max,
            altitude: self.altitude,
            ramp_laps: self.ramp_laps,
            hold_laps: self.hold_laps,
            stop_decel: self.stop_decel,
            yaw: self.yaw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectorySpec {
    Random(RandomSpec),
    Circle(CircleSpec),
    /// Pre-sampled reference in the trajectory CSV format.
    File { path: PathBuf },
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self::Circle(CircleSpec::default())
    }
}

impl TrajectorySpec {
    pub fn name(&self) -> String {
        match self {
            Self::Random(_) => "random".into(),
            Self::Circle(_) => "circle".into(),
            Self::File { path } => path
                .file_stem()
                .map(|s| s.to_string_lossy().replace('_', "-"))
                .unwrap_or_else(|| "file".into()),
        }
    }

    pub fn build(&self, v_max: f64, seed: u64, sim: &SimConfig) -> Result<SampledTrajectory> {
        let traj = match self {
            Self::Random(r) => r.build(v_max, seed, sim)?,
            Self::Circle(c) => circle_trajectory_with(&c.params(v_max), 1.0 / sim.control_dt, &sim.quad)?,
            Self::File { path } => {
                let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
                let t = SampledTrajectory::read_csv(f)?;
                t.validate(Some(v_max))?;
                t
            }
        };
        Ok(traj)
    }
}

/// One experiment grid: trajectory × v_max × variant × seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub trajectory: TrajectorySpec,
    pub v_max: Vec<f64>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Worker threads for the grid; 0 uses all cores.
    pub workers: usize,
    pub sim: SimConfig,
    /// Trajectory the `gp` variant is pre-trained on when the experiment
    /// trajectory is not itself a random one.
    pub gp_training: RandomSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            trajectory: TrajectorySpec::default(),
            v_max: vec![6.0],
            variants: vec![Variant::Nominal, Variant::Gp, Variant::Rgp],
            seeds: vec![0],
            output_dir: PathBuf::from("out"),
            workers: 0,
            sim: SimConfig::default(),
            gp_training: RandomSpec::default(),
        }
    }
}

/// Command-line overrides applied on top of a spec file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub v_max: Option<Vec<f64>>,
    pub variants: Option<Vec<Variant>>,
    pub seeds: Option<Vec<u64>>,
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Loads a spec; relative trajectory file paths resolve against the spec's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut spec = Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let TrajectorySpec::File { path: p } = &mut spec.trajectory {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(spec)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.v_max {
            self.v_max = v.clone();
        }
        if let Some(v) = &o.variants {
            self.variants = v.clone();
        }
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.v_max.is_empty() || self.variants.is_empty() || self.seeds.is_empty() {
            bail!("experiment grid is empty (need at least one v_max, variant and seed)");
        }
        if self.v_max.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            bail!("v_max entries must be positive");
        }
        let distinct = |n: usize, set: usize, what: &str| -> Result<()> {
            if n != set {
                bail!("duplicate {what} in the experiment grid");
            }
            Ok(())
        };
        let vs: HashSet<u64> = self.v_max.iter().map(|v| ((v * 1e3).round()) as u64).collect();
        distinct(self.v_max.len(), vs.len(), "v_max")?;
        let var: HashSet<_> = self.variants.iter().collect();
        distinct(self.variants.len(), var.len(), "variants")?;
        let seeds: HashSet<_> = self.seeds.iter().collect();
        distinct(self.seeds.len(), seeds.len(), "seeds")?;
        if let TrajectorySpec::File { path } = &self.trajectory {
            if !path.is_file() {
                bail!("trajectory file {} does not exist", path.display());
            }
        }
        self.sim.validate()?;
        Ok(())
    }

    /// Grid cells in a fixed order: v_max, then seed, then variant.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = vec![];
        for &v_max in &self.v_max {
            for &seed in &self.seeds {
                for &variant in &self.variants {
                    out.push(Cell { v_max, seed, variant });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub v_max: f64,
    pub seed: u64,
    pub variant: Variant,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_minimal_spec() {
        let spec = ExperimentSpec::from_toml(
            r#"
            v_max = [3.0, 6.0]
            variants = ["nominal", "rgp"]
            [trajectory]
            kind = "circle"
            radius = 5.0
            yaw = { constant = 0.0 }
            [sim.ocp]
            n_h = 5
            "#,
        )
        .unwrap();
        assert_eq!(spec.v_max, vec![3.0, 6.0]);
        assert_eq!(spec.seeds, vec![0]);
        match &spec.trajectory {
            TrajectorySpec::Circle(c) => {
                assert_eq!(c.radius, 5.0);
                assert_eq!(c.hold_laps, 1.0);
                assert_eq!(c.yaw, YawMode::Constant(0.0));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(spec.cells().len(), 4);
        spec.validate().unwrap();
    }

    #[test]
    fn rejects_empty_or_duplicate_grids() {
        let mut spec = ExperimentSpec { v_max: vec![], ..Default::default() };
        assert!(spec.validate().is_err());
        spec.v_max = vec![3.0, 3.0];
        assert!(spec.validate().is_err());
        spec.v_max = vec![3.0];
        spec.seeds = vec![];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn missing_trajectory_file_is_rejected() {
        let spec = ExperimentSpec {
            trajectory: TrajectorySpec::File { path: "/nonexistent/traj.csv".into() },
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn overrides_replace_grid_axes() {
        let mut spec = ExperimentSpec::default();
        spec.apply(&Overrides {
            v_max: Some(vec![9.0]),
            variants: Some(vec![Variant::Nominal]),
            workers: Some(2),
            ..Default::default()
        });
        assert_eq!(spec.cells(), vec![Cell { v_max: 9.0, seed: 0, variant: Variant::Nominal }]);
        assert_eq!(spec.workers, 2);
    }
}
