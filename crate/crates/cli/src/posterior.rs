use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use quadrgp::{DragObservation, RgpDimState, RgpEnsemble};
use serde::{Deserialize, Serialize};

const GRID_POINTS: usize = 101;
const AXES: [&str; 3] = ["x", "y", "z"];

/// Inference curve and training data of one body axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisSnapshot {
    pub axis: String,
    pub state: RgpDimState,
    /// `2·std` of the latent drag at each basis point.
    pub band_2sigma: Vec<f64>,
    /// `(v, mean, 2·std)` on a uniform grid over the basis span.
    pub curve: Vec<[f64; 3]>,
    /// Accepted `(v, ã)` samples for this axis.
    pub observations: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSnapshot {
    pub axes: Vec<AxisSnapshot>,
}

impl PosteriorSnapshot {
    pub fn new(ens: &RgpEnsemble, observations: &[DragObservation]) -> Self {
        let axes = ens
            .dims
            .iter()
            .enumerate()
            .map(|(d, s)| axis_snapshot(AXES[d], s, observations.iter().map(|o| [o.v_b[d], o.a_tilde[d]])))
            .collect();
        Self { axes }
    }

    pub fn ensemble(&self) -> Result<RgpEnsemble> {
        ensure!(self.axes.len() == 3, "posterior snapshot needs 3 axes, found {}", self.axes.len());
        let mut dims = self.axes.iter().map(|a| a.state.clone());
        let mut ens = RgpEnsemble {
            dims: [dims.next().unwrap(), dims.next().unwrap(), dims.next().unwrap()],
        };
        ens.refresh_cache()?;
        Ok(ens)
    }
}

fn axis_snapshot(name: &str, s: &RgpDimState, obs: impl Iterator<Item = [f64; 2]>) -> AxisSnapshot {
    let band = s.basis_v.iter().map(|v| 2.0 * s.infer(*v).1.sqrt()).collect();
    let (lo, hi) = (s.basis_v[0], s.basis_v[s.len() - 1]);
    let curve = (0..GRID_POINTS)
        .map(|i| {
            let v = lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64;
            let (mu, var) = s.infer(v);
            [v, mu, 2.0 * var.sqrt()]
        })
        .collect();
    AxisSnapshot {
        axis: name.into(),
        state: s.clone(),
        band_2sigma: band,
        curve,
        observations: obs.collect(),
    }
}

/// Writes the ensemble's posterior and the accepted observations as JSON.
pub fn export_posterior(ens: &RgpEnsemble, observations: &[DragObservation], path: &Path) -> Result<PosteriorSnapshot> {
    let snap = PosteriorSnapshot::new(ens, observations);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string(&snap)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(snap)
}

pub fn load_posterior(path: &Path) -> Result<(RgpEnsemble, PosteriorSnapshot)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let snap: PosteriorSnapshot = serde_json::from_str(&text)?;
    Ok((snap.ensemble()?, snap))
}
