//! Plant simulator and the closed learning/control loop.

mod log;
mod metrics;

pub use self::log::{EpisodeHeader, EpisodeLog, StepRecord, StepTiming};
pub use metrics::{compute_metrics, EpisodeMetrics};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augmented_model::RgpParamVector;
use crate::drag_models::DragModel;
use crate::dynamics::{
    f_phys_vec, idx, rk4_step, rotate_conj_raw, rotate_raw, ControlInput, QuadParams, QuadState,
    Quaternion, StateVec,
};
use crate::error::{Error, Result};
use crate::estimator::{observation_from_states, Rejection, ResidualConfig};
use crate::mpc::{MpcController, OcpConfig, ReferenceWindow};
use crate::rgp::{batch_gp_fit, rgp_init, DragObservation, KernelHyperparams, RgpEnsemble};
use crate::trajectory::SampledTrajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Nominal,
    /// Fixed parameters from an offline batch GP.
    Gp,
    /// Online recursive GP.
    Rgp,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nominal" => Ok(Self::Nominal),
            "gp" => Ok(Self::Gp),
            "rgp" => Ok(Self::Rgp),
            other => Err(Error::Config(format!("unknown controller variant '{other}'"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Nominal => "nominal",
            Self::Gp => "gp",
            Self::Rgp => "rgp",
        })
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> Self {
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RgpSettings {
    /// Basis points per axis.
    pub m: usize,
    pub hyper: KernelHyperparams,
    /// Half-width of the basis interval; defaults to the reference's peak speed.
    pub basis_v_max: Option<f64>,
}

impl Default for RgpSettings {
    fn default() -> Self {
        Self {
            m: 20,
            hyper: KernelHyperparams::default(),
            basis_v_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub delta_t_sim: f64,
    pub control_dt: f64,
    pub drag: DragModel,
    pub variant: Variant,
    pub seed: u64,
    pub quad: QuadParams,
    pub ocp: OcpConfig,
    pub residual: ResidualConfig,
    pub rgp: RgpSettings,
    /// Parameters for the `gp` variant.
    pub pretrained: Option<RgpParamVector>,
    /// Standard deviation of additive Gaussian noise on measured position and velocity.
    pub measurement_noise: f64,
    /// Added to the reference's first position to form the initial state.
    pub initial_offset: [f64; 3],
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            delta_t_sim: 0.001,
            control_dt: 0.01,
            drag: DragModel::default(),
            variant: Variant::Nominal,
            seed: 0,
            quad: QuadParams::default(),
            ocp: OcpConfig::default(),
            residual: ResidualConfig::default(),
            rgp: RgpSettings::default(),
            pretrained: None,
            measurement_noise: 0.0,
            initial_offset: [0.0; 3],
        }
    }
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let n = r.round();
    ((r - n).abs() < 1e-9 && n >= 1.0).then_some(n as usize)
}

impl SimConfig {
    pub fn substeps(&self) -> Result<usize> {
        integer_ratio(self.control_dt, self.delta_t_sim).ok_or_else(|| {
            Error::Config(format!(
                "control_dt {} is not an integer multiple of delta_t_sim {}",
                self.control_dt, self.delta_t_sim
            ))
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_t_sim > 0.0) || !(self.control_dt > 0.0) {
            return Err(Error::Config("time steps must be positive".into()));
        }
        self.substeps()?;
        self.quad.validate()?;
        self.drag.params.validate()?;
        self.ocp.validate()?;
        self.residual.validate()?;
        self.rgp.hyper.validate()?;
        if self.rgp.m < 2 {
            return Err(Error::Config("RGP needs at least 2 basis points".into()));
        }
        if !(self.measurement_noise >= 0.0) {
            return Err(Error::Config("measurement noise must be nonnegative".into()));
        }
        match (self.variant, &self.pretrained) {
            (Variant::Gp, None) => {
                return Err(Error::Config("variant 'gp' needs pretrained parameters".into()))
            }
            (_, Some(rp)) => rp.validate()?,
            _ => {}
        }
        Ok(())
    }
}

/// Continuous plant dynamics: physics plus ground-truth drag rotated into the world frame.
pub fn plant_derivative(x: &StateVec, u: &ControlInput, quad: &QuadParams, drag: &DragModel) -> StateVec {
    let mut dx = f_phys_vec(x, &u.to_vec(), quad);
    let q = x.fixed_rows::<4>(idx::QUAT).into_owned();
    let v_b = rotate_conj_raw(&q, &x.fixed_rows::<3>(idx::VEL).into_owned());
    let a_w = rotate_raw(&q, &drag.accel_body(&v_b, u, quad.mass));
    let mut dv = dx.fixed_rows_mut::<3>(idx::VEL);
    dv += a_w;
    dx
}

/// One RK4 step of the plant over `delta_t_sim`.
pub fn plant_step(x: &QuadState, u: &ControlInput, cfg: &SimConfig) -> Result<QuadState> {
    rk4_step(
        |xv, _| plant_derivative(xv, u, &cfg.quad, &cfg.drag),
        x,
        u,
        cfg.delta_t_sim,
    )
}

/// Advances the plant over one control period; on failure reports the step index.
fn plant_advance(x: &QuadState, u: &ControlInput, cfg: &SimConfig, n: usize, k: usize, t: f64) -> Result<QuadState> {
    let mut x = *x;
    for i in 0..n {
        x = plant_step(&x, u, cfg).map_err(|e| Error::Integration {
            step: k,
            t: t + i as f64 * cfg.delta_t_sim,
            reason: e.to_string(),
        })?;
    }
    Ok(x)
}

/// Physics-only prediction over one control period with the plant's substeps.
pub fn predict_phys(x: &QuadState, u: &ControlInput, quad: &QuadParams, dt: f64, substeps: usize) -> Result<QuadState> {
    let h = dt / substeps as f64;
    let mut x = *x;
    for _ in 0..substeps {
        x = rk4_step(|xv, uv| f_phys_vec(xv, uv, quad), &x, u, h)?;
    }
    Ok(x)
}

/// Reference window at sample `k` with node spacing `stride` samples.
pub fn reference_window(traj: &SampledTrajectory, k: usize, stride: usize, n_h: usize) -> ReferenceWindow {
    let mut x_ref = Vec::with_capacity(n_h + 1);
    let mut u_ref = Vec::with_capacity(n_h + 1);
    for j in 0..=n_h {
        let (x, u) = traj.at(k + j * stride);
        x_ref.push(*x);
        u_ref.push(*u);
    }
    ReferenceWindow { x_ref, u_ref }
}

/// Batch-GP fit per body axis on recorded observations.
pub fn pretrain_gp(
    observations: &[DragObservation],
    m: usize,
    hyper_init: KernelHyperparams,
) -> Result<RgpParamVector> {
    let mut states = vec![];
    for d in 0..3 {
        let data: Vec<(f64, f64)> = observations.iter().map(|o| (o.v_b[d], o.a_tilde[d])).collect();
        let fit = batch_gp_fit(&data, m, hyper_init)?;
        states.push(fit.state);
    }
    let states: [_; 3] = states.try_into().unwrap();
    Ok(RgpParamVector::from_states(&states))
}

/// Result of one closed-loop run.
#[derive(Debug, Clone)]
pub struct Episode {
    pub log: EpisodeLog,
    /// RGP posterior before the first and after the last update (`rgp` only).
    pub ensemble_start: Option<RgpEnsemble>,
    pub ensemble_end: Option<RgpEnsemble>,
    /// Accepted residual observations, in order.
    pub observations: Vec<DragObservation>,
}

impl Episode {
    pub fn failed(&self) -> bool {
        self.log.header.failure.is_some()
    }
}

/// Runs the measure → solve → apply → predict → residual → update loop over
/// the whole reference. Controller or plant failures end the episode early
/// with the failure recorded in the log header.
pub fn run_episode(traj: &SampledTrajectory, cfg: &SimConfig) -> Result<Episode> {
    cfg.validate()?;
    traj.validate(None)?;
    let f_traj = 1.0 / cfg.control_dt;
    if (traj.f_s - f_traj).abs() > 1e-9 * f_traj {
        return Err(Error::Config(format!(
            "trajectory sampled at {} Hz but the controller runs at {f_traj} Hz",
            traj.f_s
        )));
    }
    let stride = integer_ratio(cfg.ocp.interval(), cfg.control_dt).ok_or_else(|| {
        Error::Config("shooting interval must be an integer number of control periods".into())
    })?;
    let substeps = cfg.substeps()?;
    let dt = cfg.control_dt;

    let mut ensemble = match cfg.variant {
        Variant::Rgp => {
            let v = cfg.rgp.basis_v_max.unwrap_or_else(|| traj.peak_speed().max(1.0));
            Some(rgp_init(v, cfg.rgp.m, cfg.rgp.hyper)?)
        }
        _ => None,
    };
    let ensemble_start = ensemble.clone();
    let mut params = match cfg.variant {
        Variant::Nominal => None,
        Variant::Gp => cfg.pretrained.clone(),
        Variant::Rgp => ensemble.as_ref().map(RgpParamVector::from_ensemble),
    };
    let mut controller = MpcController::new(cfg.ocp.clone(), cfg.quad.clone(), params.as_ref(), dt)?;
    let digest = |p: &Option<RgpParamVector>| p.as_ref().map_or_else(|| "-".to_string(), |p| p.digest());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = (cfg.measurement_noise > 0.0)
        .then(|| Normal::new(0.0, cfg.measurement_noise).unwrap());
    let mut measure = |x: &QuadState| -> QuadState {
        let mut m = *x;
        if let Some(n) = &noise {
            m.p_w += Vector3::from_fn(|_, _| n.sample(&mut rng));
            m.v_w += Vector3::from_fn(|_, _| n.sample(&mut rng));
        }
        m
    };

    let x_start = traj.x_ref[0];
    let mut x = QuadState::from_vec(&x_start);
    x.q_wb = Quaternion::from_vec(&x_start.fixed_rows::<4>(idx::QUAT).into_owned()).normalized();
    x.p_w += Vector3::from(cfg.initial_offset);

    let mut log = EpisodeLog::new(EpisodeHeader::new(cfg, traj));
    let mut observations = vec![];
    let mut x_meas = measure(&x);

    for k in 0..traj.len() {
        let t = traj.times[k];
        let window = reference_window(traj, k, stride, cfg.ocp.n_h);
        let hash_used = digest(&params);

        let sol = match controller.solve(&x_meas, &window) {
            Ok(sol) => sol,
            Err(e) => {
                log.header.failure = Some(format!("controller failed at step {k}: {e}"));
                break;
            }
        };
        let u = ControlInput::saturating(sol.first_input().into());

        let x_next = match plant_advance(&x, &u, cfg, substeps, k, t) {
            Ok(x) => x,
            Err(e) => {
                log.header.failure = Some(format!("plant failed: {e}"));
                break;
            }
        };
        let x_next_meas = measure(&x_next);
        let x_pred = predict_phys(&x_meas, &u, &cfg.quad, dt, substeps)?;
        let obs = observation_from_states(&x_next_meas, &x_pred, dt, t + dt, &cfg.residual);

        let update_start = Instant::now();
        if let Ok(o) = &obs {
            observations.push(*o);
            if let Some(ens) = ensemble.as_mut() {
                ens.update(o)?;
                let rp = RgpParamVector::from_ensemble(ens);
                controller.update_rgp_params(&rp)?;
                params = Some(rp);
            }
        }
        let update_time = update_start.elapsed().as_secs_f64();

        log.push(
            StepRecord {
                k,
                t,
                x_ref: traj.x_ref[k],
                x_meas: x_meas.to_vec(),
                u: u.values(),
                a_tilde: obs.as_ref().ok().map(|o| o.a_tilde),
                v_obs: obs.as_ref().ok().map(|o| o.v_b),
                rejection: obs.err(),
                hash_used,
                hash_after: digest(&params),
                kkt_residual: sol.kkt_residual,
                qp_iterations: sol.qp_iterations,
                active_constraints: sol.active_constraints,
                qp_converged: sol.qp_converged,
                fallback: sol.fallback,
            },
            StepTiming {
                solve_time: sol.solve_time,
                update_time,
            },
        );
        x = x_next;
        x_meas = x_next_meas;
    }

    Ok(Episode {
        log,
        ensemble_start,
        ensemble_end: ensemble,
        observations,
    })
}

/// Counts of rejected residual samples by reason.
pub fn rejection_counts(log: &EpisodeLog) -> (usize, usize) {
    let short = log.rows.iter().filter(|r| r.rejection == Some(Rejection::StepTooShort)).count();
    let nonfinite = log.rows.iter().filter(|r| r.rejection == Some(Rejection::NonFinite)).count();
    (short, nonfinite)
}
