//! Multiple-shooting MPC over `f_pred`, solved with one Gauss-Newton SQP
//! iteration per control step (real-time iteration).

mod discretize;
mod qp;

pub use discretize::{discretize, discretize_fd, integrate, Discretization};
pub use qp::{projected_gradient_residual, qp_objective, solve_qp, QpSolution};

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector4};
use serde::{Deserialize, Serialize};

use crate::augmented_model::{ResidualModel, RgpParamVector};
use crate::dynamics::{
    idx, quat_left, InputVec, QuadParams, QuadState, Quaternion, StateVec, STATE_DIM,
};
use crate::error::{Error, Result};

pub const ERROR_DIM: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcpConfig {
    /// Horizon length, s.
    pub t_h: f64,
    pub n_h: usize,
    /// Weights on `[p, attitude, v, ω]` errors.
    pub q: [f64; ERROR_DIM],
    pub r: [f64; 4],
    pub u_bounds: [f64; 2],
    /// RK4 steps per shooting interval.
    pub substeps: usize,
    pub qp_max_iter: usize,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            t_h: 1.0,
            n_h: 5,
            q: [10.0, 10.0, 10.0, 5.0, 5.0, 5.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1],
            r: [0.1; 4],
            u_bounds: [0.0, 1.0],
            substeps: 4,
            qp_max_iter: 200,
        }
    }
}

impl OcpConfig {
    pub fn interval(&self) -> f64 {
        self.t_h / self.n_h as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_h > 0.0) || self.n_h == 0 || self.substeps == 0 || self.qp_max_iter == 0 {
            return Err(Error::Config(
                "OCP needs t_h > 0, n_h >= 1, substeps >= 1, qp_max_iter >= 1".into(),
            ));
        }
        if self.q.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("state weights must be finite and nonnegative".into()));
        }
        if self.r.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Config("input weights must be strictly positive".into()));
        }
        let [lo, hi] = self.u_bounds;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!("input bounds [{lo}, {hi}] must lie inside [0, 1]")));
        }
        Ok(())
    }
}

/// Reference states and inputs at the shooting nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWindow {
    pub x_ref: Vec<StateVec>,
    pub u_ref: Vec<InputVec>,
}

impl ReferenceWindow {
    /// Constant hover reference at `x`.
    pub fn hover(x: &QuadState, quad: &QuadParams, n_h: usize) -> Self {
        Self {
            x_ref: vec![x.to_vec(); n_h + 1],
            u_ref: vec![InputVec::from_element(quad.hover_input()); n_h + 1],
        }
    }

    pub fn validate(&self, n_h: usize) -> Result<()> {
        if self.x_ref.len() != n_h + 1 || self.u_ref.len() < n_h {
            return Err(Error::Contract(format!(
                "reference window has {} states / {} inputs, horizon needs {} / {}",
                self.x_ref.len(),
                self.u_ref.len(),
                n_h + 1,
                n_h
            )));
        }
        for x in &self.x_ref {
            let q = x.fixed_rows::<4>(idx::QUAT).norm();
            if (q - 1.0).abs() > 1e-6 || x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract("reference quaternions must be unit".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub u_traj: Vec<InputVec>,
    pub x_traj: Vec<StateVec>,
    pub kkt_residual: f64,
    /// Wall-clock seconds spent in the SQP iteration.
    pub solve_time: f64,
    pub qp_iterations: usize,
    pub qp_converged: bool,
    pub active_constraints: usize,
    /// Set when the iteration failed and the shifted previous plan was returned.
    pub fallback: bool,
}

impl OcpSolution {
    /// Initial guess: the reference itself with the measured state at node 0.
    pub fn from_reference(x0: &QuadState, reference: &ReferenceWindow, cfg: &OcpConfig) -> Self {
        let [lo, hi] = cfg.u_bounds;
        let mut x_traj = reference.x_ref[..=cfg.n_h].to_vec();
        x_traj[0] = x0.to_vec();
        Self {
            u_traj: reference.u_ref[..cfg.n_h]
                .iter()
                .map(|u| u.map(|v| v.clamp(lo, hi)))
                .collect(),
            x_traj,
            kkt_residual: f64::INFINITY,
            solve_time: 0.0,
            qp_iterations: 0,
            qp_converged: false,
            active_constraints: 0,
            fallback: false,
        }
    }

    /// First control of the plan.
    pub fn first_input(&self) -> InputVec {
        self.u_traj[0]
    }

    /// Advances the plan by `fraction` of one shooting interval by linear
    /// interpolation between nodes (the last node is extrapolated).
    pub fn shifted(&self, fraction: f64) -> Self {
        let n = self.u_traj.len();
        let lerp = |a: &StateVec, b: &StateVec| {
            let mut x = a + (b - a) * fraction;
            let q = Quaternion::from_vec(&x.fixed_rows::<4>(idx::QUAT).into_owned()).normalized_keep_sign();
            x.fixed_rows_mut::<4>(idx::QUAT).copy_from(&q.to_vec());
            x
        };
        let mut x_traj: Vec<StateVec> = (0..n).map(|k| lerp(&self.x_traj[k], &self.x_traj[k + 1])).collect();
        let last = self.x_traj[n];
        let before = if n > 0 { self.x_traj[n - 1] } else { last };
        x_traj.push(lerp(&last, &(last * 2.0 - before)));
        let u_traj = (0..n)
            .map(|k| {
                let next = self.u_traj[(k + 1).min(n - 1)];
                self.u_traj[k] + (next - self.u_traj[k]) * fraction
            })
            .collect();
        Self {
            u_traj,
            x_traj,
            ..self.clone()
        }
    }

    fn check_shapes(&self, n_h: usize) -> Result<()> {
        if self.u_traj.len() != n_h || self.x_traj.len() != n_h + 1 {
            return Err(Error::Contract(format!(
                "warm start has {} inputs / {} states, horizon needs {n_h} / {}",
                self.u_traj.len(),
                self.x_traj.len(),
                n_h + 1
            )));
        }
        Ok(())
    }
}

fn quat_of(x: &StateVec) -> Vector4<f64> {
    x.fixed_rows::<4>(idx::QUAT).into_owned()
}

fn align_quat(x: &mut StateVec, to: &Vector4<f64>) {
    if quat_of(x).dot(to) < 0.0 {
        let mut q = x.fixed_rows_mut::<4>(idx::QUAT);
        q.neg_mut();
    }
}

/// Linear tracking residual `E x − y` at one node. The attitude rows are
/// `2 s vec(q_ref⁻¹ ⊗ q)` with the sign `s` chosen at the linearization point,
/// which makes the cost indifferent to `q` vs `−q`.
fn node_residual_map(
    x_ref: &StateVec,
    q_lin: &Vector4<f64>,
) -> (SMatrix<f64, ERROR_DIM, STATE_DIM>, SVector<f64, ERROR_DIM>) {
    let q_ref = quat_of(x_ref);
    let q_ref_inv = Vector4::new(q_ref[0], -q_ref[1], -q_ref[2], -q_ref[3]);
    let s = if q_ref.dot(q_lin) < 0.0 { -1.0 } else { 1.0 };
    let mut e = SMatrix::<f64, ERROR_DIM, STATE_DIM>::zeros();
    let mut y = SVector::<f64, ERROR_DIM>::zeros();
    for i in 0..3 {
        e[(i, idx::POS + i)] = 1.0;
        y[i] = x_ref[idx::POS + i];
        e[(6 + i, idx::VEL + i)] = 1.0;
        y[6 + i] = x_ref[idx::VEL + i];
        e[(9 + i, idx::RATE + i)] = 1.0;
        y[9 + i] = x_ref[idx::RATE + i];
    }
    let att = quat_left(&q_ref_inv).fixed_rows::<3>(1) * (2.0 * s);
    e.fixed_view_mut::<3, 4>(3, idx::QUAT).copy_from(&att);
    (e, y)
}

/// Tracking error vector `[p, attitude, v, ω]` of `x` against `x_ref`.
pub fn tracking_error(x: &StateVec, x_ref: &StateVec) -> SVector<f64, ERROR_DIM> {
    let (e, y) = node_residual_map(x_ref, &quat_of(x));
    e * x - y
}

/// One SQP real-time iteration.
pub fn sqp_rti_step(
    cfg: &OcpConfig,
    quad: &QuadParams,
    model: &ResidualModel,
    x0: &QuadState,
    reference: &ReferenceWindow,
    warm: &OcpSolution,
) -> Result<OcpSolution> {
    let start = Instant::now();
    let n = cfg.n_h;
    let nu = 4 * n;
    warm.check_shapes(n)?;
    reference.validate(n)?;
    let t_int = cfg.interval();
    let [u_lo, u_hi] = cfg.u_bounds;

    let x0v = x0.to_vec();
    let mut xbar = warm.x_traj.clone();
    align_quat(&mut xbar[0], &quat_of(&x0v));
    for k in 1..=n {
        let prev = quat_of(&xbar[k - 1]);
        align_quat(&mut xbar[k], &prev);
    }
    let ubar: Vec<InputVec> = warm.u_traj.iter().map(|u| u.map(|v| v.clamp(u_lo, u_hi))).collect();

    // Condensed dynamics: Δx_k = c_k + G_k Δu.
    let mut c = vec![x0v - xbar[0]];
    let mut g_mats = vec![DMatrix::<f64>::zeros(STATE_DIM, nu)];
    let mut infeas = c[0].amax();
    for k in 0..n {
        let d = discretize(quad, model, &xbar[k], &ubar[k], t_int, cfg.substeps)?;
        let defect = d.x_next - xbar[k + 1];
        infeas = infeas.max(defect.amax());
        c.push(d.a * c[k] + defect);
        let mut gk = DMatrix::<f64>::zeros(STATE_DIM, nu);
        gk.gemm(1.0, &d.a, &g_mats[k], 0.0);
        let mut blk = gk.view_mut((0, 4 * k), (STATE_DIM, 4));
        blk += d.b;
        g_mats.push(gk);
    }

    let sqrt_q = SVector::<f64, ERROR_DIM>::from_fn(|i, _| cfg.q[i].sqrt());
    let mut h = DMatrix::<f64>::zeros(nu, nu);
    let mut g = DVector::<f64>::zeros(nu);
    for k in 1..=n {
        let (e, y) = node_residual_map(&reference.x_ref[k], &quat_of(&xbar[k]));
        let resid = (e * (xbar[k] + c[k]) - y).component_mul(&sqrt_q);
        let mut e_w = e;
        for i in 0..ERROR_DIM {
            e_w.row_mut(i).scale_mut(sqrt_q[i]);
        }
        let m = DMatrix::from_fn(ERROR_DIM, STATE_DIM, |i, j| e_w[(i, j)]) * &g_mats[k];
        h.gemm_tr(1.0, &m, &m, 1.0);
        g.gemv_tr(1.0, &m, &DVector::from_column_slice(resid.as_slice()), 1.0);
    }
    for k in 0..n {
        for i in 0..4 {
            let j = 4 * k + i;
            h[(j, j)] += cfg.r[i];
            g[j] += cfg.r[i] * (ubar[k][i] - reference.u_ref[k][i]);
        }
    }
    let lb = DVector::from_fn(nu, |j, _| u_lo - ubar[j / 4][j % 4]);
    let ub = DVector::from_fn(nu, |j, _| u_hi - ubar[j / 4][j % 4]);

    let stationarity = (0..nu)
        .map(|j| (-g[j]).clamp(lb[j], ub[j]).abs())
        .fold(0.0, f64::max);
    let kkt_residual = stationarity.max(infeas);

    let qp = solve_qp(&h, &g, &lb, &ub, None, cfg.qp_max_iter)?;

    let u_traj: Vec<InputVec> = (0..n)
        .map(|k| {
            InputVec::from_fn(|i, _| (ubar[k][i] + qp.x[4 * k + i]).clamp(u_lo, u_hi))
        })
        .collect();
    let mut x_traj = Vec::with_capacity(n + 1);
    x_traj.push(x0v);
    for k in 1..=n {
        let mut x = xbar[k] + c[k] + &g_mats[k] * &qp.x;
        let q = Quaternion::from_vec(&quat_of(&x)).normalized_keep_sign();
        x.fixed_rows_mut::<4>(idx::QUAT).copy_from(&q.to_vec());
        x_traj.push(x);
    }
    if x_traj.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(Error::Solver("non-finite state after the SQP step".into()));
    }

    Ok(OcpSolution {
        u_traj,
        x_traj,
        kkt_residual,
        solve_time: start.elapsed().as_secs_f64(),
        qp_iterations: qp.iterations,
        qp_converged: qp.converged,
        active_constraints: qp.active,
        fallback: false,
    })
}

/// Receding-horizon controller owning the warm start and the residual model.
#[derive(Debug, Clone)]
pub struct MpcController {
    cfg: OcpConfig,
    quad: QuadParams,
    model: ResidualModel,
    warm: Option<OcpSolution>,
    shift_fraction: f64,
}

impl MpcController {
    /// `rp = None` gives the nominal (physics-only) controller.
    pub fn new(
        cfg: OcpConfig,
        quad: QuadParams,
        rp: Option<&RgpParamVector>,
        control_dt: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        quad.validate()?;
        if !(control_dt > 0.0) {
            return Err(Error::Config("control_dt must be positive".into()));
        }
        let model = match rp {
            Some(rp) => ResidualModel::new(rp)?,
            None => ResidualModel::none(),
        };
        let shift_fraction = (control_dt / cfg.interval()).min(1.0);
        Ok(Self {
            cfg,
            quad,
            model,
            warm: None,
            shift_fraction,
        })
    }

    pub fn config(&self) -> &OcpConfig {
        &self.cfg
    }

    pub fn residual_model(&self) -> &ResidualModel {
        &self.model
    }

    pub fn update_rgp_params(&mut self, rp: &RgpParamVector) -> Result<()> {
        self.model.set_params(rp)
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Solves for `x0`; subsequent calls warm-start from the previous plan
    /// advanced by one control period.
    pub fn solve(&mut self, x0: &QuadState, reference: &ReferenceWindow) -> Result<OcpSolution> {
        let start = Instant::now();
        let (warm, has_previous) = match &self.warm {
            Some(prev) => (prev.shifted(self.shift_fraction), true),
            None => {
                reference.validate(self.cfg.n_h)?;
                (OcpSolution::from_reference(x0, reference, &self.cfg), false)
            }
        };
        match sqp_rti_step(&self.cfg, &self.quad, &self.model, x0, reference, &warm) {
            Ok(sol) => {
                self.warm = Some(sol.clone());
                Ok(sol)
            }
            Err(Error::Solver(msg)) if has_previous => {
                log::warn!("SQP iteration failed ({msg}); reusing the shifted previous plan");
                let mut sol = warm;
                sol.x_traj[0] = x0.to_vec();
                sol.fallback = true;
                sol.kkt_residual = f64::INFINITY;
                sol.solve_time = start.elapsed().as_secs_f64();
                self.warm = Some(sol.clone());
                Ok(sol)
            }
            Err(e) => Err(e),
        }
    }
}
