//! Shooting-interval integration of `f_pred` with forward sensitivities.
//!
//! The sensitivities are the exact derivatives of the RK4 scheme itself
//! (differentiated stage by stage), so they agree with finite differences of
//! [`integrate`] up to truncation of the difference quotient.

use nalgebra::SMatrix;

use crate::augmented_model::{f_pred_jacobian, f_pred_vec, ResidualModel};
use crate::dynamics::{InputJacobian, InputVec, QuadParams, StateJacobian, StateVec, STATE_DIM};
use crate::error::{Error, Result};

type Sens = SMatrix<f64, STATE_DIM, 17>;

#[derive(Debug, Clone)]
pub struct Discretization {
    pub x_next: StateVec,
    /// `∂x⁺/∂x`
    pub a: StateJacobian,
    /// `∂x⁺/∂u`
    pub b: InputJacobian,
}

fn check_args(t_h: f64, substeps: usize) -> Result<()> {
    if !(t_h > 0.0) || substeps == 0 {
        return Err(Error::Contract(format!(
            "discretization needs T_h > 0 and at least one substep (got {t_h}, {substeps})"
        )));
    }
    Ok(())
}

/// RK4 over `t_h` split into `substeps` equal steps; no quaternion renormalization.
pub fn integrate(
    quad: &QuadParams,
    model: &ResidualModel,
    x: &StateVec,
    u: &InputVec,
    t_h: f64,
    substeps: usize,
) -> Result<StateVec> {
    check_args(t_h, substeps)?;
    let h = t_h / substeps as f64;
    let f = |x: &StateVec| f_pred_vec(x, u, quad, model);
    let mut x = *x;
    for _ in 0..substeps {
        let k1 = f(&x);
        let k2 = f(&(x + k1 * (0.5 * h)));
        let k3 = f(&(x + k2 * (0.5 * h)));
        let k4 = f(&(x + k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    Ok(x)
}

pub fn discretize(
    quad: &QuadParams,
    model: &ResidualModel,
    x: &StateVec,
    u: &InputVec,
    t_h: f64,
    substeps: usize,
) -> Result<Discretization> {
    check_args(t_h, substeps)?;
    let h = t_h / substeps as f64;

    // Stage value and its derivative w.r.t. (x0, u), given the stage input
    // point and that point's sensitivity.
    let stage = |xs: &StateVec, s: &Sens| -> (StateVec, Sens) {
        let k = f_pred_vec(xs, u, quad, model);
        let (fx, fu) = f_pred_jacobian(xs, u, quad, model);
        let mut dk = fx * s;
        let mut du = dk.fixed_view_mut::<STATE_DIM, 4>(0, STATE_DIM);
        du += fu;
        (k, dk)
    };

    let mut x = *x;
    let mut s = Sens::zeros();
    s.fixed_view_mut::<STATE_DIM, STATE_DIM>(0, 0)
        .copy_from(&StateJacobian::identity());

    for _ in 0..substeps {
        let (k1, d1) = stage(&x, &s);
        let (k2, d2) = stage(&(x + k1 * (0.5 * h)), &(s + d1 * (0.5 * h)));
        let (k3, d3) = stage(&(x + k2 * (0.5 * h)), &(s + d2 * (0.5 * h)));
        let (k4, d4) = stage(&(x + k3 * h), &(s + d3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        s += (d1 + d2 * 2.0 + d3 * 2.0 + d4) * (h / 6.0);
    }

    if x.iter().chain(s.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Solver(format!(
            "non-finite value while integrating the shooting interval (T_h = {t_h})"
        )));
    }
    Ok(Discretization {
        x_next: x,
        a: s.fixed_view::<STATE_DIM, STATE_DIM>(0, 0).into_owned(),
        b: s.fixed_view::<STATE_DIM, 4>(0, STATE_DIM).into_owned(),
    })
}

/// Central-difference sensitivities of [`integrate`] with step `eps`.
pub fn discretize_fd(
    quad: &QuadParams,
    model: &ResidualModel,
    x: &StateVec,
    u: &InputVec,
    t_h: f64,
    substeps: usize,
    eps: f64,
) -> Result<Discretization> {
    let x_next = integrate(quad, model, x, u, t_h, substeps)?;
    let mut a = StateJacobian::zeros();
    for i in 0..STATE_DIM {
        let mut xp = *x;
        let mut xm = *x;
        xp[i] += eps;
        xm[i] -= eps;
        let col = (integrate(quad, model, &xp, u, t_h, substeps)?
            - integrate(quad, model, &xm, u, t_h, substeps)?)
            / (2.0 * eps);
        a.set_column(i, &col);
    }
    let mut b = InputJacobian::zeros();
    for i in 0..4 {
        let mut up = *u;
        let mut um = *u;
        up[i] += eps;
        um[i] -= eps;
        let col = (integrate(quad, model, x, &up, t_h, substeps)?
            - integrate(quad, model, x, &um, t_h, substeps)?)
            / (2.0 * eps);
        b.set_column(i, &col);
    }
    Ok(Discretization { x_next, a, b })
}
