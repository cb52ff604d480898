//! Physics model augmented with the learned drag residual.
//!
//! The residual acts on the velocity derivative only: the body-frame velocity
//! is fed through each axis' GP mean and the resulting body-frame acceleration
//! is rotated back into the world frame.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{
    f_phys_jacobian, f_phys_vec, idx, rotate_conj_jac_q, rotate_conj_raw, rotate_jac_q, rotate_raw,
    rotation_matrix_raw, ControlInput, InputJacobian, InputVec, QuadParams, QuadState,
    StateJacobian, StateVec,
};
use crate::error::{Error, Result};
use crate::rgp::{
    basis_gram_inverse, kernel_latent, kernel_latent_dx, KernelHyperparams, RgpDimState,
    RgpEnsemble,
};

/// Per-axis GP parameters handed to the controller each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisParams {
    pub basis_v: Vec<f64>,
    pub mean: Vec<f64>,
    pub hyper: KernelHyperparams,
}

impl From<&RgpDimState> for AxisParams {
    fn from(s: &RgpDimState) -> Self {
        Self {
            basis_v: s.basis_v.clone(),
            mean: s.mean.iter().copied().collect(),
            hyper: s.hyper,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgpParamVector {
    pub axes: [AxisParams; 3],
}

impl RgpParamVector {
    pub fn from_ensemble(ens: &RgpEnsemble) -> Self {
        Self::from_states(&ens.dims)
    }

    pub fn from_states(states: &[RgpDimState; 3]) -> Self {
        Self {
            axes: [
                AxisParams::from(&states[0]),
                AxisParams::from(&states[1]),
                AxisParams::from(&states[2]),
            ],
        }
    }

    /// Same structure with every basis mean set to zero.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for a in &mut out.axes {
            a.mean.iter_mut().for_each(|m| *m = 0.0);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (d, a) in self.axes.iter().enumerate() {
            a.hyper.validate()?;
            if a.basis_v.len() != a.mean.len() || a.basis_v.len() < 2 {
                return Err(Error::Config(format!(
                    "axis {d}: basis ({}) and mean ({}) lengths disagree",
                    a.basis_v.len(),
                    a.mean.len()
                )));
            }
            if a.basis_v.iter().chain(&a.mean).any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("axis {d}: non-finite parameters")));
            }
        }
        Ok(())
    }

    /// Short stable digest of the basis means (bitwise).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.axes {
            for m in &a.mean {
                h.update(m.to_bits().to_le_bytes());
            }
        }
        let out = h.finalize();
        out[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone)]
struct CompiledAxis {
    basis_v: Vec<f64>,
    hyper: KernelHyperparams,
    k_inv: DMatrix<f64>,
    weights: DVector<f64>,
}

impl CompiledAxis {
    fn mean_and_slope(&self, v: f64) -> (f64, f64) {
        let mut mu = 0.0;
        let mut slope = 0.0;
        for (b, w) in self.basis_v.iter().zip(self.weights.iter()) {
            if *w == 0.0 {
                continue;
            }
            mu += kernel_latent(v, *b, &self.hyper) * w;
            slope += kernel_latent_dx(v, *b, &self.hyper) * w;
        }
        (mu, slope)
    }
}

/// Evaluation-ready residual: cached `k(V,V)⁻¹` and weights `k(V,V)⁻¹ μ⁺` per axis.
///
/// Building one factorizes the basis Gram matrices; [`ResidualModel::set_params`]
/// only swaps the means and is the per-step refresh path.
#[derive(Debug, Clone, Default)]
pub struct ResidualModel {
    axes: Option<[CompiledAxis; 3]>,
}

impl ResidualModel {
    /// No residual at all (pure physics).
    pub fn none() -> Self {
        Self { axes: None }
    }

    pub fn new(rp: &RgpParamVector) -> Result<Self> {
        rp.validate()?;
        let compile = |a: &AxisParams| -> Result<CompiledAxis> {
            let k_inv = basis_gram_inverse(&a.basis_v, &a.hyper)?;
            let weights = &k_inv * DVector::from_column_slice(&a.mean);
            Ok(CompiledAxis {
                basis_v: a.basis_v.clone(),
                hyper: a.hyper,
                k_inv,
                weights,
            })
        };
        Ok(Self {
            axes: Some([compile(&rp.axes[0])?, compile(&rp.axes[1])?, compile(&rp.axes[2])?]),
        })
    }

    pub fn is_none(&self) -> bool {
        self.axes.is_none()
    }

    /// Replaces the basis means; basis layout and hyperparameters must match.
    pub fn set_params(&mut self, rp: &RgpParamVector) -> Result<()> {
        let Some(axes) = self.axes.as_mut() else {
            return Err(Error::Config(
                "residual model was built without parameters; cannot update".into(),
            ));
        };
        for (d, (c, a)) in axes.iter().zip(&rp.axes).enumerate() {
            if c.basis_v.len() != a.mean.len() || c.basis_v != a.basis_v || c.hyper != a.hyper {
                return Err(Error::Config(format!(
                    "axis {d}: parameter layout differs from the compiled problem"
                )));
            }
            if a.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Config(format!("axis {d}: non-finite means")));
            }
        }
        for (c, a) in axes.iter_mut().zip(&rp.axes) {
            c.weights = &c.k_inv * DVector::from_column_slice(&a.mean);
        }
        Ok(())
    }

    /// Body-frame residual acceleration and its diagonal slope `∂a_d/∂v_d`.
    pub fn accel_body(&self, v_b: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        match &self.axes {
            None => (Vector3::zeros(), Vector3::zeros()),
            Some(axes) => {
                let mut a = Vector3::zeros();
                let mut s = Vector3::zeros();
                for d in 0..3 {
                    let (mu, slope) = axes[d].mean_and_slope(v_b[d]);
                    a[d] = mu;
                    s[d] = slope;
                }
                (a, s)
            }
        }
    }
}

/// Residual derivative contribution: zero except the three velocity slots.
pub fn f_rgp(x: &QuadState, model: &ResidualModel) -> StateVec {
    f_rgp_vec(&x.to_vec(), model)
}

pub fn f_rgp_vec(x: &StateVec, model: &ResidualModel) -> StateVec {
    let mut out = StateVec::zeros();
    if model.is_none() {
        return out;
    }
    let q: Vector4<f64> = x.fixed_rows::<4>(idx::QUAT).into_owned();
    let v = x.fixed_rows::<3>(idx::VEL).into_owned();
    let (a_b, _) = model.accel_body(&rotate_conj_raw(&q, &v));
    out.fixed_rows_mut::<3>(idx::VEL).copy_from(&rotate_raw(&q, &a_b));
    out
}

/// `∂f_rgp/∂x`; nonzero only in the velocity rows.
pub fn f_rgp_jacobian(x: &StateVec, model: &ResidualModel) -> StateJacobian {
    let mut jac = StateJacobian::zeros();
    if model.is_none() {
        return jac;
    }
    let q: Vector4<f64> = x.fixed_rows::<4>(idx::QUAT).into_owned();
    let v = x.fixed_rows::<3>(idx::VEL).into_owned();
    let v_b = rotate_conj_raw(&q, &v);
    let (a_b, slope) = model.accel_body(&v_b);
    let r = rotation_matrix_raw(&q);
    let r_slope = r * Matrix3::from_diagonal(&slope);
    let d_q = rotate_jac_q(&q, &a_b) + r_slope * rotate_conj_jac_q(&q, &v);
    let d_v = r_slope * r.transpose();
    jac.fixed_view_mut::<3, 4>(idx::VEL, idx::QUAT).copy_from(&d_q);
    jac.fixed_view_mut::<3, 3>(idx::VEL, idx::VEL).copy_from(&d_v);
    jac
}

/// `f_pred = f_phys + f_rgp`.
pub fn f_pred(
    x: &QuadState,
    u: &ControlInput,
    quad: &QuadParams,
    model: &ResidualModel,
) -> StateVec {
    f_pred_vec(&x.to_vec(), &u.to_vec(), quad, model)
}

pub fn f_pred_vec(x: &StateVec, u: &InputVec, quad: &QuadParams, model: &ResidualModel) -> StateVec {
    f_phys_vec(x, u, quad) + f_rgp_vec(x, model)
}

pub fn f_pred_jacobian(
    x: &StateVec,
    u: &InputVec,
    quad: &QuadParams,
    model: &ResidualModel,
) -> (StateJacobian, InputJacobian) {
    let (fx, fu) = f_phys_jacobian(x, u, quad);
    (fx + f_rgp_jacobian(x, model), fu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Quaternion;
    use crate::rgp::rgp_init;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn trained_params() -> RgpParamVector {
        let mut ens = rgp_init(6.0, 20, KernelHyperparams::default()).unwrap();
        for k in 0..400 {
            let v = -5.0 + 10.0 * ((k * 37) % 400) as f64 / 400.0;
            for d in 0..3 {
                let scale = [1.0, 1.0, 5.0][d];
                ens.dims[d].update(v, -0.01 * scale * v * v.abs()).unwrap();
            }
        }
        RgpParamVector::from_ensemble(&ens)
    }

    fn sample_state() -> QuadState {
        QuadState {
            p_w: Vector3::new(0.5, 1.0, 10.0),
            q_wb: Quaternion::from_axis_angle(&Vector3::new(0.3, -0.2, 1.0), 0.8),
            v_w: Vector3::new(3.0, -2.0, 0.7),
            omega_b: Vector3::new(0.2, 0.1, -0.4),
        }
    }

    #[test]
    fn zero_means_give_zero_residual() {
        let rp = trained_params().zeroed();
        let model = ResidualModel::new(&rp).unwrap();
        assert_eq!(f_rgp(&sample_state(), &model), StateVec::zeros());
        let quad = QuadParams::default();
        let u = ControlInput::new([0.3, 0.4, 0.5, 0.6]).unwrap();
        let x = sample_state();
        assert_eq!(
            f_pred(&x, &u, &quad, &model),
            crate::dynamics::f_phys(&x, &u, &quad)
        );
    }

    #[test]
    fn only_velocity_slots_are_touched() {
        let model = ResidualModel::new(&trained_params()).unwrap();
        let out = f_rgp(&sample_state(), &model);
        for i in (0..7).chain(10..13) {
            assert_eq!(out[i], 0.0);
        }
        assert!(out.fixed_rows::<3>(idx::VEL).norm() > 0.0);
    }

    #[test]
    fn x_axis_slot_matches_rgp_inference() {
        let mut ens = rgp_init(6.0, 20, KernelHyperparams::default()).unwrap();
        for _ in 0..200 {
            ens.dims[0].update(2.0, -0.04).unwrap();
        }
        let model = ResidualModel::new(&RgpParamVector::from_ensemble(&ens)).unwrap();
        let mut x = QuadState::default();
        x.v_w = Vector3::new(2.0, 0.0, 0.0);
        let out = f_rgp(&x, &model);
        let oracle = ens.dims[0].infer(2.0).0;
        assert_abs_diff_eq!(out[idx::VEL], oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(out[idx::VEL], -0.04, epsilon = 1e-3);
        assert_abs_diff_eq!(out[idx::VEL + 1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out[idx::VEL + 2], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn hover_with_residual_is_not_an_equilibrium() {
        let mut ens = rgp_init(6.0, 20, KernelHyperparams::default()).unwrap();
        for d in 0..3 {
            for _ in 0..50 {
                ens.dims[d].update(0.0, 0.2).unwrap();
            }
        }
        let model = ResidualModel::new(&RgpParamVector::from_ensemble(&ens)).unwrap();
        let quad = QuadParams::default();
        let x = QuadState::at_rest(Vector3::new(0.0, 0.0, 3.0));
        let u = ControlInput::uniform(quad.hover_input()).unwrap();
        let d = f_pred(&x, &u, &quad, &model);
        let (mu, _) = ens.infer(&Vector3::zeros());
        assert_abs_diff_eq!(d.fixed_rows::<3>(idx::VEL).into_owned(), mu, epsilon = 1e-12);
        assert!(mu.norm() > 0.1);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let quad = QuadParams::default();
        let model = ResidualModel::new(&trained_params()).unwrap();
        let x = sample_state().to_vec();
        let u = InputVec::new(0.3, 0.5, 0.4, 0.6);
        let (fx, fu) = f_pred_jacobian(&x, &u, &quad, &model);
        let h = 1e-6;
        let mut fx_fd = StateJacobian::zeros();
        for i in 0..13 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            fx_fd.set_column(
                i,
                &((f_pred_vec(&xp, &u, &quad, &model) - f_pred_vec(&xm, &u, &quad, &model)) / (2.0 * h)),
            );
        }
        let rel = (fx - fx_fd).norm() / fx_fd.norm();
        assert!(rel < 1e-4, "relative error {rel}");
        let mut fu_fd = InputJacobian::zeros();
        for i in 0..4 {
            let mut up = u;
            let mut um = u;
            up[i] += h;
            um[i] -= h;
            fu_fd.set_column(
                i,
                &((f_pred_vec(&x, &up, &quad, &model) - f_pred_vec(&x, &um, &quad, &model)) / (2.0 * h)),
            );
        }
        assert!((fu - fu_fd).norm() / fu_fd.norm() < 1e-4);
    }

    #[test]
    fn set_params_rejects_layout_change() {
        let rp = trained_params();
        let mut model = ResidualModel::new(&rp).unwrap();
        let mut other = rp.clone();
        other.axes[1].basis_v[3] += 0.01;
        assert!(matches!(model.set_params(&other), Err(Error::Config(_))));
        let mut short = rp.clone();
        short.axes[0].mean.pop();
        assert!(model.set_params(&short).is_err());
        assert!(ResidualModel::none().set_params(&rp).is_err());
    }

    #[test]
    fn last_update_wins() {
        let rp = trained_params();
        let mut model = ResidualModel::new(&rp.zeroed()).unwrap();
        let mut half = rp.clone();
        for a in &mut half.axes {
            a.mean.iter_mut().for_each(|m| *m *= 0.5);
        }
        model.set_params(&half).unwrap();
        model.set_params(&rp).unwrap();
        let fresh = ResidualModel::new(&rp).unwrap();
        let x = sample_state();
        assert_eq!(f_rgp(&x, &model), f_rgp(&x, &fresh));
    }

    proptest! {
        #[test]
        fn additivity_is_exact(
            v in prop::array::uniform3(-6.0f64..6.0),
            w in prop::array::uniform3(-2.0f64..2.0),
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in -3.0f64..3.0,
            u in prop::array::uniform4(0.0f64..1.0),
        ) {
            let quad = QuadParams::default();
            let model = ResidualModel::new(&trained_params()).unwrap();
            let x = QuadState {
                p_w: Vector3::new(1.0, 2.0, 3.0),
                q_wb: Quaternion::from_axis_angle(&Vector3::from(axis), angle),
                v_w: Vector3::from(v),
                omega_b: Vector3::from(w),
            };
            let u = ControlInput::new(u).unwrap();
            let diff = f_pred(&x, &u, &quad, &model) - crate::dynamics::f_phys(&x, &u, &quad);
            let rgp = f_rgp(&x, &model);
            for i in 0..13 {
                // Exact up to the single rounding of the addition.
                prop_assert!((diff[i] - rgp[i]).abs() <= 4.0 * f64::EPSILON * (1.0 + rgp[i].abs() + diff[i].abs()) * 16.0);
            }
        }

        #[test]
        fn body_frame_value_is_rotation_invariant(
            v in prop::array::uniform3(-6.0f64..6.0),
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in -3.0f64..3.0,
            yaw in -3.0f64..3.0,
        ) {
            let model = ResidualModel::new(&trained_params()).unwrap();
            let q = Quaternion::from_axis_angle(&Vector3::from(axis), angle);
            let x = QuadState { p_w: Vector3::zeros(), q_wb: q, v_w: Vector3::from(v), omega_b: Vector3::zeros() };
            let turn = Quaternion::from_axis_angle(&Vector3::z(), yaw);
            let rotated = QuadState {
                q_wb: turn.mul(&q).normalized(),
                v_w: crate::dynamics::quat_rotate(&turn, &x.v_w).unwrap(),
                ..x
            };
            let body = |s: &QuadState| {
                let a_w = f_rgp(s, &model).fixed_rows::<3>(idx::VEL).into_owned();
                crate::dynamics::quat_rotate_inv(&s.q_wb, &a_w).unwrap()
            };
            prop_assert!((body(&x) - body(&rotated)).abs().max() < 1e-9);
        }
    }
}
