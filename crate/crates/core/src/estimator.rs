//! Drag-acceleration observations from measured vs. physics-predicted velocity.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::QuadState;
use crate::error::{Error, Result};
use crate::rgp::DragObservation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResidualConfig {
    pub dt_min: f64,
    /// Componentwise clip on the estimated acceleration, m/s².
    pub outlier_cap: f64,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            dt_min: 1e-4,
            outlier_cap: 20.0,
        }
    }
}

impl ResidualConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_min > 0.0) || !(self.outlier_cap > 0.0) {
            return Err(Error::Config("dt_min and outlier_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rejection {
    StepTooShort,
    NonFinite,
}

/// `ã = (v_meas − v_pred) / dt`, clipped to `±outlier_cap`, paired with `v_meas`.
pub fn estimate_drag_observation(
    v_meas_next_b: &Vector3<f64>,
    v_pred_next_b: &Vector3<f64>,
    dt: f64,
    t: f64,
    cfg: &ResidualConfig,
) -> std::result::Result<DragObservation, Rejection> {
    if !dt.is_finite() || !t.is_finite() {
        return Err(Rejection::NonFinite);
    }
    if dt < cfg.dt_min {
        return Err(Rejection::StepTooShort);
    }
    if v_meas_next_b.iter().chain(v_pred_next_b.iter()).any(|v| !v.is_finite()) {
        return Err(Rejection::NonFinite);
    }
    let cap = cfg.outlier_cap;
    let a_tilde = ((v_meas_next_b - v_pred_next_b) / dt).map(|a| a.clamp(-cap, cap));
    Ok(DragObservation {
        v_b: *v_meas_next_b,
        a_tilde,
        t,
    })
}

/// Same as [`estimate_drag_observation`] but takes full states and converts
/// each world velocity into its own body frame.
pub fn observation_from_states(
    measured_next: &QuadState,
    predicted_next: &QuadState,
    dt: f64,
    t: f64,
    cfg: &ResidualConfig,
) -> std::result::Result<DragObservation, Rejection> {
    estimate_drag_observation(
        &measured_next.v_body(),
        &predicted_next.v_body(),
        dt,
        t,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn perfect_model_gives_zero_residual() {
        let v = Vector3::new(1.0, -2.0, 0.5);
        let o = estimate_drag_observation(&v, &v, 0.01, 0.0, &ResidualConfig::default()).unwrap();
        assert_eq!(o.a_tilde, Vector3::zeros());
        assert_eq!(o.v_b, v);
    }

    #[test]
    fn arithmetic() {
        let o = estimate_drag_observation(
            &Vector3::new(0.01, 0.0, 0.0),
            &Vector3::zeros(),
            0.01,
            1.0,
            &ResidualConfig::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(o.a_tilde, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn clipping_and_rejections() {
        let cfg = ResidualConfig::default();
        let o = estimate_drag_observation(&Vector3::new(1.0, -1.0, 0.0), &Vector3::zeros(), 0.01, 0.0, &cfg)
            .unwrap();
        assert_eq!(o.a_tilde, Vector3::new(20.0, -20.0, 0.0));
        assert_eq!(
            estimate_drag_observation(&Vector3::zeros(), &Vector3::zeros(), 1e-5, 0.0, &cfg),
            Err(Rejection::StepTooShort)
        );
        assert_eq!(
            estimate_drag_observation(&Vector3::new(f64::NAN, 0.0, 0.0), &Vector3::zeros(), 0.01, 0.0, &cfg),
            Err(Rejection::NonFinite)
        );
    }

    proptest! {
        #[test]
        fn shift_in_prediction_is_linear(
            vm in prop::array::uniform3(-10.0f64..10.0),
            vp in prop::array::uniform3(-10.0f64..10.0),
            delta in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let cfg = ResidualConfig { outlier_cap: 1e9, ..ResidualConfig::default() };
            let (vm, vp, delta) = (Vector3::from(vm), Vector3::from(vp), Vector3::from(delta));
            let a = estimate_drag_observation(&vm, &vp, 0.01, 0.0, &cfg).unwrap().a_tilde;
            let b = estimate_drag_observation(&vm, &(vp + delta), 0.01, 0.0, &cfg).unwrap().a_tilde;
            prop_assert!((b - a + delta / 0.01).abs().max() < 1e-9);
        }
    }
}
