//! Ground-truth aerodynamic drag for the plant simulator.
//!
//! Nothing in here is visible to the controller; the MPC only ever sees the
//! learned residual.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, QuadState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DragParams {
    /// Fluid density, kg/m³.
    pub rho: f64,
    /// Body drag coefficient. In the `simplified` profile this is used directly
    /// as an acceleration scale (m⁻¹).
    pub c_d: f64,
    /// Cross-section per body axis, m².
    pub area: [f64; 3],
    pub c_rd: f64,
    /// Rotor speed at full activation, rad/s.
    pub omega_rotor_max: f64,
    /// Multiplier on the body-z term of the `simplified` profile.
    pub z_factor: f64,
}

impl Default for DragParams {
    fn default() -> Self {
        Self {
            rho: 1.225,
            c_d: 0.01,
            area: [0.05, 0.05, 0.1],
            c_rd: 1e-4,
            omega_rotor_max: 838.0,
            z_factor: 5.0,
        }
    }
}

impl DragParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rho, self.c_d, self.c_rd, self.omega_rotor_max, self.z_factor];
        if all
            .iter()
            .chain(self.area.iter())
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Config("drag parameters must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DragProfile {
    None,
    Body,
    RotorOnly,
    /// Body plus rotor drag.
    Full,
    /// `-c_d · sign(v)·v²` per body axis, z scaled by `z_factor`.
    Simplified,
}

impl FromStr for DragProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "body" => Ok(Self::Body),
            "rotor-only" => Ok(Self::RotorOnly),
            "full" => Ok(Self::Full),
            "simplified" => Ok(Self::Simplified),
            other => Err(Error::Config(format!("unknown drag profile '{other}'"))),
        }
    }
}

impl fmt::Display for DragProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Body => "body",
            Self::RotorOnly => "rotor-only",
            Self::Full => "full",
            Self::Simplified => "simplified",
        })
    }
}

impl TryFrom<String> for DragProfile {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DragProfile> for String {
    fn from(p: DragProfile) -> Self {
        p.to_string()
    }
}

/// Quadratic body drag `-½ρ C_D A_d |v| v_d / m` per body axis.
pub fn body_drag_accel(v_b: &Vector3<f64>, params: &DragParams, mass: f64) -> Vector3<f64> {
    let speed = v_b.norm();
    let k = -0.5 * params.rho * params.c_d * speed / mass;
    Vector3::new(
        k * params.area[0] * v_b.x,
        k * params.area[1] * v_b.y,
        k * params.area[2] * v_b.z,
    )
}

/// Rotor drag proportional to the collective rotor speed and the xy-projection of `v_b`.
pub fn rotor_drag_accel(
    v_b: &Vector3<f64>,
    u: &ControlInput,
    params: &DragParams,
    mass: f64,
) -> Vector3<f64> {
    let omega = params.omega_rotor_max * u.values().iter().sum::<f64>() / 4.0;
    let k = -omega * params.c_rd / mass;
    Vector3::new(k * v_b.x, k * v_b.y, 0.0)
}

pub fn simplified_drag_accel(v_b: &Vector3<f64>, params: &DragParams) -> Vector3<f64> {
    let scale = Vector3::new(1.0, 1.0, params.z_factor);
    -v_b.component_mul(&v_b.abs()).component_mul(&scale) * params.c_d
}

/// Drag acceleration in the body frame for the configured profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DragModel {
    pub profile: DragProfile,
    pub params: DragParams,
}

impl Default for DragModel {
    fn default() -> Self {
        Self {
            profile: DragProfile::Simplified,
            params: DragParams::default(),
        }
    }
}

impl DragModel {
    pub fn none() -> Self {
        Self {
            profile: DragProfile::None,
            params: DragParams::default(),
        }
    }

    pub fn accel_body(
        &self,
        v_b: &Vector3<f64>,
        u: &ControlInput,
        mass: f64,
    ) -> Vector3<f64> {
        let p = &self.params;
        match self.profile {
            DragProfile::None => Vector3::zeros(),
            DragProfile::Body => body_drag_accel(v_b, p, mass),
            DragProfile::RotorOnly => rotor_drag_accel(v_b, u, p, mass),
            DragProfile::Full => body_drag_accel(v_b, p, mass) + rotor_drag_accel(v_b, u, p, mass),
            DragProfile::Simplified => simplified_drag_accel(v_b, p),
        }
    }
}

/// Plant drag for the state's body-frame velocity.
pub fn plant_drag_accel(
    x: &QuadState,
    u: &ControlInput,
    model: &DragModel,
    mass: f64,
) -> Vector3<f64> {
    model.accel_body(&x.v_body(), u, mass)
}
