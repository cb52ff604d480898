//! Reference trajectories: random-waypoint polynomials and a speed-ramped circle.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{idx, InputVec, QuadParams, Quaternion, StateVec};
use crate::error::{Error, Result};

/// Waypoints uniform in `[−h/2, h/2]² × [h, 2h]`.
pub fn random_waypoints(hsize: f64, n: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 waypoints, got {n}")));
    }
    if !(hsize > 0.0) {
        return Err(Error::Config("hsize must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            Vector3::new(
                rng.random_range(-0.5 * hsize..=0.5 * hsize),
                rng.random_range(-0.5 * hsize..=0.5 * hsize),
                rng.random_range(hsize..=2.0 * hsize),
            )
        })
        .collect())
}

/// One quintic per axis in local time `τ ∈ [0, duration]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolySegment {
    pub t_start: f64,
    pub duration: f64,
    pub coeffs: [[f64; 6]; 3],
}

impl PolySegment {
    fn eval(&self, tau: f64, order: usize) -> Vector3<f64> {
        Vector3::from_fn(|d, _| {
            let c = &self.coeffs[d];
            (order..6)
                .map(|i| c[i] * falling(i, order) * tau.powi((i - order) as i32))
                .sum()
        })
    }
}

fn falling(i: usize, k: usize) -> f64 {
    (0..k).map(|j| (i - j) as f64).product()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewisePolynomial {
    pub segments: Vec<PolySegment>,
}

impl PiecewisePolynomial {
    /// Holds `p` for `duration` seconds.
    pub fn constant(p: Vector3<f64>, duration: f64) -> Self {
        let mut coeffs = [[0.0; 6]; 3];
        for d in 0..3 {
            coeffs[d][0] = p[d];
        }
        Self {
            segments: vec![PolySegment {
                t_start: 0.0,
                duration,
                coeffs,
            }],
        }
    }

    pub fn duration(&self) -> f64 {
        self.segments
            .last()
            .map_or(0.0, |s| s.t_start + s.duration)
    }

    /// `order`-th time derivative at `t` (clamped to the domain).
    pub fn eval(&self, t: f64, order: usize) -> Vector3<f64> {
        let t = t.clamp(0.0, self.duration());
        let i = self
            .segments
            .partition_point(|s| s.t_start + s.duration < t)
            .min(self.segments.len() - 1);
        let s = &self.segments[i];
        s.eval((t - s.t_start).clamp(0.0, s.duration), order)
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        self.eval(t, 0)
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        self.eval(t, 1)
    }

    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        self.eval(t, 2)
    }

    /// Peak speed and acceleration norms on a grid of spacing `dt`.
    pub fn peaks(&self, dt: f64) -> (f64, f64) {
        let n = (self.duration() / dt).ceil() as usize;
        (0..=n)
            .map(|k| {
                let t = (k as f64 * dt).min(self.duration());
                (self.velocity(t).norm(), self.acceleration(t).norm())
            })
            .fold((0.0, 0.0), |(v, a), (vk, ak)| (v.max(vk), a.max(ak)))
    }

    fn time_scaled(&self, s: f64) -> Self {
        Self {
            segments: self
                .segments
                .iter()
                .map(|seg| {
                    let mut coeffs = seg.coeffs;
                    for c in coeffs.iter_mut() {
                        for (i, ci) in c.iter_mut().enumerate() {
                            *ci /= s.powi(i as i32);
                        }
                    }
                    PolySegment {
                        t_start: seg.t_start * s,
                        duration: seg.duration * s,
                        coeffs,
                    }
                })
                .collect(),
        }
    }
}

type Mat6 = SMatrix<f64, 6, 6>;

/// Maps quintic coefficients to `[p0, v0, a0, p1, v1, a1]`.
fn hermite_map(t: f64) -> Mat6 {
    let mut m = Mat6::zeros();
    for k in 0..3 {
        m[(k, k)] = falling(k, k);
        for i in k..6 {
            m[(3 + k, i)] = falling(i, k) * t.powi((i - k) as i32);
        }
    }
    m
}

/// `∫₀ᵀ (d³p/dτ³)² dτ` as a quadratic form in the coefficients.
fn jerk_gram(t: f64) -> Mat6 {
    let mut q = Mat6::zeros();
    for i in 3..6 {
        for j in 3..6 {
            let e = (i - 3 + j - 3 + 1) as i32;
            q[(i, j)] = falling(i, 3) * falling(j, 3) * t.powi(e) / e as f64;
        }
    }
    q
}

/// Minimum-jerk quintic spline through `waypoints` with zero velocity and
/// acceleration at both ends, uniformly time-scaled so that the speed and
/// acceleration limits are met (one limit active) on a 1 kHz grid.
pub fn fit_polynomial(
    waypoints: &[Vector3<f64>],
    v_max: f64,
    a_max: f64,
) -> Result<PiecewisePolynomial> {
    if waypoints.len() < 2 {
        return Err(Error::Config("need at least 2 waypoints".into()));
    }
    if !(v_max > 0.0 && v_max.is_finite()) || !(a_max > 0.0 && a_max.is_finite()) {
        return Err(Error::Config(format!(
            "unreachable limits: v_max = {v_max}, a_max = {a_max}"
        )));
    }
    if waypoints.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
        return Err(Error::Config("non-finite waypoint".into()));
    }
    let n_seg = waypoints.len() - 1;
    let total: f64 = waypoints.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    if total == 0.0 {
        return Err(Error::Config("all waypoints coincide".into()));
    }
    let durations: Vec<f64> = waypoints
        .windows(2)
        .map(|w| (w[1] - w[0]).norm().max(1e-3 * total) / v_max)
        .collect();

    // Unknowns per axis: interior (v, a) pairs.
    let n_free = 2 * (waypoints.len() - 2);
    let costs: Vec<Mat6> = durations
        .iter()
        .map(|&t| {
            let m_inv = hermite_map(t)
                .try_inverse()
                .ok_or_else(|| Error::Degenerate("singular segment map".into()))?;
            Ok(m_inv.transpose() * jerk_gram(t) * m_inv)
        })
        .collect::<Result<_>>()?;

    let mut segments = Vec::with_capacity(n_seg);
    let mut knots = vec![[[0.0; 3]; 3]; waypoints.len()];
    for d in 0..3 {
        let mut h = DMatrix::<f64>::zeros(n_free, n_free);
        let mut g = DVector::<f64>::zeros(n_free);
        for (s, p) in costs.iter().enumerate() {
            // Endpoint vector b = S z + b_fixed.
            let mut slots: [Option<usize>; 6] = [None; 6];
            let mut fixed = SVector::<f64, 6>::zeros();
            fixed[0] = waypoints[s][d];
            fixed[3] = waypoints[s + 1][d];
            if s > 0 {
                slots[1] = Some(2 * (s - 1));
                slots[2] = Some(2 * (s - 1) + 1);
            }
            if s + 1 < n_seg {
                slots[4] = Some(2 * s);
                slots[5] = Some(2 * s + 1);
            }
            let pf = p * fixed;
            for a in 0..6 {
                let Some(ia) = slots[a] else { continue };
                g[ia] += pf[a];
                for b in 0..6 {
                    if let Some(ib) = slots[b] {
                        h[(ia, ib)] += p[(a, b)];
                    }
                }
            }
        }
        let z = if n_free > 0 {
            h.lu()
                .solve(&-g)
                .ok_or_else(|| Error::Degenerate("singular spline system".into()))?
        } else {
            DVector::zeros(0)
        };
        for (k, knot) in knots.iter_mut().enumerate() {
            knot[d][0] = waypoints[k][d];
            if k > 0 && k + 1 < waypoints.len() {
                knot[d][1] = z[2 * (k - 1)];
                knot[d][2] = z[2 * (k - 1) + 1];
            }
        }
    }

    let mut t0 = 0.0;
    for (s, &t) in durations.iter().enumerate() {
        let m_inv = hermite_map(t).try_inverse().unwrap();
        let mut coeffs = [[0.0; 6]; 3];
        for d in 0..3 {
            let b = SVector::<f64, 6>::from_column_slice(&[
                knots[s][d][0],
                knots[s][d][1],
                knots[s][d][2],
                knots[s + 1][d][0],
                knots[s + 1][d][1],
                knots[s + 1][d][2],
            ]);
            let c = m_inv * b;
            coeffs[d].copy_from_slice(c.as_slice());
        }
        segments.push(PolySegment {
            t_start: t0,
            duration: t,
            coeffs,
        });
        t0 += t;
    }
    let mut poly = PiecewisePolynomial { segments };

    // Uniform time scaling: speeds scale by 1/s, accelerations by 1/s².
    for _ in 0..20 {
        let (v_peak, a_peak) = poly.peaks(1e-3);
        if v_peak <= v_max && a_peak <= a_max && (v_peak > 0.999 * v_max || a_peak > 0.999 * a_max) {
            return Ok(poly);
        }
        let s = (v_peak / v_max).max((a_peak / a_max).sqrt()) * (1.0 + 1e-4);
        poly = poly.time_scaled(s);
    }
    let (v_peak, a_peak) = poly.peaks(1e-3);
    if v_peak <= v_max && a_peak <= a_max {
        Ok(poly)
    } else {
        Err(Error::Degenerate(format!(
            "time scaling did not meet limits (v {v_peak:.4}, a {a_peak:.4})"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YawMode {
    /// Heading along the horizontal velocity (held while nearly hovering).
    Velocity,
    Constant(f64),
}

impl Default for YawMode {
    fn default() -> Self {
        Self::Velocity
    }
}

/// Horizontal speed below which the velocity heading is held.
const YAW_HOLD_SPEED: f64 = 0.2;

/// Uniformly sampled full-state reference.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrajectory {
    pub f_s: f64,
    pub times: Vec<f64>,
    pub x_ref: Vec<StateVec>,
    pub u_ref: Vec<InputVec>,
}

/// Attitude from the thrust direction `a − g` and a heading angle.
pub fn flat_attitude(accel: &Vector3<f64>, gravity: &Vector3<f64>, yaw: f64) -> Result<Quaternion> {
    let thrust = accel - gravity;
    let n = thrust.norm();
    if n < 1e-9 {
        return Err(Error::Degenerate("free-fall reference has no thrust direction".into()));
    }
    let z_b = thrust / n;
    let x_c = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let y_b = z_b.cross(&x_c);
    if y_b.norm() < 1e-9 {
        return Err(Error::Degenerate("thrust direction is horizontal along the heading".into()));
    }
    let y_b = y_b.normalize();
    let x_b = y_b.cross(&z_b);
    Ok(Quaternion::from_rotation_matrix(&Matrix3::from_columns(&[x_b, y_b, z_b])))
}

fn headings(vel: &[Vector3<f64>], mode: YawMode) -> Vec<f64> {
    match mode {
        YawMode::Constant(psi) => vec![psi; vel.len()],
        YawMode::Velocity => {
            let raw: Vec<Option<f64>> = vel
                .iter()
                .map(|v| (v.xy().norm() >= YAW_HOLD_SPEED).then(|| v.y.atan2(v.x)))
                .collect();
            let first = raw.iter().flatten().next().copied().unwrap_or(0.0);
            let mut out = Vec::with_capacity(vel.len());
            let mut prev = first;
            for r in raw {
                let psi = match r {
                    Some(a) => {
                        // unwrap towards the previous heading
                        let mut a = a;
                        while a - prev > PI {
                            a -= 2.0 * PI;
                        }
                        while a - prev < -PI {
                            a += 2.0 * PI;
                        }
                        a
                    }
                    None => prev,
                };
                out.push(psi);
                prev = psi;
            }
            out
        }
    }
}

impl SampledTrajectory {
    /// Builds full states from sampled position derivatives via the flatness map.
    pub fn from_kinematics(
        f_s: f64,
        pos: &[Vector3<f64>],
        vel: &[Vector3<f64>],
        acc: &[Vector3<f64>],
        yaw: YawMode,
        quad: &QuadParams,
    ) -> Result<Self> {
        if !(f_s > 0.0) || pos.is_empty() || pos.len() != vel.len() || pos.len() != acc.len() {
            return Err(Error::Config("inconsistent kinematic samples".into()));
        }
        let n = pos.len();
        let gravity = quad.gravity_vec();
        let psi = headings(vel, yaw);
        let mut quats = Vec::with_capacity(n);
        for k in 0..n {
            let mut q = flat_attitude(&acc[k], &gravity, psi[k])?;
            if let Some(prev) = quats.last() {
                if q.dot(prev) < 0.0 {
                    q = q.neg();
                }
            }
            quats.push(q);
        }
        let dt = 1.0 / f_s;
        let mut x_ref = Vec::with_capacity(n);
        let mut u_ref = Vec::with_capacity(n);
        for k in 0..n {
            let omega = if n < 2 {
                Vector3::zeros()
            } else {
                let (a, b, h) = match k {
                    0 => (0, 1, dt),
                    _ if k == n - 1 => (n - 2, n - 1, dt),
                    _ => (k - 1, k + 1, 2.0 * dt),
                };
                let qa = quats[a].to_vec();
                let qb = quats[b].to_vec();
                let q_dot = Quaternion::from_vec(&((qb - qa) / h));
                quats[k].conjugate().mul(&q_dot).vec_part() * 2.0
            };
            let mut x = StateVec::zeros();
            x.fixed_rows_mut::<3>(idx::POS).copy_from(&pos[k]);
            x.fixed_rows_mut::<4>(idx::QUAT).copy_from(&quats[k].to_vec());
            x.fixed_rows_mut::<3>(idx::VEL).copy_from(&vel[k]);
            x.fixed_rows_mut::<3>(idx::RATE).copy_from(&omega);
            x_ref.push(x);
            let thrust = quad.mass * (acc[k] - gravity).norm() / (4.0 * quad.t_max);
            u_ref.push(InputVec::from_element(thrust.clamp(0.0, 1.0)));
        }
        Ok(Self {
            f_s,
            times: (0..n).map(|k| k as f64 / f_s).collect(),
            x_ref,
            u_ref,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn speed(&self, k: usize) -> f64 {
        self.x_ref[k].fixed_rows::<3>(idx::VEL).norm()
    }

    pub fn peak_speed(&self) -> f64 {
        (0..self.len()).map(|k| self.speed(k)).fold(0.0, f64::max)
    }

    /// Grid uniformity, unit quaternions, finite values and an optional speed bound.
    pub fn validate(&self, v_max: Option<f64>) -> Result<()> {
        if self.is_empty() || self.x_ref.len() != self.len() || self.u_ref.len() != self.len() {
            return Err(Error::Contract("trajectory columns have different lengths".into()));
        }
        if !(self.f_s > 0.0) {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        for (k, t) in self.times.iter().enumerate() {
            if (t - k as f64 / self.f_s).abs() > 1e-9 {
                return Err(Error::Contract(format!("non-uniform time grid at sample {k}")));
            }
            let x = &self.x_ref[k];
            if x.iter().chain(self.u_ref[k].iter()).any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("non-finite reference at sample {k}")));
            }
            if (x.fixed_rows::<4>(idx::QUAT).norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("non-unit quaternion at sample {k}")));
            }
            if let Some(v) = v_max {
                if self.speed(k) > v + 1e-6 {
                    return Err(Error::Contract(format!(
                        "speed {} exceeds {v} at sample {k}",
                        self.speed(k)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sample index clamped to the last row.
    pub fn at(&self, k: usize) -> (&StateVec, &InputVec) {
        let k = k.min(self.len() - 1);
        (&self.x_ref[k], &self.u_ref[k])
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(CSV_HEADER).map_err(csv_err)?;
        for k in 0..self.len() {
            let row: Vec<String> = std::iter::once(self.times[k])
                .chain(self.x_ref[k].iter().copied())
                .chain(self.u_ref[k].iter().copied())
                .map(|v| v.to_string())
                .collect();
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a trajectory written by [`SampledTrajectory::write_csv`] (or any
    /// CSV with the same columns) and validates it.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(csv_err)?.clone();
        if header.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(Error::Parse(format!("unexpected trajectory header: {header:?}")));
        }
        let mut times = vec![];
        let mut x_ref = vec![];
        let mut u_ref = vec![];
        for (line, rec) in rd.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))
                })
                .collect::<Result<_>>()?;
            if vals.len() != CSV_HEADER.len() {
                return Err(Error::Parse(format!("row {}: wrong column count", line + 2)));
            }
            times.push(vals[0]);
            x_ref.push(StateVec::from_column_slice(&vals[1..14]));
            u_ref.push(InputVec::from_column_slice(&vals[14..18]));
        }
        if times.len() < 2 {
            return Err(Error::Parse("trajectory needs at least two rows".into()));
        }
        let f_s = 1.0 / (times[1] - times[0]);
        let f_s = if (f_s - f_s.round()).abs() < 1e-6 { f_s.round() } else { f_s };
        let traj = Self {
            f_s,
            times,
            x_ref,
            u_ref,
        };
        traj.validate(None)?;
        Ok(traj)
    }
}

pub const CSV_HEADER: [&str; 18] = [
    "t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz", "u0",
    "u1", "u2", "u3",
];

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Samples a polynomial at `f_s` from 0 to its end time.
pub fn sample_trajectory(
    poly: &PiecewisePolynomial,
    f_s: f64,
    yaw: YawMode,
    quad: &QuadParams,
) -> Result<SampledTrajectory> {
    if !(f_s > 0.0) || poly.segments.is_empty() {
        return Err(Error::Config("sampling needs f_s > 0 and a non-empty polynomial".into()));
    }
    let n = (poly.duration() * f_s + 1e-9).floor() as usize + 1;
    let ts: Vec<f64> = (0..n).map(|k| k as f64 / f_s).collect();
    let pos: Vec<_> = ts.iter().map(|&t| poly.position(t)).collect();
    let vel: Vec<_> = ts.iter().map(|&t| poly.velocity(t)).collect();
    let acc: Vec<_> = ts.iter().map(|&t| poly.acceleration(t)).collect();
    SampledTrajectory::from_kinematics(f_s, &pos, &vel, &acc, yaw, quad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CircleParams {
    pub radius: f64,
    pub v_max: f64,
    pub altitude: f64,
    /// Laps spent ramping the speed up from zero.
    pub ramp_laps: f64,
    /// Laps flown at `v_max` after the ramp.
    pub hold_laps: f64,
    /// Tangential deceleration of a final stop to rest; `None` ends at full speed.
    pub stop_decel: Option<f64>,
    pub yaw: YawMode,
}

impl Default for CircleParams {
    fn default() -> Self {
        Self {
            radius: 10.0,
            v_max: 6.0,
            altitude: 10.0,
            ramp_laps: 1.0,
            hold_laps: 1.0,
            stop_decel: Some(2.0),
            yaw: YawMode::Velocity,
        }
    }
}

impl CircleParams {
    /// Tangential acceleration of the linear speed ramp.
    pub fn ramp_accel(&self) -> f64 {
        self.v_max * self.v_max / (2.0 * self.ramp_laps * 2.0 * PI * self.radius)
    }

    pub fn ramp_time(&self) -> f64 {
        self.v_max / self.ramp_accel()
    }

    pub fn hold_time(&self) -> f64 {
        self.hold_laps * 2.0 * PI * self.radius / self.v_max
    }

    pub fn stop_time(&self) -> f64 {
        self.stop_decel.map_or(0.0, |d| self.v_max / d)
    }

    pub fn duration(&self) -> f64 {
        self.ramp_time() + self.hold_time() + self.stop_time()
    }
}

/// Horizontal circle centered above the origin, starting at `(r, 0, altitude)`.
pub fn circle_trajectory_with(
    params: &CircleParams,
    f_s: f64,
    quad: &QuadParams,
) -> Result<SampledTrajectory> {
    let r = params.radius;
    if !(r > 0.0) || !(params.v_max > 0.0) || !(f_s > 0.0) {
        return Err(Error::Config("circle needs r > 0, v_max > 0, f_s > 0".into()));
    }
    if !(params.ramp_laps > 0.0) || params.hold_laps < 0.0 || params.stop_decel.is_some_and(|d| !(d > 0.0)) {
        return Err(Error::Config("circle needs ramp_laps > 0, hold_laps >= 0, stop_decel > 0".into()));
    }
    let a_t = params.ramp_accel();
    let t_r = params.ramp_time();
    let t_h = t_r + params.hold_time();
    let s_h = 0.5 * a_t * t_r * t_r + params.v_max * params.hold_time();
    let v = params.v_max;
    let n = (params.duration() * f_s + 1e-9).floor() as usize + 1;
    let (mut pos, mut vel, mut acc) = (vec![], vec![], vec![]);
    for k in 0..n {
        let t = k as f64 / f_s;
        let (s, sd, sdd) = if t < t_r {
            (0.5 * a_t * t * t, a_t * t, a_t)
        } else if t <= t_h || params.stop_decel.is_none() {
            (0.5 * a_t * t_r * t_r + v * (t - t_r), v, 0.0)
        } else {
            let d = params.stop_decel.unwrap();
            let tau = (t - t_h).min(v / d);
            (s_h + v * tau - 0.5 * d * tau * tau, (v - d * tau).max(0.0), -d)
        };
        let th = s / r;
        let radial = Vector3::new(th.cos(), th.sin(), 0.0);
        let tangent = Vector3::new(-th.sin(), th.cos(), 0.0);
        pos.push(radial * r + Vector3::new(0.0, 0.0, params.altitude));
        vel.push(tangent * sd);
        acc.push(tangent * sdd - radial * (sd * sd / r));
    }
    SampledTrajectory::from_kinematics(f_s, &pos, &vel, &acc, params.yaw, quad)
}

pub fn circle_trajectory(
    r: f64,
    v_max: f64,
    f_s: f64,
    altitude: f64,
    quad: &QuadParams,
) -> Result<SampledTrajectory> {
    circle_trajectory_with(
        &CircleParams {
            radius: r,
            v_max,
            altitude,
            ..CircleParams::default()
        },
        f_s,
        quad,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn quad() -> QuadParams {
        QuadParams::default()
    }

    #[test]
    fn waypoints_are_deterministic_and_in_the_cube() {
        let a = random_waypoints(10.0, 50, 7).unwrap();
        assert_eq!(a, random_waypoints(10.0, 50, 7).unwrap());
        assert_ne!(a, random_waypoints(10.0, 50, 8).unwrap());
        for w in &a {
            assert!(w.x.abs() <= 5.0 && w.y.abs() <= 5.0);
            assert!(w.z >= 10.0 && w.z <= 20.0);
        }
        let two = random_waypoints(10.0, 2, 1).unwrap();
        assert_ne!(two[0], two[1]);
        assert!(random_waypoints(10.0, 1, 1).is_err());
    }

    #[test]
    fn hermite_map_reproduces_endpoint_conditions() {
        let t = 1.7;
        let m = hermite_map(t);
        let c = SVector::<f64, 6>::from_column_slice(&[0.3, -1.0, 0.5, 0.2, -0.1, 0.05]);
        let seg = PolySegment {
            t_start: 0.0,
            duration: t,
            coeffs: [[0.3, -1.0, 0.5, 0.2, -0.1, 0.05], [0.0; 6], [0.0; 6]],
        };
        let b = m * c;
        for k in 0..3 {
            assert_abs_diff_eq!(b[k], seg.eval(0.0, k).x, epsilon = 1e-12);
            assert_abs_diff_eq!(b[3 + k], seg.eval(t, k).x, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_waypoints_give_one_rest_to_rest_segment() {
        let wps = [Vector3::new(0.0, 0.0, 10.0), Vector3::new(4.0, -3.0, 12.0)];
        let poly = fit_polynomial(&wps, 50.0, 50.0).unwrap();
        assert_eq!(poly.segments.len(), 1);
        let t = poly.duration();
        assert_abs_diff_eq!(poly.position(t), wps[1], epsilon = 1e-9);
        assert_abs_diff_eq!(poly.velocity(0.0).norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(poly.velocity(t).norm(), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(poly.acceleration(t).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn spline_interpolates_and_is_c2() {
        let wps = random_waypoints(10.0, 6, 3).unwrap();
        let poly = fit_polynomial(&wps, 5.0, 4.0).unwrap();
        for (k, seg) in poly.segments.iter().enumerate() {
            assert_abs_diff_eq!(seg.eval(0.0, 0), wps[k], epsilon = 1e-6);
            assert_abs_diff_eq!(seg.eval(seg.duration, 0), wps[k + 1], epsilon = 1e-6);
        }
        for w in poly.segments.windows(2) {
            for order in 0..3 {
                let left = w[0].eval(w[0].duration, order);
                let right = w[1].eval(0.0, order);
                assert!((left - right).norm() < 1e-6 * (1.0 + left.norm()));
            }
        }
        let (v, a) = poly.peaks(1e-3);
        assert!(v <= 5.0 && a <= 4.0);
        assert!(v > 4.99 || a > 3.99);
    }

    #[test]
    fn halving_speed_limit_doubles_duration() {
        let wps = random_waypoints(10.0, 5, 11).unwrap();
        let fast = fit_polynomial(&wps, 4.0, 100.0).unwrap();
        let slow = fit_polynomial(&wps, 2.0, 100.0).unwrap();
        assert!(slow.duration() >= 2.0 * fast.duration() * (1.0 - 1e-3));
    }

    #[test]
    fn unreachable_limits_are_rejected() {
        let wps = random_waypoints(10.0, 3, 1).unwrap();
        assert!(matches!(fit_polynomial(&wps, 0.0, 5.0), Err(Error::Config(_))));
        assert!(fit_polynomial(&wps[..1], 3.0, 5.0).is_err());
    }

    #[test]
    fn stationary_polynomial_samples_hover() {
        let q = quad();
        let poly = PiecewisePolynomial::constant(Vector3::new(1.0, 2.0, 10.0), 1.0);
        let traj = sample_trajectory(&poly, 100.0, YawMode::Velocity, &q).unwrap();
        assert_eq!(traj.len(), 101);
        for k in 0..traj.len() {
            assert_eq!(traj.x_ref[k], traj.x_ref[0]);
            assert_abs_diff_eq!(traj.u_ref[k][0], q.hover_input(), epsilon = 1e-12);
        }
        traj.validate(Some(0.0)).unwrap();
    }

    #[test]
    fn sampled_random_trajectory_is_consistent() {
        let q = quad();
        let wps = random_waypoints(10.0, 6, 5).unwrap();
        let poly = fit_polynomial(&wps, 6.0, 5.0).unwrap();
        let traj = sample_trajectory(&poly, 100.0, YawMode::Velocity, &q).unwrap();
        traj.validate(Some(6.0)).unwrap();
        let gravity = q.gravity_vec();
        for k in (0..traj.len()).step_by(37) {
            let t = traj.times[k];
            let v = traj.x_ref[k].fixed_rows::<3>(idx::VEL).into_owned();
            assert_abs_diff_eq!(v, poly.velocity(t), epsilon = 1e-8);
            let quat = Quaternion::from_vec(&traj.x_ref[k].fixed_rows::<4>(idx::QUAT).into_owned());
            let z_b = quat.rotation_matrix().column(2).into_owned();
            let expected = (poly.acceleration(t) - gravity).normalize();
            assert_abs_diff_eq!(z_b, expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn circle_geometry_and_ramp() {
        let q = quad();
        let p = CircleParams {
            v_max: 6.0,
            ..CircleParams::default()
        };
        let traj = circle_trajectory_with(&p, 100.0, &q).unwrap();
        traj.validate(Some(6.0)).unwrap();
        for x in &traj.x_ref {
            assert_abs_diff_eq!(x.fixed_rows::<2>(0).norm(), 10.0, epsilon = 1e-6);
            assert_abs_diff_eq!(x[2], 10.0, epsilon = 1e-12);
        }
        assert_eq!(traj.speed(0), 0.0);
        let k_end = (p.ramp_time() * 100.0).round() as usize;
        assert_abs_diff_eq!(traj.speed(k_end), 6.0, epsilon = 1e-2);
        let k_hold = ((p.ramp_time() + p.hold_time()) * 100.0).floor() as usize;
        assert_abs_diff_eq!(traj.speed(k_hold), 6.0, epsilon = 1e-12);
        assert!(traj.speed(traj.len() - 1) < 0.02);
        // Centripetal acceleration v²/r shows up as the horizontal thrust tilt.
        let k = k_end + 50;
        let quat = Quaternion::from_vec(&traj.x_ref[k].fixed_rows::<4>(idx::QUAT).into_owned());
        let z_b = quat.rotation_matrix().column(2).into_owned();
        assert_abs_diff_eq!(z_b.xy().norm() / z_b.z * 9.81, 36.0 / 10.0, epsilon = 1e-9);
        // Heading follows the velocity once moving.
        let v = traj.x_ref[k].fixed_rows::<3>(idx::VEL).into_owned();
        let x_b = quat.rotation_matrix().column(0).into_owned();
        assert!(x_b.dot(&v.normalize()) > 0.9);
    }

    #[test]
    fn circle_yaw_rate_matches_angular_speed() {
        let p = CircleParams { stop_decel: None, ..CircleParams::default() };
        let traj = circle_trajectory_with(&p, 100.0, &quad()).unwrap();
        let k = traj.len() - 10;
        let w = traj.x_ref[k].fixed_rows::<3>(idx::RATE).into_owned();
        let z_b = Quaternion::from_vec(&traj.x_ref[k].fixed_rows::<4>(idx::QUAT).into_owned())
            .rotation_matrix()
            .column(2)
            .into_owned();
        // World-frame yaw rate v/r projected onto the body z axis.
        assert_abs_diff_eq!(w.z, 0.6 * z_b.z, epsilon = 1e-3);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let traj = circle_trajectory(10.0, 3.0, 100.0, 10.0, &quad()).unwrap();
        let mut buf = vec![];
        traj.write_csv(&mut buf).unwrap();
        let back = SampledTrajectory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, traj);
        assert!(SampledTrajectory::read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn fitted_trajectories_pass_validation(
            seed in 0u64..1000,
            n in 2usize..7,
            v_max in 1.0f64..12.0,
        ) {
            let q = quad();
            let wps = random_waypoints(10.0, n, seed).unwrap();
            let poly = fit_polynomial(&wps, v_max, 5.0).unwrap();
            let (v, a) = poly.peaks(1e-3);
            prop_assert!(v <= v_max && a <= 5.0);
            for (k, seg) in poly.segments.iter().enumerate() {
                prop_assert!((seg.eval(0.0, 0) - wps[k]).norm() < 1e-6);
            }
            let traj = sample_trajectory(&poly, 100.0, YawMode::Velocity, &q).unwrap();
            prop_assert!(traj.validate(Some(v_max)).is_ok());
        }
    }
}
