use serde::{Deserialize, Serialize};

use super::EpisodeLog;
use crate::dynamics::idx;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub steps: usize,
    /// RMSE of `‖p_meas − p_ref‖`, mm.
    pub rmse_mm: f64,
    pub rmse_axis_mm: [f64; 3],
    /// `|cov(v_d, e_d)|` per world axis, m²/s.
    pub cov_v_e: [f64; 3],
    /// Peak measured speed, m/s.
    pub v_peak: f64,
    pub mean_solve_ms: f64,
    pub mean_update_ms: f64,
    pub rejected: usize,
}

pub fn compute_metrics(log: &EpisodeLog) -> Result<EpisodeMetrics> {
    let n = log.rows.len();
    if n == 0 {
        return Err(Error::Contract("cannot compute metrics of an empty log".into()));
    }
    let nf = n as f64;
    let mut sq = [0.0; 3];
    let mut mean_e = [0.0; 3];
    let mut mean_v = [0.0; 3];
    let mut v_peak: f64 = 0.0;
    for r in &log.rows {
        let v = r.x_meas.fixed_rows::<3>(idx::VEL);
        v_peak = v_peak.max(v.norm());
        for d in 0..3 {
            let e = r.x_meas[idx::POS + d] - r.x_ref[idx::POS + d];
            sq[d] += e * e;
            mean_e[d] += e / nf;
            mean_v[d] += v[d] / nf;
        }
    }
    let mut cov = [0.0; 3];
    for r in &log.rows {
        for d in 0..3 {
            let e = r.x_meas[idx::POS + d] - r.x_ref[idx::POS + d];
            cov[d] += (r.x_meas[idx::VEL + d] - mean_v[d]) * (e - mean_e[d]) / nf;
        }
    }
    let timing_n = log.timing.len().max(1) as f64;
    Ok(EpisodeMetrics {
        steps: n,
        rmse_mm: 1e3 * (sq.iter().sum::<f64>() / nf).sqrt(),
        rmse_axis_mm: sq.map(|s| 1e3 * (s / nf).sqrt()),
        cov_v_e: cov.map(f64::abs),
        v_peak,
        mean_solve_ms: 1e3 * log.timing.iter().map(|t| t.solve_time).sum::<f64>() / timing_n,
        mean_update_ms: 1e3 * log.timing.iter().map(|t| t.update_time).sum::<f64>() / timing_n,
        rejected: log.rows.iter().filter(|r| r.rejection.is_some()).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::{EpisodeHeader, SimConfig, StepRecord, StepTiming};
    use super::*;
    use crate::dynamics::{QuadParams, StateVec};
    use crate::trajectory::circle_trajectory;
    use approx::assert_abs_diff_eq;

    fn log_from(rows: &[(f64, [f64; 3], [f64; 3])]) -> EpisodeLog {
        let traj = circle_trajectory(10.0, 3.0, 100.0, 10.0, &QuadParams::default()).unwrap();
        let mut log = EpisodeLog::new(EpisodeHeader::new(&SimConfig::default(), &traj));
        for (k, (t, e, v)) in rows.iter().enumerate() {
            let x_ref = StateVec::zeros();
            let mut x_meas = StateVec::zeros();
            for d in 0..3 {
                x_meas[idx::POS + d] = e[d];
                x_meas[idx::VEL + d] = v[d];
            }
            log.push(
                StepRecord {
                    k,
                    t: *t,
                    x_ref,
                    x_meas,
                    u: [0.0; 4],
                    a_tilde: None,
                    v_obs: None,
                    rejection: None,
                    hash_used: "-".into(),
                    hash_after: "-".into(),
                    kkt_residual: 0.0,
                    qp_iterations: 0,
                    active_constraints: 0,
                    qp_converged: true,
                    fallback: false,
                },
                StepTiming { solve_time: 2e-3, update_time: 0.0 },
            );
        }
        log
    }

    #[test]
    fn empty_log_is_an_error() {
        assert!(compute_metrics(&log_from(&[])).is_err());
    }

    #[test]
    fn zero_error() {
        let m = compute_metrics(&log_from(&[(0.0, [0.0; 3], [1.0, 0.0, 0.0]), (0.01, [0.0; 3], [2.0, 0.0, 0.0])])).unwrap();
        assert_eq!(m.rmse_mm, 0.0);
        assert_eq!(m.cov_v_e, [0.0; 3]);
        assert_eq!(m.v_peak, 2.0);
        assert_abs_diff_eq!(m.mean_solve_ms, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_offset() {
        let rows: Vec<_> = (0..5).map(|k| (k as f64 * 0.01, [0.003, 0.0, 0.0], [k as f64, 0.0, 0.0])).collect();
        let m = compute_metrics(&log_from(&rows)).unwrap();
        assert_abs_diff_eq!(m.rmse_mm, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.cov_v_e[0], 0.0, epsilon = 1e-18);
    }

    #[test]
    fn four_row_manual_example() {
        // e_x = [1, -1, 2, 0] mm, v_x = [1, 2, 3, 4]
        // mean e = 0.5 mm, mean v = 2.5
        // cov = ((−1.5)(0.5) + (−0.5)(−1.5) + (0.5)(1.5) + (1.5)(−0.5)) / 4 mm·m/s = 0
        // e_y = [0, 0, 0, 4] mm, v_y = [0, 0, 0, 1] → cov = (3·(−0.25)(−1) + 0.75·3)/4 = 0.75 mm·m/s
        let rows = [
            (0.00, [0.001, 0.0, 0.0], [1.0, 0.0, 0.0]),
            (0.01, [-0.001, 0.0, 0.0], [2.0, 0.0, 0.0]),
            (0.02, [0.002, 0.0, 0.0], [3.0, 0.0, 0.0]),
            (0.03, [0.0, 0.004, 0.0], [4.0, 1.0, 0.0]),
        ];
        let m = compute_metrics(&log_from(&rows)).unwrap();
        assert_abs_diff_eq!(m.rmse_axis_mm[0], (6.0f64 / 4.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(m.rmse_axis_mm[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.rmse_mm, (22.0f64 / 4.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(m.cov_v_e[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.cov_v_e[1], 0.75e-3, epsilon = 1e-15);
        assert_abs_diff_eq!(m.v_peak, 17f64.sqrt(), epsilon = 1e-12);
    }
}
