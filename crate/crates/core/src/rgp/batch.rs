//! Offline sparse GP used as the pre-trained baseline.
//!
//! Inducing inputs are chosen by farthest-point selection, hyperparameters by
//! maximizing the DTC log marginal likelihood, and the result is packaged as an
//! [`RgpDimState`] so the controller can consume it exactly like the online model.

use nalgebra::{DMatrix, DVector};

use super::{gram_latent, KernelHyperparams, RgpDimState};
use crate::error::{Error, Result};

const SIGMA_N_FLOOR: f64 = 1e-4;
const MAX_LIKELIHOOD_POINTS: usize = 1000;

#[derive(Debug, Clone)]
pub struct BatchGpFit {
    pub state: RgpDimState,
    pub log_marginal_likelihood: f64,
    pub converged: bool,
    pub evaluations: usize,
}

impl BatchGpFit {
    pub fn infer(&self, v: f64) -> (f64, f64) {
        self.state.infer(v)
    }
}

/// Greedy maximin selection of `m` distinct inputs, returned sorted.
pub fn select_inducing(xs: &[f64], m: usize) -> Result<Vec<f64>> {
    if xs.len() < m || m < 2 {
        return Err(Error::Config(format!(
            "need at least m = {m} >= 2 samples, got {}",
            xs.len()
        )));
    }
    let start = xs
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let mut chosen = vec![start];
    let mut dist: Vec<f64> = xs.iter().map(|x| (x - start).abs()).collect();
    while chosen.len() < m {
        let (best, d) = dist
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, d)| if *d > acc.1 { (i, *d) } else { acc });
        if d <= 0.0 {
            return Err(Error::Degenerate(format!(
                "only {} distinct inputs available, need {m}",
                chosen.len()
            )));
        }
        let x = xs[best];
        chosen.push(x);
        for (di, xi) in dist.iter_mut().zip(xs) {
            *di = di.min((xi - x).abs());
        }
    }
    chosen.sort_by(f64::total_cmp);
    Ok(chosen)
}

// Whitened DTC: with `K_vv = L Lᵀ` and `B = L⁻¹ K_vx`, the system
// `A = I + B Bᵀ / σ_n²` has eigenvalues ≥ 1.
struct Dtc {
    l: DMatrix<f64>,
    b: DMatrix<f64>,
    a_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn dtc(xs: &[f64], basis: &[f64], hyper: &KernelHyperparams) -> Option<Dtc> {
    let m = basis.len();
    let s2 = hyper.sigma_n * hyper.sigma_n;
    let k = gram_latent(basis, basis, hyper)
        + DMatrix::identity(m, m) * (1e-10 * hyper.sigma_f * hyper.sigma_f);
    let l = k.cholesky()?.unpack();
    let b = l.solve_lower_triangular(&gram_latent(basis, xs, hyper))?;
    let a = DMatrix::identity(m, m) + &b * b.transpose() / s2;
    let a = (&a + a.transpose()) * 0.5;
    Some(Dtc { l, b, a_chol: a.cholesky()? })
}

fn log_det(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// DTC log marginal likelihood `log N(y; 0, Q + σ_n² I)` with `Q = K_xv K_vv⁻¹ K_vx`.
fn dtc_log_likelihood(xs: &[f64], ys: &DVector<f64>, basis: &[f64], hyper: &KernelHyperparams) -> f64 {
    let Some(d) = dtc(xs, basis, hyper) else {
        return f64::NEG_INFINITY;
    };
    let n = xs.len() as f64;
    let s2 = hyper.sigma_n * hyper.sigma_n;
    let by = &d.b * ys;
    let quad = ys.dot(ys) / s2 - by.dot(&d.a_chol.solve(&by)) / (s2 * s2);
    let logdet = log_det(&d.a_chol) + n * s2.ln();
    let ll = -0.5 * quad - 0.5 * logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    if ll.is_finite() {
        ll
    } else {
        f64::NEG_INFINITY
    }
}

/// Posterior mean/covariance of the latent values at `basis` under DTC.
fn dtc_posterior(
    xs: &[f64],
    ys: &DVector<f64>,
    basis: &[f64],
    hyper: &KernelHyperparams,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = dtc(xs, basis, hyper)
        .ok_or_else(|| Error::Degenerate("DTC system not positive definite".into()))?;
    let s2 = hyper.sigma_n * hyper.sigma_n;
    let mean = &d.l * d.a_chol.solve(&(&d.b * ys / s2));
    let cov = &d.l * d.a_chol.solve(&d.l.transpose());
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((mean, cov))
}

struct NelderMead {
    max_evals: usize,
    f_tol: f64,
}

impl NelderMead {
    /// Minimizes `f` starting from `x0`; returns (best x, best f, converged, evaluations).
    fn minimize<F: FnMut(&[f64]) -> f64>(&self, mut f: F, x0: &[f64], step: f64) -> (Vec<f64>, f64, bool, usize) {
        let n = x0.len();
        let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
        for i in 0..n {
            let mut p = x0.to_vec();
            p[i] += step;
            simplex.push(p);
        }
        let mut vals: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
        let mut evals = n + 1;
        let mut converged = false;
        while evals < self.max_evals {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|a, b| vals[*a].total_cmp(&vals[*b]));
            simplex = order.iter().map(|i| simplex[*i].clone()).collect();
            vals = order.iter().map(|i| vals[*i]).collect();
            if (vals[n] - vals[0]).abs() <= self.f_tol * (1.0 + vals[0].abs()) {
                converged = true;
                break;
            }
            let centroid: Vec<f64> = (0..n)
                .map(|j| simplex[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64)
                .collect();
            let lerp = |t: f64| -> Vec<f64> {
                (0..n).map(|j| centroid[j] + t * (simplex[n][j] - centroid[j])).collect()
            };
            let xr = lerp(-1.0);
            let fr = f(&xr);
            evals += 1;
            if fr < vals[0] {
                let xe = lerp(-2.0);
                let fe = f(&xe);
                evals += 1;
                if fe < fr {
                    simplex[n] = xe;
                    vals[n] = fe;
                } else {
                    simplex[n] = xr;
                    vals[n] = fr;
                }
            } else if fr < vals[n - 1] {
                simplex[n] = xr;
                vals[n] = fr;
            } else {
                let (xc, fc) = if fr < vals[n] {
                    let xc = lerp(-0.5);
                    let fc = f(&xc);
                    (xc, fc)
                } else {
                    let xc = lerp(0.5);
                    let fc = f(&xc);
                    (xc, fc)
                };
                evals += 1;
                if fc < vals[n].min(fr) {
                    simplex[n] = xc;
                    vals[n] = fc;
                } else {
                    for i in 1..=n {
                        let p: Vec<f64> = (0..n)
                            .map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j]))
                            .collect();
                        vals[i] = f(&p);
                        simplex[i] = p;
                        evals += 1;
                    }
                }
            }
        }
        let best = (0..=n).min_by(|a, b| vals[*a].total_cmp(&vals[*b])).unwrap_or(0);
        (simplex[best].clone(), vals[best], converged, evals)
    }
}

fn strided<T: Copy>(v: &[T], max: usize) -> Vec<T> {
    if v.len() <= max {
        return v.to_vec();
    }
    let stride = v.len() as f64 / max as f64;
    (0..max).map(|i| v[(i as f64 * stride) as usize]).collect()
}

/// Fits a sparse GP to scalar `(v, a)` pairs: inducing-point selection,
/// marginal-likelihood hyperparameter search and the posterior at the inducing points.
pub fn batch_gp_fit(data: &[(f64, f64)], m: usize, hyper_init: KernelHyperparams) -> Result<BatchGpFit> {
    hyper_init.validate()?;
    if data.iter().any(|(v, a)| !v.is_finite() || !a.is_finite()) {
        return Err(Error::Contract("batch GP data must be finite".into()));
    }
    let xs: Vec<f64> = data.iter().map(|d| d.0).collect();
    let basis = select_inducing(&xs, m)?;
    let span = basis[m - 1] - basis[0];
    let spacing = span / (m - 1) as f64;
    // Keep the squared length scale within a range where the basis Gram stays usable.
    let l_min = (0.05 * spacing).powi(2).max(1e-6);
    let l_max = (2.0 * spacing).powi(2).max(l_min * 10.0);

    let sub = strided(data, MAX_LIKELIHOOD_POINTS);
    let sx: Vec<f64> = sub.iter().map(|d| d.0).collect();
    let sy = DVector::from_iterator(sub.len(), sub.iter().map(|d| d.1));

    let to_hyper = |theta: &[f64]| KernelHyperparams {
        sigma_f: theta[0].exp().clamp(1e-4, 1e3),
        l: theta[1].exp().clamp(l_min, l_max),
        sigma_n: theta[2].exp().clamp(SIGMA_N_FLOOR, 1e2),
    };
    let objective = |theta: &[f64]| -dtc_log_likelihood(&sx, &sy, &basis, &to_hyper(theta));

    let l0 = hyper_init.l.clamp(l_min, l_max);
    let theta0 = [hyper_init.sigma_f.ln(), l0.ln(), hyper_init.sigma_n.max(SIGMA_N_FLOOR).ln()];
    let nm = NelderMead {
        max_evals: 600,
        f_tol: 1e-9,
    };
    let (theta, best, converged, evaluations) = nm.minimize(objective, &theta0, 0.5);
    if !converged {
        log::warn!("batch GP hyperparameter search did not converge; using best found ({best:.4})");
    }
    let hyper = to_hyper(&theta);

    let ys = DVector::from_iterator(data.len(), data.iter().map(|d| d.1));
    let (mean, cov) = dtc_posterior(&xs, &ys, &basis, &hyper)?;
    let state = RgpDimState::from_parts(basis, mean, cov, hyper)?;
    Ok(BatchGpFit {
        state,
        log_marginal_likelihood: -best,
        converged,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn generator(v: f64) -> f64 {
        -0.05 * v * v.abs()
    }

    #[test]
    fn inducing_selection_is_spread_and_sorted() {
        let xs: Vec<f64> = (0..1000).map(|i| -10.0 + 20.0 * i as f64 / 999.0).collect();
        let sel = select_inducing(&xs, 20).unwrap();
        assert_eq!(sel.len(), 20);
        assert_eq!(sel[0], -10.0);
        assert_eq!(sel[19], 10.0);
        assert!(sel.windows(2).all(|w| w[1] > w[0]));
        let max_gap = sel.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        assert!(max_gap < 2.0 * 20.0 / 19.0);
    }

    #[test]
    fn inducing_selection_needs_distinct_points() {
        assert!(select_inducing(&[1.0, 2.0], 3).is_err());
        assert!(select_inducing(&[1.0, 1.0, 1.0, 2.0], 3).is_err());
    }

    #[test]
    fn fits_quadratic_drag_curve() {
        let data: Vec<(f64, f64)> = (0..800)
            .map(|i| {
                let v = -10.0 + 20.0 * i as f64 / 799.0;
                (v, generator(v))
            })
            .collect();
        let fit = batch_gp_fit(&data, 20, KernelHyperparams::default()).unwrap();
        for i in 0..=160 {
            let v = -8.0 + 16.0 * i as f64 / 160.0;
            let truth = generator(v);
            let err = (fit.infer(v).0 - truth).abs();
            // 5% of the generator, with an absolute floor where the curve crosses zero.
            assert!(err <= (0.05 * truth.abs()).max(0.01), "v={v} err={err} truth={truth}");
        }
    }

    #[test]
    fn dense_noiseless_data_stays_well_posed() {
        let data: Vec<(f64, f64)> = (0..6000)
            .map(|i| {
                let v = 2.0 * (i as f64 * 0.37).sin();
                (v, 5.0 * generator(v))
            })
            .collect();
        let fit = batch_gp_fit(&data, 20, KernelHyperparams::default()).unwrap();
        assert!(fit.state.cov.iter().all(|c| c.is_finite()));
        for v in [-1.5, -0.5, 0.0, 0.7, 1.9] {
            assert!((fit.infer(v).0 - 5.0 * generator(v)).abs() < 1e-3);
        }
    }

    #[test]
    fn noiseless_linear_data_hits_noise_floor() {
        let data: Vec<(f64, f64)> = (0..300)
            .map(|i| {
                let v = -5.0 + 10.0 * i as f64 / 299.0;
                (v, 0.3 * v)
            })
            .collect();
        let fit = batch_gp_fit(&data, 12, KernelHyperparams::default()).unwrap();
        assert!(fit.state.hyper.sigma_n >= SIGMA_N_FLOOR);
        assert!(fit.state.hyper.sigma_n < 0.02, "sigma_n = {}", fit.state.hyper.sigma_n);
    }

    #[test]
    fn predictions_at_inducing_points_equal_posterior_means() {
        let data: Vec<(f64, f64)> = (0..200)
            .map(|i| {
                let v = -6.0 + 12.0 * i as f64 / 199.0;
                (v, generator(v) + 0.01 * (i as f64 * 1.7).sin())
            })
            .collect();
        let fit = batch_gp_fit(&data, 10, KernelHyperparams::default()).unwrap();
        for (i, v) in fit.state.basis_v.iter().enumerate() {
            let mu = fit.infer(*v).0;
            assert!((mu - fit.state.mean[i]).abs() <= 1e-6 * (1.0 + mu.abs()));
        }
    }

    #[test]
    fn too_little_data_is_rejected() {
        let data = vec![(0.0, 0.0), (1.0, 1.0)];
        assert!(batch_gp_fit(&data, 5, KernelHyperparams::default()).is_err());
    }

    #[test]
    fn nelder_mead_finds_quadratic_minimum() {
        let nm = NelderMead {
            max_evals: 2000,
            f_tol: 1e-14,
        };
        let (x, f, conv, _) = nm.minimize(
            |p| (p[0] - 1.0).powi(2) + 3.0 * (p[1] + 2.0).powi(2) + 0.5,
            &[0.0, 0.0],
            0.5,
        );
        assert!(conv);
        assert!((x[0] - 1.0).abs() < 1e-5 && (x[1] + 2.0).abs() < 1e-5);
        assert!((f - 0.5).abs() < 1e-9);
    }
}
