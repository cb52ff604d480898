//! Dense box-constrained convex QP: `min ½ xᵀHx + gᵀx  s.t. lb ≤ x ≤ ub`.
//!
//! Primal active-set method. The working set holds variables fixed at one of
//! their bounds; the free subproblem is solved by Cholesky each iteration.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// `‖x − clip(x − ∇f(x))‖∞`; zero exactly at a KKT point.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub active: usize,
}

pub fn qp_objective(h: &DMatrix<f64>, g: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(h * x)) + g.dot(x)
}

pub fn projected_gradient_residual(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
    x: &DVector<f64>,
) -> f64 {
    let grad = h * x + g;
    (0..x.len())
        .map(|i| (x[i] - (x[i] - grad[i]).clamp(lb[i], ub[i])).abs())
        .fold(0.0, f64::max)
}

fn check_shapes(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
) -> Result<()> {
    let n = g.len();
    if h.nrows() != n || h.ncols() != n || lb.len() != n || ub.len() != n {
        return Err(Error::Contract(format!(
            "QP shape mismatch: H {}x{}, g {}, lb {}, ub {}",
            h.nrows(),
            h.ncols(),
            n,
            lb.len(),
            ub.len()
        )));
    }
    for i in 0..n {
        if !(lb[i] <= ub[i]) {
            return Err(Error::Contract(format!("QP bound {i}: lb {} > ub {}", lb[i], ub[i])));
        }
    }
    if h.iter().chain(g.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Solver("non-finite QP data".into()));
    }
    Ok(())
}

/// Solves the QP starting from `x_init` (clipped into the box; zero if `None`).
pub fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
    x_init: Option<&DVector<f64>>,
    max_iter: usize,
) -> Result<QpSolution> {
    check_shapes(h, g, lb, ub)?;
    let n = g.len();
    let scale = 1.0 + h.amax() + g.amax();
    let tol = 1e-13 * scale;

    let mut x = match x_init {
        Some(x0) if x0.len() == n => x0.clone(),
        _ => DVector::zeros(n),
    };
    let mut ws = vec![Bound::Free; n];
    for i in 0..n {
        if x[i] <= lb[i] {
            x[i] = lb[i];
            ws[i] = Bound::Lower;
        } else if x[i] >= ub[i] {
            x[i] = ub[i];
            ws[i] = Bound::Upper;
        }
    }

    let mut iterations = 0;
    let mut converged = false;
    // Set after an unblocked full step: x minimizes over the current face.
    let mut on_face_min = false;
    while iterations < max_iter {
        iterations += 1;
        let grad = h * &x + g;
        let free: Vec<usize> = (0..n).filter(|&i| ws[i] == Bound::Free).collect();

        let mut step = DVector::zeros(n);
        if !free.is_empty() && !on_face_min {
            let nf = free.len();
            let hff = DMatrix::from_fn(nf, nf, |a, b| h[(free[a], free[b])]);
            let rhs = DVector::from_fn(nf, |a, _| -grad[free[a]]);
            let p = match hff.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => {
                    // Semidefinite free block: regularize lightly.
                    let reg = hff + DMatrix::identity(nf, nf) * (1e-12 * scale);
                    reg.cholesky()
                        .ok_or_else(|| Error::Solver("QP free block is not positive definite".into()))?
                        .solve(&rhs)
                }
            };
            for (a, &i) in free.iter().enumerate() {
                step[i] = p[a];
            }
        }

        if on_face_min || step.amax() <= 1e-14 * (1.0 + x.amax()) {
            on_face_min = false;
            // Stationary on the current face: release the worst wrongly-signed bound.
            let mut worst = None;
            let mut worst_val = -tol;
            for i in 0..n {
                let lambda = match ws[i] {
                    Bound::Free => continue,
                    _ if lb[i] == ub[i] => continue,
                    Bound::Lower => grad[i],
                    Bound::Upper => -grad[i],
                };
                if lambda < worst_val {
                    worst_val = lambda;
                    worst = Some(i);
                }
            }
            match worst {
                None => {
                    converged = true;
                    break;
                }
                Some(i) => ws[i] = Bound::Free,
            }
            continue;
        }

        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..n {
            if ws[i] != Bound::Free {
                continue;
            }
            let (limit, side) = if step[i] < 0.0 {
                ((lb[i] - x[i]) / step[i], Bound::Lower)
            } else if step[i] > 0.0 {
                ((ub[i] - x[i]) / step[i], Bound::Upper)
            } else {
                continue;
            };
            if limit < alpha {
                alpha = limit.max(0.0);
                blocking = Some((i, side));
            }
        }
        x.axpy(alpha, &step, 1.0);
        match blocking {
            Some((i, side)) => {
                ws[i] = side;
                x[i] = if side == Bound::Lower { lb[i] } else { ub[i] };
            }
            None => on_face_min = true,
        }
    }

    for i in 0..n {
        x[i] = x[i].clamp(lb[i], ub[i]);
    }
    let kkt_residual = projected_gradient_residual(h, g, lb, ub, &x);
    let active = (0..n).filter(|&i| x[i] == lb[i] || x[i] == ub[i]).count();
    if !converged {
        log::warn!("QP stopped after {iterations} iterations, KKT residual {kkt_residual:.3e}");
    }
    Ok(QpSolution {
        x,
        kkt_residual,
        iterations,
        converged,
        active,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Accelerated projected gradient run to machine precision; independent of the active-set code.
    pub(crate) fn fista_reference(
        h: &DMatrix<f64>,
        g: &DVector<f64>,
        lb: &DVector<f64>,
        ub: &DVector<f64>,
    ) -> DVector<f64> {
        let lip = h.clone().symmetric_eigenvalues().max();
        let proj = |v: &DVector<f64>| DVector::from_fn(v.len(), |i, _| v[i].clamp(lb[i], ub[i]));
        let mut x = proj(&DVector::zeros(g.len()));
        let mut y = x.clone();
        let mut t = 1.0f64;
        for _ in 0..20_000 {
            let x_next = proj(&(&y - (h * &y + g) / lip));
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &x_next + (&x_next - &x) * ((t - 1.0) / t_next);
            x = x_next;
            t = t_next;
        }
        x
    }

    /// Enumerates every lower/upper/free assignment; feasible only for small n.
    pub(crate) fn brute_force(
        h: &DMatrix<f64>,
        g: &DVector<f64>,
        lb: &DVector<f64>,
        ub: &DVector<f64>,
    ) -> DVector<f64> {
        let n = g.len();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for code in 0..3usize.pow(n as u32) {
            let mut c = code;
            let mut x = DVector::zeros(n);
            let mut free = vec![];
            for i in 0..n {
                match c % 3 {
                    0 => x[i] = lb[i],
                    1 => x[i] = ub[i],
                    _ => free.push(i),
                }
                c /= 3;
            }
            if !free.is_empty() {
                let nf = free.len();
                let hff = DMatrix::from_fn(nf, nf, |a, b| h[(free[a], free[b])]);
                let rhs = DVector::from_fn(nf, |a, _| {
                    let i = free[a];
                    -(g[i] + (0..n).filter(|j| !free.contains(j)).map(|j| h[(i, j)] * x[j]).sum::<f64>())
                });
                let p = hff.lu().solve(&rhs).unwrap();
                if free.iter().enumerate().any(|(a, &i)| p[a] < lb[i] || p[a] > ub[i]) {
                    continue;
                }
                for (a, &i) in free.iter().enumerate() {
                    x[i] = p[a];
                }
            }
            let f = qp_objective(h, g, &x);
            if best.as_ref().map_or(true, |(fb, _)| f < *fb) {
                best = Some((f, x));
            }
        }
        best.unwrap().1
    }

    pub(crate) fn random_qp(
        rng: &mut ChaCha8Rng,
        n: usize,
    ) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = m.transpose() * &m / n as f64 + DMatrix::identity(n, n) * 0.5;
        let g = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let lb = DVector::from_fn(n, |_, _| rng.random_range(-1.5..0.0));
        let ub = DVector::from_fn(n, |i, _| lb[i] + rng.random_range(0.1..2.0));
        (h, g, lb, ub)
    }

    #[test]
    fn unconstrained_quadratic_is_exact() {
        let h = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let g = DVector::from_vec(vec![-1.0, -2.0]);
        let big = DVector::from_element(2, 1e6);
        let sol = solve_qp(&h, &g, &-&big, &big, None, 50).unwrap();
        let exact = h.clone().lu().solve(&-&g).unwrap();
        assert_abs_diff_eq!(sol.x, exact, epsilon = 1e-10);
        assert!(sol.converged);
        assert_eq!(sol.active, 0);
    }

    #[test]
    fn separable_case_is_projection() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 0.5]));
        let g = DVector::from_vec(vec![-3.0, 4.0, -0.2]);
        let lb = DVector::from_element(3, -1.0);
        let ub = DVector::from_element(3, 1.0);
        let sol = solve_qp(&h, &g, &lb, &ub, None, 50).unwrap();
        assert_eq!(sol.x, DVector::from_vec(vec![1.0, -1.0, 0.4]));
        assert_eq!(sol.active, 2);
        assert!(sol.kkt_residual < 1e-14);
    }

    #[test]
    fn fixed_variables_stay_fixed() {
        let h = DMatrix::identity(2, 2);
        let g = DVector::from_vec(vec![5.0, -5.0]);
        let lb = DVector::from_vec(vec![0.3, 0.0]);
        let ub = DVector::from_vec(vec![0.3, 1.0]);
        let sol = solve_qp(&h, &g, &lb, &ub, None, 50).unwrap();
        assert_eq!(sol.x[0], 0.3);
        assert_eq!(sol.x[1], 1.0);
    }

    #[test]
    fn rejects_bad_shapes_and_bounds() {
        let h = DMatrix::identity(2, 2);
        let g = DVector::zeros(3);
        let b = DVector::zeros(3);
        assert!(matches!(solve_qp(&h, &g, &b, &b, None, 10), Err(Error::Contract(_))));
        let g = DVector::zeros(2);
        let lb = DVector::from_element(2, 1.0);
        let ub = DVector::zeros(2);
        assert!(solve_qp(&h, &g, &lb, &ub, None, 10).is_err());
    }

    #[test]
    fn iteration_cap_returns_feasible_iterate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, g, lb, ub) = random_qp(&mut rng, 30);
        let sol = solve_qp(&h, &g, &lb, &ub, None, 1).unwrap();
        assert!(!sol.converged);
        assert!((0..30).all(|i| sol.x[i] >= lb[i] && sol.x[i] <= ub[i]));
    }

    #[test]
    fn small_random_qps_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(1..=7);
            let (h, g, lb, ub) = random_qp(&mut rng, n);
            let sol = solve_qp(&h, &g, &lb, &ub, None, 200).unwrap();
            let reference = brute_force(&h, &g, &lb, &ub);
            let diff = qp_objective(&h, &g, &sol.x) - qp_objective(&h, &g, &reference);
            assert!(diff.abs() < 1e-10, "n={n} diff={diff}");
        }
    }

    #[test]
    fn larger_random_qps_match_accelerated_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let n = rng.random_range(10..=40);
            let (h, g, lb, ub) = random_qp(&mut rng, n);
            let warm = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let sol = solve_qp(&h, &g, &lb, &ub, Some(&warm), 500).unwrap();
            assert!(sol.converged);
            let reference = fista_reference(&h, &g, &lb, &ub);
            let diff = qp_objective(&h, &g, &sol.x) - qp_objective(&h, &g, &reference);
            assert!(diff.abs() < 1e-8, "n={n} diff={diff}");
            assert!(sol.kkt_residual < 1e-10);
        }
    }
}
