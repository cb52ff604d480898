//! Recursive Gaussian process over body velocity → drag acceleration.
//!
//! Each body axis carries an independent sparse GP whose state is the
//! Gaussian posterior over latent function values at `m` fixed basis
//! velocities. Observations are folded in one at a time with a Kalman-style
//! gain; inference projects the basis posterior onto arbitrary query points
//! through `H = k(v, V) k(V, V)⁻¹`.

mod batch;

pub use batch::{batch_gp_fit, select_inducing, BatchGpFit};

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Squared-exponential kernel hyperparameters.
///
/// `l` divides the squared distance directly, i.e. it plays the role of a
/// squared length scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub sigma_f: f64,
    pub l: f64,
    pub sigma_n: f64,
}

impl Default for KernelHyperparams {
    fn default() -> Self {
        Self {
            sigma_f: 1.0,
            l: 0.1,
            sigma_n: 0.1,
        }
    }
}

impl KernelHyperparams {
    pub fn validate(&self) -> Result<()> {
        if [self.sigma_f, self.l, self.sigma_n]
            .iter()
            .any(|v| !v.is_finite() || *v <= 0.0)
        {
            return Err(Error::Config(format!(
                "kernel hyperparameters must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Kernel between two samples; `σ_n²` is added when both arguments are the same point.
pub fn kernel(x: f64, x2: f64, hyper: &KernelHyperparams) -> f64 {
    let noise = if x == x2 {
        hyper.sigma_n * hyper.sigma_n
    } else {
        0.0
    };
    kernel_latent(x, x2, hyper) + noise
}

/// Noise-free squared-exponential covariance of the latent function.
pub fn kernel_latent(x: f64, x2: f64, hyper: &KernelHyperparams) -> f64 {
    let d = x - x2;
    hyper.sigma_f * hyper.sigma_f * (-0.5 * d * d / hyper.l).exp()
}

/// `∂k_latent(x, x2)/∂x`.
pub fn kernel_latent_dx(x: f64, x2: f64, hyper: &KernelHyperparams) -> f64 {
    -(x - x2) / hyper.l * kernel_latent(x, x2, hyper)
}

pub(crate) fn gram_latent(a: &[f64], b: &[f64], hyper: &KernelHyperparams) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| kernel_latent(a[i], b[j], hyper))
}

pub(crate) fn cross_row(v: f64, basis: &[f64], hyper: &KernelHyperparams) -> DVector<f64> {
    DVector::from_iterator(basis.len(), basis.iter().map(|b| kernel_latent(v, *b, hyper)))
}

const BASE_JITTER: f64 = 1e-10;

/// Inverse of the latent basis Gram matrix via Cholesky, with a `1e-10·σ_f²`
/// jitter that is escalated only if the factorization fails.
pub fn basis_gram_inverse(basis: &[f64], hyper: &KernelHyperparams) -> Result<DMatrix<f64>> {
    let k = gram_latent(basis, basis, hyper);
    let scale = hyper.sigma_f * hyper.sigma_f;
    let mut jitter = BASE_JITTER * scale;
    for _ in 0..8 {
        let kj = &k + DMatrix::identity(basis.len(), basis.len()) * jitter;
        if let Some(chol) = kj.cholesky() {
            return Ok(chol.inverse());
        }
        jitter *= 10.0;
    }
    Err(Error::Degenerate(
        "basis Gram matrix not positive definite even with jitter".into(),
    ))
}

/// Posterior over the latent drag at one axis' basis velocities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RgpDimState {
    pub basis_v: Vec<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub hyper: KernelHyperparams,
    #[serde(skip)]
    k_basis_inv: DMatrix<f64>,
}

impl PartialEq for RgpDimState {
    fn eq(&self, other: &Self) -> bool {
        self.basis_v == other.basis_v && self.mean == other.mean && self.cov == other.cov && self.hyper == other.hyper
    }
}

impl RgpDimState {
    /// Prior state: zero mean, covariance `k(V, V)` with `σ_n²` on the diagonal.
    pub fn prior(basis_v: Vec<f64>, hyper: KernelHyperparams) -> Result<Self> {
        hyper.validate()?;
        let m = basis_v.len();
        let cov = gram_latent(&basis_v, &basis_v, &hyper)
            + DMatrix::identity(m, m) * (hyper.sigma_n * hyper.sigma_n);
        Self::from_parts(basis_v, DVector::zeros(m), cov, hyper)
    }

    pub fn from_parts(
        basis_v: Vec<f64>,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        hyper: KernelHyperparams,
    ) -> Result<Self> {
        hyper.validate()?;
        let m = basis_v.len();
        if m < 2 {
            return Err(Error::Config(format!("need at least 2 basis points, got {m}")));
        }
        if basis_v.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("basis velocities must be strictly increasing".into()));
        }
        if mean.len() != m || cov.nrows() != m || cov.ncols() != m {
            return Err(Error::Config("basis mean/covariance dimension mismatch".into()));
        }
        let k_basis_inv = basis_gram_inverse(&basis_v, &hyper)?;
        Ok(Self {
            basis_v,
            mean,
            cov,
            hyper,
            k_basis_inv,
        })
    }

    pub fn len(&self) -> usize {
        self.basis_v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis_v.is_empty()
    }

    pub fn k_basis_inv(&self) -> &DMatrix<f64> {
        &self.k_basis_inv
    }

    /// Rebuilds the cached inverse (after deserialization).
    pub fn refresh_cache(&mut self) -> Result<()> {
        self.k_basis_inv = basis_gram_inverse(&self.basis_v, &self.hyper)?;
        Ok(())
    }

    /// Row vector `H = k(v, V) k(V, V)⁻¹` as a column.
    fn projection(&self, v: f64) -> (DVector<f64>, DVector<f64>) {
        let k = cross_row(v, &self.basis_v, &self.hyper);
        let h = self.k_basis_inv.tr_mul(&k);
        (k, h)
    }

    /// Folds one scalar observation into the posterior.
    pub fn update(&mut self, v_obs: f64, a_obs: f64) -> Result<()> {
        if !v_obs.is_finite() || !a_obs.is_finite() {
            return Err(Error::Contract("RGP observation must be finite".into()));
        }
        let (k, j) = self.projection(v_obs);
        let b = kernel_latent(v_obs, v_obs, &self.hyper) - j.dot(&k);
        let cj = &self.cov * &j;
        let s = b + j.dot(&cj) + self.hyper.sigma_n * self.hyper.sigma_n;
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Degenerate(format!("innovation variance {s} is not positive")));
        }
        let gain = &cj / s;
        let innovation = a_obs - j.dot(&self.mean);
        self.mean += &gain * innovation;
        // C ← C − G S Gᵀ, then symmetrize.
        self.cov.ger(-s, &gain, &gain, 1.0);
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        self.cov = sym;
        Ok(())
    }

    /// Posterior mean and variance of the latent drag at `v`.
    pub fn infer(&self, v: f64) -> (f64, f64) {
        let (k, h) = self.projection(v);
        let mu = h.dot(&self.mean);
        let var = kernel_latent(v, v, &self.hyper) - h.dot(&k) + h.dot(&(&self.cov * &h));
        (mu, var.max(0.0))
    }

    pub fn mean_at(&self, v: f64) -> f64 {
        self.projection(v).1.dot(&self.mean)
    }
}

pub fn rgp_update(state: &RgpDimState, v_obs: f64, a_obs: f64) -> Result<RgpDimState> {
    let mut next = state.clone();
    next.update(v_obs, a_obs)?;
    Ok(next)
}

pub fn rgp_infer(state: &RgpDimState, v_query: f64) -> (f64, f64) {
    state.infer(v_query)
}

/// `m` equidistant points on `[-v_max, v_max]`.
pub fn equidistant_basis(v_max: f64, m: usize) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::Config(format!("need at least 2 basis points, got {m}")));
    }
    if !(v_max > 0.0) || !v_max.is_finite() {
        return Err(Error::Config(format!("v_max must be positive, got {v_max}")));
    }
    let step = 2.0 * v_max / (m - 1) as f64;
    Ok((0..m)
        .map(|i| if i == m - 1 { v_max } else { -v_max + step * i as f64 })
        .collect())
}

/// One drag observation: measured body velocity and estimated drag acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DragObservation {
    pub v_b: Vector3<f64>,
    pub a_tilde: Vector3<f64>,
    pub t: f64,
}

/// Three independent per-axis RGPs (x, y, z).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgpEnsemble {
    pub dims: [RgpDimState; 3],
}

pub fn rgp_init(v_max: f64, m: usize, hyper: KernelHyperparams) -> Result<RgpEnsemble> {
    let basis = equidistant_basis(v_max, m)?;
    let dim = RgpDimState::prior(basis, hyper)?;
    Ok(RgpEnsemble {
        dims: [dim.clone(), dim.clone(), dim],
    })
}

impl RgpEnsemble {
    pub fn update(&mut self, obs: &DragObservation) -> Result<()> {
        for (d, state) in self.dims.iter_mut().enumerate() {
            state.update(obs.v_b[d], obs.a_tilde[d])?;
        }
        Ok(())
    }

    pub fn infer(&self, v_b: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let mut mu = Vector3::zeros();
        let mut var = Vector3::zeros();
        for d in 0..3 {
            let (m, v) = self.dims[d].infer(v_b[d]);
            mu[d] = m;
            var[d] = v;
        }
        (mu, var)
    }

    pub fn refresh_cache(&mut self) -> Result<()> {
        self.dims.iter_mut().try_for_each(|d| d.refresh_cache())
    }
}

pub fn ensemble_infer(ens: &RgpEnsemble, v_b: &Vector3<f64>) -> Vector3<f64> {
    ens.infer(v_b).0
}
