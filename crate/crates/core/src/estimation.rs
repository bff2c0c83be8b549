//! Online ridge regression of price changes on trade regressors, with the
//! self-normalized confidence ellipsoid used by the confidence-triggered
//! policies.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{lambda_min, log_det_spd, quad_form};
use crate::model::{NoiseModel, ThetaDomain};
use crate::qp;

/// Relative ridge added when `kappa = 0` so the Gram matrix is invertible.
const SINGULAR_JITTER: f64 = 1e-12;

/// Sufficient statistics `V = kappa I + sum psi psi'`, `sum psi y` and the
/// published estimate.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    v: DMatrix<f64>,
    xty: DVector<f64>,
    kappa: f64,
    t: usize,
    theta_current: DVector<f64>,
    update_times: Vec<usize>,
    lambda_min_cache: Cell<Option<f64>>,
    log_det_cache: Cell<Option<f64>>,
}

impl EstimatorState {
    /// Fresh estimator publishing `theta0` until the first update.
    pub fn new(dim: usize, kappa: f64, theta0: DVector<f64>) -> Result<Self> {
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be nonnegative, got {kappa}")));
        }
        if theta0.len() != dim {
            return Err(Error::Dimension {
                what: "theta0",
                expected: dim,
                got: theta0.len(),
            });
        }
        Ok(Self {
            v: DMatrix::identity(dim, dim) * kappa,
            xty: DVector::zeros(dim),
            kappa,
            t: 0,
            theta_current: theta0,
            update_times: Vec::new(),
            lambda_min_cache: Cell::new(Some(kappa)),
            log_det_cache: Cell::new(None),
        })
    }

    pub fn dim(&self) -> usize {
        self.xty.len()
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Number of ingested samples.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn xty(&self) -> &DVector<f64> {
        &self.xty
    }

    pub fn theta_current(&self) -> &DVector<f64> {
        &self.theta_current
    }

    pub fn update_times(&self) -> &[usize] {
        &self.update_times
    }

    /// Adds one observation `y = psi' theta + noise`.
    pub fn ingest(&mut self, psi: &DVector<f64>, y: f64) {
        debug_assert_eq!(psi.len(), self.dim());
        self.v.ger(1.0, psi, psi, 1.0);
        self.xty.axpy(y, psi, 1.0);
        self.t += 1;
        self.lambda_min_cache.set(None);
        self.log_det_cache.set(None);
    }

    /// Smallest eigenvalue of `V`, cached between ingests.
    pub fn lambda_min(&self) -> f64 {
        if let Some(v) = self.lambda_min_cache.get() {
            return v;
        }
        let v = lambda_min(&self.v);
        self.lambda_min_cache.set(Some(v));
        v
    }

    /// `log det V`; `-inf` when `V` is singular.
    pub fn log_det(&self) -> f64 {
        if let Some(v) = self.log_det_cache.get() {
            return v;
        }
        let v = log_det_spd(&self.v).unwrap_or(f64::NEG_INFINITY);
        self.log_det_cache.set(Some(v));
        v
    }

    /// Unconstrained ridge estimate `V^{-1} sum psi y`. With `kappa = 0` and
    /// a singular Gram matrix this is the minimum-norm least-squares solution.
    pub fn theta_hat_unconstrained(&self) -> DVector<f64> {
        if let Some(chol) = self.v.clone().cholesky() {
            // rank-deficient Gram matrices can factor with tiny rounded pivots
            let diag = chol.l_dirty().diagonal();
            if diag.min() >= 1e-6 * diag.max() {
                return chol.solve(&self.xty);
            }
        }
        // minimum-norm solution through the eigendecomposition of the PSD Gram
        let eig = self.v.clone().symmetric_eigen();
        let tol = 1e-12 * eig.eigenvalues.amax();
        let coords = eig.eigenvectors.transpose() * &self.xty;
        let scaled = DVector::from_fn(coords.len(), |i, _| {
            let e = eig.eigenvalues[i];
            if e > tol {
                coords[i] / e
            } else {
                0.0
            }
        });
        &eig.eigenvectors * scaled
    }

    /// Hessian of the ridge objective used by the constrained solve.
    fn hessian(&self) -> DMatrix<f64> {
        if self.kappa > 0.0 {
            self.v.clone()
        } else {
            let jitter = SINGULAR_JITTER * (self.v.trace() / self.dim() as f64).max(1.0);
            &self.v + DMatrix::identity(self.dim(), self.dim()) * jitter
        }
    }

    /// `argmin_{theta in domain} sum (y - psi'theta)^2 + kappa ||theta||^2`,
    /// i.e. the `V`-metric projection of the ridge estimate onto the domain.
    pub fn solve_constrained(&self, domain: &ThetaDomain) -> Result<DVector<f64>> {
        let sol = qp::solve(&self.hessian(), &self.xty, domain, Some(&self.theta_current))?;
        Ok(sol.theta)
    }

    /// Publishes a new estimate at period `t`.
    pub fn record_update(&mut self, t: usize, theta: DVector<f64>) {
        debug_assert!(self.update_times.last().map_or(true, |&last| t > last));
        self.theta_current = theta;
        self.update_times.push(t);
    }

    /// Publishes `theta` without recording an update time (used by policies
    /// that re-estimate every period).
    pub fn set_theta(&mut self, theta: DVector<f64>) {
        self.theta_current = theta;
    }

    /// Squared radius of the confidence ellipsoid around the ridge estimate:
    /// `(C_eps sqrt(2 log(det(V)^{1/2} det(kappa I)^{-1/2} / delta)) + sqrt(kappa) ||theta_max||)^2`.
    /// Infinite when `kappa = 0`.
    pub fn confidence_radius_sq(&self, noise: &NoiseModel, domain: &ThetaDomain, delta: f64) -> f64 {
        if !(self.kappa > 0.0) {
            return f64::INFINITY;
        }
        let log_ratio = 0.5 * (self.log_det() - self.dim() as f64 * self.kappa.ln());
        let inner = 2.0 * (log_ratio - delta.ln());
        let radius = noise.c_eps * inner.max(0.0).sqrt() + self.kappa.sqrt() * domain.theta_max_norm();
        radius * radius
    }

    pub fn confidence_set(&self, noise: &NoiseModel, domain: &ThetaDomain, delta: f64) -> ConfidenceSet {
        ConfidenceSet {
            center: self.theta_hat_unconstrained(),
            shape: self.v.clone(),
            radius_sq: self.confidence_radius_sq(noise, domain, delta),
        }
    }

    /// Estimation-error bound at the current sample count; see [`error_bound_b`].
    pub fn error_bound_b(
        &self,
        noise: &NoiseModel,
        domain: &ThetaDomain,
        delta: f64,
        c_v: f64,
        c_psi: f64,
    ) -> f64 {
        error_bound_b(self.t, self.kappa, noise, domain, delta, c_v, c_psi)
    }
}

/// `{theta : (theta - center)' V (theta - center) <= radius_sq}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSet {
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    pub radius_sq: f64,
}

impl ConfidenceSet {
    pub fn distance_sq(&self, theta: &DVector<f64>) -> f64 {
        quad_form(&self.shape, &(theta - &self.center))
    }

    pub fn contains(&self, theta: &DVector<f64>) -> bool {
        self.distance_sq(theta) <= self.radius_sq
    }
}

/// High-probability bound on `||theta_t - theta*||` at an update time `t`:
///
/// ```text
/// b_t = (2 C_eps sqrt((M+1) log(C_psi^2 t / kappa + M + 1) + 2 log(1/delta)) + 2 sqrt(kappa) ||theta_max||)
///       / sqrt(C_v t)
/// ```
///
/// Diagnostic only. Nonincreasing in `t` for fixed `C_psi` when `M >= 2`.
pub fn error_bound_b(
    t: usize,
    kappa: f64,
    noise: &NoiseModel,
    domain: &ThetaDomain,
    delta: f64,
    c_v: f64,
    c_psi: f64,
) -> f64 {
    let dim = domain.dim() as f64;
    let t = t as f64;
    let log_term = dim * (c_psi * c_psi * t / kappa + dim).ln() + 2.0 * (1.0 / delta).ln();
    let numer = 2.0 * noise.c_eps * log_term.sqrt() + 2.0 * kappa.sqrt() * domain.theta_max_norm();
    numer / (c_v * t).sqrt()
}
