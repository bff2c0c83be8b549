//! Market model: impact parameters, factor process, noise, the one-step
//! price/state recursion and the assembly of the linear-quadratic problem data.
//!
//! The controlled state is `z = [x, d_1..d_M, f_1..f_K]` where `x` is the
//! position, `d_m` the transient impact states and `f` the observable factors.
//! A trade `u` moves the price by
//!
//! ```text
//! dp = g'f_prev + lambda*u + sum_m gamma_m (d'_m - d_m) + eps,   d'_m = r_m d_m + u
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Permanent and transient impact coefficients `theta = [lambda, gamma_1..gamma_M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactParams {
    pub lambda: f64,
    pub gamma: Vec<f64>,
}

impl ImpactParams {
    pub fn new(lambda: f64, gamma: Vec<f64>) -> Self {
        Self { lambda, gamma }
    }

    pub fn from_theta(theta: &DVector<f64>) -> Self {
        Self {
            lambda: theta[0],
            gamma: theta.iter().skip(1).copied().collect(),
        }
    }

    pub fn m(&self) -> usize {
        self.gamma.len()
    }

    pub fn theta(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.gamma.len() + 1,
            std::iter::once(self.lambda).chain(self.gamma.iter().copied()),
        )
    }

    /// `lambda + sum(gamma)`, the total immediate impact of a unit trade.
    pub fn total(&self) -> f64 {
        self.lambda + self.gamma.iter().sum::<f64>()
    }
}

/// The admissible parameter set `{0 <= theta <= theta_max, 1'theta >= beta}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaDomain {
    pub theta_max: Vec<f64>,
    pub beta: f64,
}

impl ThetaDomain {
    pub fn new(theta_max: Vec<f64>, beta: f64) -> Result<Self> {
        let domain = Self { theta_max, beta };
        domain.validate()?;
        Ok(domain)
    }

    /// Number of transient impact terms `M`.
    pub fn m(&self) -> usize {
        self.theta_max.len().saturating_sub(1)
    }

    pub fn dim(&self) -> usize {
        self.theta_max.len()
    }

    pub fn theta_max_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta_max)
    }

    pub fn theta_max_norm(&self) -> f64 {
        self.theta_max.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta_max.is_empty() {
            return Err(Error::Config("theta_max must not be empty".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be strictly positive, got {}",
                self.beta
            )));
        }
        if self.theta_max.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config(
                "theta_max must be strictly positive componentwise".into(),
            ));
        }
        let total: f64 = self.theta_max.iter().sum();
        if self.beta > total {
            return Err(Error::Infeasible(format!(
                "beta {} exceeds sum(theta_max) {}",
                self.beta, total
            )));
        }
        Ok(())
    }

    /// Membership with an absolute slack `tol` on every constraint.
    pub fn contains(&self, theta: &DVector<f64>, tol: f64) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(&self.theta_max)
                .all(|(&t, &hi)| t >= -tol && t <= hi + tol)
            && theta.sum() >= self.beta - tol
    }

    /// `theta_max / 10`, pushed onto the half-space if needed.
    ///
    /// An initial estimate near `theta_max` makes the trader so cautious that
    /// the excitation it generates stays below typical trigger slopes, and a
    /// confidence-triggered policy started there never updates.
    pub fn default_theta0(&self) -> DVector<f64> {
        let mut theta = self.theta_max_vec() * 0.1;
        let sum = theta.sum();
        if sum < self.beta {
            // sum(theta_max) >= beta, so scaling toward theta_max reaches the half-space
            let total: f64 = self.theta_max.iter().sum();
            let w = (self.beta - sum) / (total - sum);
            theta = &theta + (self.theta_max_vec() - &theta) * w;
        }
        theta
    }
}

/// First-order vector autoregression `f' = Phi f + omega` with loadings `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub phi: DMatrix<f64>,
    pub g: DVector<f64>,
    pub omega_cov: DMatrix<f64>,
    /// Almost-sure bound on `||omega||`; only used for truncated sampling.
    pub c_omega: Option<f64>,
}

impl FactorModel {
    pub fn k(&self) -> usize {
        self.g.len()
    }
}

/// Price noise: per-period variance and the sub-Gaussian scale used in confidence radii.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub sigma_eps: f64,
    pub c_eps: f64,
    /// Optional symmetric clamp applied to sampled `eps`.
    pub eps_bound: Option<f64>,
}

impl NoiseModel {
    /// Gaussian noise with `C_eps = sqrt(sigma_eps)`.
    pub fn gaussian(sigma_eps: f64) -> Self {
        Self {
            sigma_eps,
            c_eps: sigma_eps.sqrt(),
            eps_bound: None,
        }
    }
}

/// True market parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub impact: ImpactParams,
    pub decay: Vec<f64>,
    pub factors: FactorModel,
    pub noise: NoiseModel,
    pub rho: f64,
    pub domain: ThetaDomain,
}

impl ModelParams {
    /// The desk-scale setting used throughout the experiments: six transient
    /// impact terms, two factors, five-minute periods.
    pub fn desk_scale() -> Self {
        Self {
            impact: ImpactParams::new(2e-8, vec![0.0, 6e-8, 0.0, 3e-8, 7e-8, 5e-8]),
            decay: vec![0.50, 0.63, 0.71, 0.79, 0.89, 0.93],
            factors: FactorModel {
                phi: DMatrix::from_diagonal(&DVector::from_vec(vec![0.707, 0.917])),
                g: DVector::from_vec(vec![0.006, 0.002]),
                omega_cov: DMatrix::identity(2, 2),
                c_omega: None,
            },
            noise: NoiseModel::gaussian(0.0013),
            rho: 1e-6,
            domain: ThetaDomain {
                theta_max: vec![5e-7; 7],
                beta: 5e-9,
            },
        }
    }

    pub fn m(&self) -> usize {
        self.decay.len()
    }

    pub fn k(&self) -> usize {
        self.factors.k()
    }

    /// Dimension of the controlled state, `M + K + 1`.
    pub fn state_dim(&self) -> usize {
        1 + self.m() + self.k()
    }

    pub fn theta_star(&self) -> DVector<f64> {
        self.impact.theta()
    }

    /// A copy of the model with different impact coefficients.
    pub fn with_theta(&self, theta: &DVector<f64>) -> Self {
        Self {
            impact: ImpactParams::from_theta(theta),
            ..self.clone()
        }
    }

    /// Checks dimensions and every domain invariant.
    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        let k = self.k();
        if self.impact.gamma.len() != m {
            return Err(Error::Dimension {
                what: "gamma (must match decay rates)",
                expected: m,
                got: self.impact.gamma.len(),
            });
        }
        if self.factors.phi.nrows() != k || self.factors.phi.ncols() != k {
            return Err(Error::Dimension {
                what: "phi (must be K x K with K = len(g))",
                expected: k,
                got: self.factors.phi.nrows().max(self.factors.phi.ncols()),
            });
        }
        if self.factors.omega_cov.nrows() != k || self.factors.omega_cov.ncols() != k {
            return Err(Error::Dimension {
                what: "omega_cov (must be K x K)",
                expected: k,
                got: self.factors.omega_cov.nrows().max(self.factors.omega_cov.ncols()),
            });
        }
        if self.domain.dim() != m + 1 {
            return Err(Error::Dimension {
                what: "theta_max (must have M + 1 entries)",
                expected: m + 1,
                got: self.domain.dim(),
            });
        }
        self.domain.validate()?;

        let theta = self.theta_star();
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("impact coefficients must be finite".into()));
        }
        if theta.iter().any(|&v| v < 0.0) {
            return Err(Error::Config(
                "impact coefficients must be nonnegative".into(),
            ));
        }
        if !self.domain.contains(&theta, 0.0) {
            return Err(Error::Config(format!(
                "true impact coefficients lie outside the parameter domain \
                 (need theta <= theta_max and sum(theta) >= beta = {})",
                self.domain.beta
            )));
        }

        if self.decay.iter().any(|&r| !(0.0..1.0).contains(&r)) {
            return Err(Error::Config(
                "decay rates must be distinct and lie in [0, 1); found a rate outside [0, 1)"
                    .into(),
            ));
        }
        for (i, a) in self.decay.iter().enumerate() {
            if self.decay[i + 1..].contains(a) {
                return Err(Error::Config(format!(
                    "decay rates must be distinct and lie in [0, 1); rate {a} is repeated"
                )));
            }
        }

        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config("rho must be strictly positive".into()));
        }
        if !(self.noise.sigma_eps > 0.0 && self.noise.sigma_eps.is_finite()) {
            return Err(Error::Config("sigma_eps must be strictly positive".into()));
        }
        if !(self.noise.c_eps > 0.0 && self.noise.c_eps.is_finite()) {
            return Err(Error::Config("c_eps must be strictly positive".into()));
        }
        if let Some(b) = self.noise.eps_bound {
            if !(b > 0.0) {
                return Err(Error::Config("eps_bound must be positive".into()));
            }
        }
        if let Some(c) = self.factors.c_omega {
            if !(c > 0.0) {
                return Err(Error::Config("c_omega must be positive".into()));
            }
        }
        if self.factors.g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("factor loadings must be finite".into()));
        }

        let omega = &self.factors.omega_cov;
        if k > 0 {
            if (omega - omega.transpose()).amax() > 1e-12 * omega.amax().max(1.0) {
                return Err(Error::Config("omega_cov must be symmetric".into()));
            }
            if omega.clone().cholesky().is_none() {
                return Err(Error::Config("omega_cov must be positive definite".into()));
            }
            let sr = crate::linalg::spectral_radius(&self.factors.phi);
            if !(sr < 1.0) {
                return Err(Error::Config(format!(
                    "factor transition must be stable (spectral radius {sr})"
                )));
            }
        }
        Ok(())
    }

    /// Builds the LQ problem data for the true impact coefficients.
    pub fn assemble_system(&self) -> Result<SystemMatrices> {
        self.validate()?;
        Ok(self.system_for_unchecked(&self.theta_star()))
    }

    /// Builds the LQ problem data for a candidate `theta`, reusing the known
    /// decay rates, factor model and risk aversion. Dimensions are assumed to
    /// have been validated.
    pub fn system_for_unchecked(&self, theta: &DVector<f64>) -> SystemMatrices {
        let m = self.m();
        let k = self.k();
        let n = 1 + m + k;
        let rs = self.rho * self.noise.sigma_eps;
        let lambda = theta[0];
        let gamma = theta.rows(1, m);

        let mut a = DMatrix::zeros(n, n);
        a[(0, 0)] = 1.0;
        for (i, &r) in self.decay.iter().enumerate() {
            a[(1 + i, 1 + i)] = r;
        }
        a.view_mut((1 + m, 1 + m), (k, k)).copy_from(&self.factors.phi);

        let mut b = DVector::zeros(n);
        for i in 0..=m {
            b[i] = 1.0;
        }

        // v = [0, gamma'(diag(r) - I), g']'
        let mut v = DVector::zeros(n);
        for i in 0..m {
            v[1 + i] = gamma[i] * (self.decay[i] - 1.0);
        }
        v.rows_mut(1 + m, k).copy_from(&self.factors.g);

        let mut q = DMatrix::zeros(n, n);
        q[(0, 0)] = rs;
        for j in 0..n {
            q[(0, j)] -= 0.5 * v[j];
            q[(j, 0)] -= 0.5 * v[j];
        }

        let mut s = DVector::zeros(n);
        s[0] = rs - 0.5 * (lambda + gamma.sum());

        let mut omega_tilde = DMatrix::zeros(n, n);
        omega_tilde
            .view_mut((1 + m, 1 + m), (k, k))
            .copy_from(&self.factors.omega_cov);

        SystemMatrices {
            a,
            b,
            q,
            s,
            r_cost: rs,
            omega_tilde,
            m,
            k,
        }
    }

    /// One period of the price and state recursion. The factor term uses the
    /// pre-trade factor values. Returns the next state and the price change.
    pub fn step_dynamics(
        &self,
        state: &MarketState,
        u: f64,
        eps: f64,
        omega: &DVector<f64>,
    ) -> (MarketState, f64) {
        let theta = &self.impact;
        let mut d_next = state.d.clone();
        let mut transient = 0.0;
        for (i, (dn, &r)) in d_next.iter_mut().zip(&self.decay).enumerate() {
            let updated = r * *dn + u;
            transient += theta.gamma[i] * (updated - *dn);
            *dn = updated;
        }
        let alpha = self.factors.g.dot(&state.f);
        let dp = alpha + theta.lambda * u + transient + eps;
        let f_next = &self.factors.phi * &state.f + omega;
        let next = MarketState {
            x: state.x + u,
            d: d_next,
            f: f_next,
            price: state.price + dp,
        };
        (next, dp)
    }
}

/// Position, transient impact states, factors and price level.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    pub x: f64,
    pub d: DVector<f64>,
    pub f: DVector<f64>,
    pub price: f64,
}

impl MarketState {
    pub fn zero(m: usize, k: usize, price: f64) -> Self {
        Self {
            x: 0.0,
            d: DVector::zeros(m),
            f: DVector::zeros(k),
            price,
        }
    }

    /// The stacked LQ state `[x, d', f']'`.
    pub fn z(&self) -> DVector<f64> {
        let m = self.d.len();
        let k = self.f.len();
        let mut z = DVector::zeros(1 + m + k);
        z[0] = self.x;
        z.rows_mut(1, m).copy_from(&self.d);
        z.rows_mut(1 + m, k).copy_from(&self.f);
        z
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.price.is_finite()
            && self.d.iter().all(|v| v.is_finite())
            && self.f.iter().all(|v| v.is_finite())
    }
}

/// Regression input for one executed period: `[u, (d' - d)']'`.
pub fn regressor(before: &MarketState, u: f64, after: &MarketState) -> DVector<f64> {
    let m = before.d.len();
    let mut psi = DVector::zeros(m + 1);
    psi[0] = u;
    for i in 0..m {
        psi[1 + i] = after.d[i] - before.d[i];
    }
    psi
}

/// Data of the average-cost LQ problem
/// `min E[z'Qz + 2z'Su + Ru^2]` subject to `z' = Az + Bu + W`, `Cov[W] = omega_tilde`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrices {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q: DMatrix<f64>,
    pub s: DVector<f64>,
    pub r_cost: f64,
    pub omega_tilde: DMatrix<f64>,
    pub m: usize,
    pub k: usize,
}

impl SystemMatrices {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// One-period cost `z'Qz + 2 z'S u + R u^2`.
    pub fn stage_cost(&self, z: &DVector<f64>, u: f64) -> f64 {
        z.dot(&(&self.q * z)) + 2.0 * u * self.s.dot(z) + self.r_cost * u * u
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn small_model() -> ModelParams {
        ModelParams {
            impact: ImpactParams::new(2e-8, vec![1e-8]),
            decay: vec![0.5],
            factors: FactorModel {
                phi: DMatrix::from_element(1, 1, 0.707),
                g: DVector::from_element(1, 0.006),
                omega_cov: DMatrix::identity(1, 1),
                c_omega: None,
            },
            noise: NoiseModel::gaussian(0.0013),
            rho: 1e-6,
            domain: ThetaDomain {
                theta_max: vec![5e-7; 2],
                beta: 5e-9,
            },
        }
    }

    #[test]
    fn desk_scale_transition_blocks() {
        let sys = ModelParams::desk_scale().assemble_system().unwrap();
        assert_eq!(sys.n(), 9);
        let expected = [1.0, 0.50, 0.63, 0.71, 0.79, 0.89, 0.93, 0.707, 0.917];
        for i in 0..9 {
            for j in 0..9 {
                let want = if i == j { expected[i] } else { 0.0 };
                assert_eq!(sys.a[(i, j)], want, "A[{i},{j}]");
            }
        }
        let b: Vec<f64> = sys.b.iter().copied().collect();
        assert_eq!(b, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_relative_eq!(sys.r_cost, 1.3e-9, max_relative = 1e-15);
        assert_eq!(sys.omega_tilde[(7, 7)], 1.0);
        assert_eq!(sys.omega_tilde[(8, 8)], 1.0);
        assert_eq!(sys.omega_tilde.sum(), 2.0);
        assert_eq!(sys.q, sys.q.transpose());
    }

    #[test]
    fn no_transient_and_no_alpha_gives_rank_one_q() {
        let mut p = ModelParams::desk_scale();
        p.impact.gamma = vec![0.0; 6];
        p.impact.lambda = 1e-7;
        p.factors.g = DVector::zeros(2);
        let sys = p.assemble_system().unwrap();
        let rs = 1e-6 * 0.0013;
        let mut expected = DMatrix::zeros(9, 9);
        expected[(0, 0)] = rs;
        assert_eq!(sys.q, expected);
    }

    #[test]
    fn small_system_entries() {
        // Hand evaluation: rs = 1.3e-9, v = [0, 1e-8 * (0.5 - 1), 0.006]
        let sys = small_model().assemble_system().unwrap();
        let rs = 1.3e-9;
        let q_expected = DMatrix::from_row_slice(
            3,
            3,
            &[rs, 2.5e-9, -0.003, 2.5e-9, 0.0, 0.0, -0.003, 0.0, 0.0],
        );
        for (a, b) in sys.q.iter().zip(q_expected.iter()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12, epsilon = 1e-24);
        }
        let a_expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.707]);
        assert_eq!(sys.a, a_expected);
        // S = (rs - (2e-8 + 1e-8)/2) e1 = -1.37e-8 e1
        assert_relative_eq!(sys.s[0], -1.37e-8, max_relative = 1e-12);
        assert_eq!(sys.s[1], 0.0);
        assert_eq!(sys.s[2], 0.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut p = ModelParams::desk_scale();
        p.impact.gamma.pop();
        assert!(matches!(p.assemble_system(), Err(Error::Dimension { .. })));

        let mut p = ModelParams::desk_scale();
        p.factors.g = DVector::zeros(3);
        assert!(matches!(p.validate(), Err(Error::Dimension { .. })));
    }

    #[test]
    fn repeated_decay_rates_are_rejected() {
        let mut p = ModelParams::desk_scale();
        p.decay[1] = 0.5;
        let err = p.validate().unwrap_err().to_string();
        assert!(err.contains("distinct"), "{err}");
    }

    #[test]
    fn zero_step_is_flat() {
        let p = ModelParams::desk_scale();
        let s = MarketState::zero(6, 2, 50.0);
        let (next, dp) = p.step_dynamics(&s, 0.0, 0.0, &DVector::zeros(2));
        assert_eq!(dp, 0.0);
        assert_eq!(next.x, 0.0);
        assert_eq!(next.price, 50.0);
    }

    #[test]
    fn permanent_only_price_change() {
        let mut p = ModelParams::desk_scale();
        p.impact.gamma = vec![0.0; 6];
        p.factors.g = DVector::zeros(2);
        let mut s = MarketState::zero(6, 2, 50.0);
        s.d = DVector::from_element(6, 123.0);
        s.f = DVector::from_vec(vec![0.3, -2.0]);
        let (_, dp) = p.step_dynamics(&s, 1e4, 0.01, &DVector::zeros(2));
        assert_eq!(dp, 2e-8 * 1e4 + 0.01);
    }

    #[test]
    fn desk_scale_step_from_unit_factors() {
        // dp = g'f + (lambda + sum gamma) u with d = 0: 0.008 + 2.3e-7 * 1e4
        let p = ModelParams::desk_scale();
        let mut s = MarketState::zero(6, 2, 50.0);
        s.f = DVector::from_vec(vec![1.0, 1.0]);
        let (next, dp) = p.step_dynamics(&s, 1e4, 0.0, &DVector::zeros(2));
        assert_relative_eq!(dp, 0.0103, max_relative = 1e-12);
        assert_relative_eq!(next.f[0], 0.707);
        assert_relative_eq!(next.f[1], 0.917);
        assert_eq!(next.x, 1e4);
    }

    #[test]
    fn regressor_examples() {
        let p = ModelParams::desk_scale();
        let s = MarketState::zero(6, 2, 50.0);
        let (next, _) = p.step_dynamics(&s, 0.0, 0.0, &DVector::zeros(2));
        assert_eq!(regressor(&s, 0.0, &next), DVector::zeros(7));

        let (next, _) = p.step_dynamics(&s, 1.0, 0.0, &DVector::zeros(2));
        assert_eq!(regressor(&s, 1.0, &next), DVector::from_element(7, 1.0));

        let small = small_model();
        let mut s = MarketState::zero(1, 1, 50.0);
        s.d[0] = 2.0;
        let (next, _) = small.step_dynamics(&s, 1.0, 0.0, &DVector::zeros(1));
        assert_eq!(regressor(&s, 1.0, &next), DVector::from_vec(vec![1.0, 0.0]));
    }

    #[test]
    fn default_theta0_is_feasible() {
        let dom = ThetaDomain::new(vec![1.0, 1.0], 1.5).unwrap();
        let t0 = dom.default_theta0();
        assert!(dom.contains(&t0, 1e-12));
        assert_relative_eq!(t0.sum(), 1.5, max_relative = 1e-12);
        assert!(ThetaDomain::new(vec![1.0, 1.0], 2.5).is_err());
    }

    fn arb_state() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64, f64)> {
        (
            proptest::collection::vec(-1e5f64..1e5, 6),
            proptest::collection::vec(-3f64..3.0, 2),
            -1e5f64..1e5,
            -1e5f64..1e5,
        )
    }

    proptest! {
        #[test]
        fn regressor_matches_closed_form((d, f, x, u) in arb_state()) {
            let p = ModelParams::desk_scale();
            let s = MarketState { x, d: DVector::from_vec(d), f: DVector::from_vec(f), price: 50.0 };
            let (next, _) = p.step_dynamics(&s, u, 0.0, &DVector::zeros(2));
            let psi = regressor(&s, u, &next);
            prop_assert_eq!(psi[0], u);
            for m in 0..6 {
                let closed = (p.decay[m] - 1.0) * s.d[m] + u;
                prop_assert!((psi[1 + m] - closed).abs() <= 1e-9 * (1.0 + closed.abs()));
            }
        }

        #[test]
        fn price_change_decomposes((d, f, x, u) in arb_state(), eps in -0.1f64..0.1) {
            let p = ModelParams::desk_scale();
            let s = MarketState { x, d: DVector::from_vec(d), f: DVector::from_vec(f), price: 50.0 };
            let (next, dp) = p.step_dynamics(&s, u, eps, &DVector::zeros(2));
            let psi = regressor(&s, u, &next);
            let lhs = dp - eps - p.factors.g.dot(&s.f);
            let rhs = psi.dot(&p.theta_star());
            // terms are O(1e-3), absolute floor guards exact cancellation
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-6));
        }

        #[test]
        fn noiseless_step_is_linear(
            (d1, f1, x1, u1) in arb_state(),
            (d2, f2, x2, u2) in arb_state(),
            a in -2f64..2.0,
            b in -2f64..2.0,
        ) {
            let p = ModelParams::desk_scale();
            let zero = DVector::zeros(2);
            let s1 = MarketState { x: x1, d: DVector::from_vec(d1), f: DVector::from_vec(f1), price: 0.0 };
            let s2 = MarketState { x: x2, d: DVector::from_vec(d2), f: DVector::from_vec(f2), price: 0.0 };
            let mix = MarketState {
                x: a * s1.x + b * s2.x,
                d: &s1.d * a + &s2.d * b,
                f: &s1.f * a + &s2.f * b,
                price: 0.0,
            };
            let (n1, dp1) = p.step_dynamics(&s1, u1, 0.0, &zero);
            let (n2, dp2) = p.step_dynamics(&s2, u2, 0.0, &zero);
            let (nm, dpm) = p.step_dynamics(&mix, a * u1 + b * u2, 0.0, &zero);
            let combo = n1.z() * a + n2.z() * b;
            let scale = 1.0 + combo.amax();
            prop_assert!((nm.z() - combo).amax() <= 1e-9 * scale);
            prop_assert!((dpm - (a * dp1 + b * dp2)).abs() <= 1e-9 * (1.0 + dpm.abs()));
        }
    }
}
