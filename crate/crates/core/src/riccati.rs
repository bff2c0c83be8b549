//! Average-cost Riccati solution for the execution problem.
//!
//! The value matrix `P` solves
//!
//! ```text
//! P = A'PA + Q - (S' + B'PA)'(R + B'PB)^{-1}(S' + B'PA),   R + B'PB > 0,
//! ```
//!
//! and the optimal policy is `u = L z` with `L = -(R + B'PB)^{-1}(S' + B'PA)`.
//! `Q` is indefinite in general, so the stabilizing solution is reached by
//! value iteration from `P = 0`. The doubling method produces the same
//! iterates sampled at steps `2^k`.
//!
//! Early iterates need not satisfy `R + B'PB > 0`: with strong impact
//! relative to risk aversion the one-period problem rewards pumping the
//! price, and the second iterate is indefinite. The recursion stays
//! well-defined as long as the denominator is nonzero, and positivity is
//! enforced on the limit.
//!
//! Position and impact states are measured in shares (~1e4) while factors are
//! O(1), which leaves `P` with blocks twelve orders of magnitude apart. Both
//! solvers work on a rescaled system in which the share-denominated
//! coordinates and the control are expressed in units of `1/sqrt(R)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{lambda_min, norm2, spectral_radius, symmetrize};
use crate::model::{ModelParams, SystemMatrices};

/// Iteration scheme for [`solve_dare`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DareMethod {
    /// Plain fixed-point iteration of the Bellman backup from `P = 0`.
    ValueIteration,
    /// Structured doubling: the value-iteration sequence at steps `2^k`.
    #[default]
    Doubling,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DareOptions {
    /// Relative residual tolerance.
    pub tol: f64,
    pub max_iter: usize,
    pub method: DareMethod,
}

impl Default for DareOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 1_000_000,
            method: DareMethod::Doubling,
        }
    }
}

/// Stabilizing Riccati solution and the quantities derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    /// Optimal gain as a vector: `u = l . z`.
    pub l: DVector<f64>,
    pub g_cl: DMatrix<f64>,
    /// Minimum expected average cost `tr(P Omega~)`; negative means profit.
    pub avg_cost: f64,
    /// Regressor map `U = 1 L + [A - I]_{0..=M}`, so that `psi = U z`.
    pub u_map: DMatrix<f64>,
    /// `R + B'PB`.
    pub r_eff: f64,
    /// `||P - backup(P)||_F`, unscaled.
    pub residual: f64,
    pub iterations: usize,
    pub spectral_radius: f64,
}

impl RiccatiSolution {
    pub fn action(&self, z: &DVector<f64>) -> f64 {
        self.l.dot(z)
    }
}

/// Balancing transform: share-denominated coordinates and the control are
/// divided by `c = 1/sqrt(R)`.
struct Scaling {
    c: f64,
    /// Per-coordinate multipliers `D` with `z = D z~`.
    d: DVector<f64>,
}

impl Scaling {
    fn new(sys: &SystemMatrices) -> Self {
        let c = 1.0 / sys.r_cost.sqrt();
        let n = sys.n();
        let d = DVector::from_fn(n, |i, _| if i <= sys.m { c } else { 1.0 });
        Self { c, d }
    }

    fn apply(&self, sys: &SystemMatrices) -> SystemMatrices {
        let d = &self.d;
        let n = sys.n();
        let a = DMatrix::from_fn(n, n, |i, j| sys.a[(i, j)] * d[j] / d[i]);
        let b = DVector::from_fn(n, |i, _| sys.b[i] * self.c / d[i]);
        let q = DMatrix::from_fn(n, n, |i, j| sys.q[(i, j)] * d[i] * d[j]);
        let s = DVector::from_fn(n, |i, _| sys.s[i] * d[i] * self.c);
        let omega_tilde =
            DMatrix::from_fn(n, n, |i, j| sys.omega_tilde[(i, j)] / (d[i] * d[j]));
        SystemMatrices {
            a,
            b,
            q,
            s,
            r_cost: sys.r_cost * self.c * self.c,
            omega_tilde,
            m: sys.m,
            k: sys.k,
        }
    }

    fn unscale_p(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let d = &self.d;
        DMatrix::from_fn(p.nrows(), p.ncols(), |i, j| p[(i, j)] / (d[i] * d[j]))
    }
}

/// One Bellman backup `P -> A'PA + Q - k k'/(R + B'PB)` with `k = S + A'PB`.
/// Returns the new matrix and `R + B'PB`.
pub fn bellman_backup(sys: &SystemMatrices, p: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let pb = p * &sys.b;
    let den = sys.r_cost + sys.b.dot(&pb);
    let k = &sys.s + sys.a.transpose() * &pb;
    let mut next = sys.a.transpose() * p * &sys.a + &sys.q - (&k * k.transpose()) / den;
    symmetrize(&mut next);
    (next, den)
}

/// Frobenius norm of `P - backup(P)`.
pub fn dare_residual(sys: &SystemMatrices, p: &DMatrix<f64>) -> f64 {
    let (next, _) = bellman_backup(sys, p);
    (p - next).norm()
}

/// `L = -(R + B'PB)^{-1}(S' + B'PA)` as a vector.
pub fn gain(sys: &SystemMatrices, p: &DMatrix<f64>) -> DVector<f64> {
    let pb = p * &sys.b;
    let den = sys.r_cost + sys.b.dot(&pb);
    -(&sys.s + sys.a.transpose() * pb) / den
}

/// Solves the average-cost Riccati equation and derives gain, closed loop,
/// regressor map and average cost.
pub fn solve_dare(sys: &SystemMatrices, opts: &DareOptions) -> Result<RiccatiSolution> {
    if !(opts.tol > 0.0) {
        return Err(Error::Config("DARE tolerance must be positive".into()));
    }
    let scaling = Scaling::new(sys);
    let scaled = scaling.apply(sys);

    let (p_scaled, iterations) = match opts.method {
        DareMethod::ValueIteration => value_iteration(&scaled, opts)?,
        DareMethod::Doubling => doubling(&scaled, opts)?,
    };

    let p = scaling.unscale_p(&p_scaled);
    // gain from the scaled solution: L = c L~ D^{-1}
    let l_scaled = gain(&scaled, &p_scaled);
    let l = DVector::from_fn(sys.n(), |i, _| scaling.c * l_scaled[i] / scaling.d[i]);
    let r_eff = sys.r_cost + sys.b.dot(&(&p * &sys.b));
    if !(r_eff > 0.0) {
        return Err(Error::Indefinite {
            step: iterations,
            value: r_eff,
        });
    }

    let g_cl = &sys.a + &sys.b * l.transpose();
    let sr = spectral_radius(&g_cl);
    if !(sr < 1.0) {
        return Err(Error::Unstable { spectral_radius: sr });
    }
    let residual = dare_residual(sys, &p);
    let avg_cost = (&p * &sys.omega_tilde).trace();
    let u_map = regressor_map(sys, &l);

    Ok(RiccatiSolution {
        p,
        l,
        g_cl,
        avg_cost,
        u_map,
        r_eff,
        residual,
        iterations,
        spectral_radius: sr,
    })
}

/// `U = 1 L + [A - I]` restricted to the position and impact rows.
pub fn regressor_map(sys: &SystemMatrices, l: &DVector<f64>) -> DMatrix<f64> {
    let n = sys.n();
    let rows = sys.m + 1;
    DMatrix::from_fn(rows, n, |i, j| {
        let shift = if i == j { sys.a[(i, j)] - 1.0 } else { sys.a[(i, j)] };
        l[j] + shift
    })
}

/// Denominator check for intermediate iterates.
fn usable(den: f64) -> bool {
    den.is_finite() && den != 0.0
}

fn value_iteration(sys: &SystemMatrices, opts: &DareOptions) -> Result<(DMatrix<f64>, usize)> {
    let n = sys.n();
    let mut p = DMatrix::zeros(n, n);
    let mut change = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let (next, den) = bellman_backup(sys, &p);
        if !usable(den) {
            return Err(Error::Indefinite { step: it, value: den });
        }
        change = (&next - &p).norm();
        p = next;
        if change <= 1e-3 * opts.tol * (1.0 + p.norm()) {
            let res = dare_residual(sys, &p);
            if res <= opts.tol * (1.0 + p.norm()) {
                return Ok((p, it));
            }
        }
    }
    Err(Error::NoConvergence {
        solver: "DARE value iteration",
        iterations: opts.max_iter,
        residual: change,
    })
}

/// Structured doubling on the cross-term-free form
/// `A^ = A - B R^{-1} S'`, `Q^ = Q - S R^{-1} S'`, `G = B R^{-1} B'`.
/// After `k` steps `H_k` equals the value iterate at step `2^k`.
fn doubling(sys: &SystemMatrices, opts: &DareOptions) -> Result<(DMatrix<f64>, usize)> {
    let n = sys.n();
    let rinv = 1.0 / sys.r_cost;
    let mut ak = &sys.a - &sys.b * sys.s.transpose() * rinv;
    let mut gk = &sys.b * sys.b.transpose() * rinv;
    let mut hk = &sys.q - &sys.s * sys.s.transpose() * rinv;
    let max_steps = opts.max_iter.min(200);

    // work buffers, reused across steps
    let mut w = DMatrix::<f64>::zeros(n, n);
    let mut winv_a = DMatrix::<f64>::zeros(n, n);
    let mut winv_g = DMatrix::<f64>::zeros(n, n);
    let mut tmp = DMatrix::<f64>::zeros(n, n);
    let mut tmp_t = DMatrix::<f64>::zeros(n, n);
    let mut a_next = DMatrix::<f64>::zeros(n, n);
    let mut h_prev = DMatrix::<f64>::zeros(n, n);
    let mut hb = DVector::<f64>::zeros(n);

    let mut change = f64::INFINITY;
    for step in 1..=max_steps {
        hb.gemv(1.0, &hk, &sys.b, 0.0);
        let den = sys.r_cost + sys.b.dot(&hb);
        if !usable(den) {
            return Err(Error::Indefinite { step, value: den });
        }
        // W = I + G_k H_k
        w.gemm(1.0, &gk, &hk, 0.0);
        for i in 0..n {
            w[(i, i)] += 1.0;
        }
        let lu = w.clone().lu();
        winv_a.copy_from(&ak);
        winv_g.copy_from(&gk);
        if !(lu.solve_mut(&mut winv_a) && lu.solve_mut(&mut winv_g)) {
            return Err(Error::Indefinite { step, value: den });
        }
        h_prev.copy_from(&hk);
        // H_{k+1} = H_k + A_k' H_k W^{-1} A_k
        tmp.gemm(1.0, &h_prev, &winv_a, 0.0);
        hk.gemm_tr(1.0, &ak, &tmp, 1.0);
        // G_{k+1} = G_k + A_k W^{-1} G_k A_k'
        tmp.gemm(1.0, &ak, &winv_g, 0.0);
        tmp.transpose_to(&mut tmp_t);
        gk.gemm(1.0, &ak, &tmp_t, 1.0);
        // A_{k+1} = A_k W^{-1} A_k
        a_next.gemm(1.0, &ak, &winv_a, 0.0);
        std::mem::swap(&mut ak, &mut a_next);
        symmetrize(&mut gk);
        symmetrize(&mut hk);

        h_prev -= &hk;
        change = h_prev.norm();
        if change <= 1e-3 * opts.tol * (1.0 + hk.norm()) {
            let res = dare_residual(sys, &hk);
            if res <= opts.tol * (1.0 + hk.norm()) {
                return Ok((hk, step));
            }
        }
    }
    Err(Error::NoConvergence {
        solver: "DARE doubling",
        iterations: max_steps,
        residual: change,
    })
}

/// Value matrix and gain entries for the one-factor, permanent-impact-only
/// problem. `p_xf` is the coefficient of the `x f` cross term of the value
/// function, i.e. twice the off-diagonal entry of `P`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormSolution {
    pub p_xx: f64,
    pub p_xf: f64,
    pub p_ff: f64,
    pub l_x: f64,
    pub l_f: f64,
}

pub fn closed_form_single_factor(
    lambda: f64,
    rho: f64,
    sigma_eps: f64,
    phi: f64,
    g: f64,
) -> ClosedFormSolution {
    let rs = rho * sigma_eps;
    let root = (2.0 * lambda * rs + rs * rs).sqrt();
    let p_xx = (lambda - rs + root) / 2.0;
    let p_xf = -g * lambda / ((1.0 - phi) * lambda - phi * rs + phi * root);
    let p_ff = -g * g * phi * phi
        / (2.0
            * (1.0 - phi * phi)
            * ((1.0 - phi).powi(2) * lambda + (1.0 + phi * phi) * rs + (1.0 - phi * phi) * root));
    let l_x = -2.0 * rs / (rs + root);
    let l_f = g * phi / ((1.0 - phi) * lambda + rs + root);
    ClosedFormSolution {
        p_xx,
        p_xf,
        p_ff,
        l_x,
        l_f,
    }
}

/// Backward recursion of the finite-horizon problem from a zero terminal value.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteHorizon {
    /// `errors[T] = ||P_0^(T) - P|| / ||P||` (spectral norm), `T = 0..=horizon`.
    pub errors: Vec<f64>,
    pub p0: DMatrix<f64>,
    /// Steps whose backup was taken from a matrix with `R + B'PB <= 0`.
    pub indefinite_steps: Vec<usize>,
}

pub fn finite_horizon_value(
    sys: &SystemMatrices,
    p_star: &DMatrix<f64>,
    horizon: usize,
) -> Result<FiniteHorizon> {
    let n = sys.n();
    let p_norm = norm2(p_star);
    if !(p_norm > 0.0) {
        return Err(Error::Degenerate("infinite-horizon value matrix is zero".into()));
    }
    let mut p = DMatrix::zeros(n, n);
    let mut errors = Vec::with_capacity(horizon + 1);
    errors.push(norm2(&(&p - p_star)) / p_norm);
    let mut indefinite_steps = Vec::new();
    for step in 1..=horizon {
        let (next, den) = bellman_backup(sys, &p);
        if !usable(den) {
            return Err(Error::Indefinite { step, value: den });
        }
        if den < 0.0 {
            indefinite_steps.push(step);
        }
        p = next;
        errors.push(norm2(&(&p - p_star)) / p_norm);
    }
    Ok(FiniteHorizon {
        errors,
        p0: p,
        indefinite_steps,
    })
}

/// Stationary covariance `Pi = G Pi G' + Omega~` of a stable closed loop.
///
/// Uses Smith's doubling, which produces the partial sums of
/// `sum_i G^i Omega~ G'^i` at `2^k` terms.
pub fn stationary_covariance(g_cl: &DMatrix<f64>, omega_tilde: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    const TOL: f64 = 1e-12;
    let sr = spectral_radius(g_cl);
    if !(sr < 1.0) {
        return Err(Error::Unstable { spectral_radius: sr });
    }
    let mut pi = omega_tilde.clone();
    let mut ak = g_cl.clone();
    for _ in 0..200 {
        let inc = &ak * &pi * ak.transpose();
        pi += &inc;
        ak = &ak * &ak;
        if inc.norm() <= 1e-3 * TOL * pi.norm().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    symmetrize(&mut pi);
    let residual = (&pi - g_cl * &pi * g_cl.transpose() - omega_tilde).norm();
    if residual > TOL * (1.0 + pi.norm()) {
        return Err(Error::NoConvergence {
            solver: "Lyapunov doubling",
            iterations: 200,
            residual,
        });
    }
    Ok(pi)
}

/// `U Pi U'`: stationary second moment of the regressor under the closed loop.
pub fn regressor_covariance(sol: &RiccatiSolution, pi: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = &sol.u_map * pi * sol.u_map.transpose();
    symmetrize(&mut c);
    c
}

/// `E[(psi' theta)^2] / sigma_eps` under the closed loop of `sol`.
pub fn signal_to_noise(sol: &RiccatiSolution, pi: &DMatrix<f64>, theta: &DVector<f64>, sigma_eps: f64) -> f64 {
    let c = regressor_covariance(sol, pi);
    theta.dot(&(&c * theta)) / sigma_eps
}

/// Relative action error `(L - L*) Pi (L - L*)' / (L* Pi L*')`.
pub fn relative_gain_error(l: &DVector<f64>, l_star: &DVector<f64>, pi_star: &DMatrix<f64>) -> f64 {
    let diff = l - l_star;
    diff.dot(&(pi_star * &diff)) / l_star.dot(&(pi_star * l_star))
}

/// Default grid over the parameter domain: every point of
/// `{0, theta_max/2, theta_max}^(M+1)` that satisfies the sum constraint,
/// plus the half-space vertices `beta e_j`.
pub fn theta_grid(params: &ModelParams) -> Vec<DVector<f64>> {
    let dom = &params.domain;
    let n = dom.dim();
    let total = 3usize.pow(n as u32);
    let mut grid = Vec::new();
    for code in 0..total {
        let mut c = code;
        let theta = DVector::from_fn(n, |j, _| {
            let level = c % 3;
            c /= 3;
            dom.theta_max[j] * level as f64 / 2.0
        });
        if theta.sum() >= dom.beta {
            grid.push(theta);
        }
    }
    for j in 0..n {
        let mut v = DVector::zeros(n);
        v[j] = dom.beta.min(dom.theta_max[j]);
        if v.sum() >= dom.beta {
            grid.push(v);
        }
    }
    grid
}

/// Grid approximation of `inf_theta lambda_min(U(theta) Pi(theta) U(theta)')`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationFloor {
    pub value: f64,
    pub argmin: DVector<f64>,
    pub values: Vec<f64>,
}

pub fn excitation_floor(
    params: &ModelParams,
    grid: &[DVector<f64>],
    opts: &DareOptions,
) -> Result<ExcitationFloor> {
    if grid.is_empty() {
        return Err(Error::Degenerate("empty parameter grid".into()));
    }
    let values = grid
        .par_iter()
        .map(|theta| {
            let sys = params.system_for_unchecked(theta);
            let sol = solve_dare(&sys, opts)?;
            let pi = stationary_covariance(&sol.g_cl, &sys.omega_tilde)?;
            Ok(lambda_min(&regressor_covariance(&sol, &pi)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (idx, value) = values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    Ok(ExcitationFloor {
        value,
        argmin: grid[idx].clone(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FactorModel, ImpactParams, NoiseModel, ThetaDomain};
    use approx::assert_relative_eq;

    fn permanent_one_factor(lambda: f64, rho: f64, sigma_eps: f64, phi: f64, g: f64) -> ModelParams {
        ModelParams {
            impact: ImpactParams::new(lambda, vec![]),
            decay: vec![],
            factors: FactorModel {
                phi: DMatrix::from_element(1, 1, phi),
                g: DVector::from_element(1, g),
                omega_cov: DMatrix::identity(1, 1),
                c_omega: None,
            },
            noise: NoiseModel::gaussian(sigma_eps),
            rho,
            domain: ThetaDomain {
                theta_max: vec![1e-5],
                beta: 1e-12,
            },
        }
    }

    #[test]
    fn desk_scale_average_profit_and_stability() {
        let sys = ModelParams::desk_scale().assemble_system().unwrap();
        let sol = solve_dare(&sys, &DareOptions::default()).unwrap();
        assert!(sol.spectral_radius < 1.0);
        assert!(sol.r_eff > 0.0);
        assert!(sol.residual <= 1e-10 * (1.0 + sol.p.norm()));
        assert_eq!(sol.p, sol.p.transpose());
        let profit = -sol.avg_cost;
        assert!((profit - 765.19).abs() <= 0.005 * 765.19, "profit {profit}");
        // gain consistency with the returned P
        let l = gain(&sys, &sol.p);
        for (a, b) in l.iter().zip(sol.l.iter()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-8, epsilon = 1e-14);
        }
    }

    #[test]
    fn doubling_agrees_with_value_iteration() {
        let sys = ModelParams::desk_scale().assemble_system().unwrap();
        let fast = solve_dare(&sys, &DareOptions::default()).unwrap();
        let slow = solve_dare(
            &sys,
            &DareOptions {
                method: DareMethod::ValueIteration,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(fast.iterations < 40);
        for (a, b) in fast.p.iter().zip(slow.p.iter()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-7, epsilon = 1e-20);
        }
        for (a, b) in fast.l.iter().zip(slow.l.iter()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-7, epsilon = 1e-20);
        }
    }

    #[test]
    fn decoupled_factors_contribute_no_cost() {
        let mut p = ModelParams::desk_scale();
        p.factors.g = DVector::zeros(2);
        let sys = p.assemble_system().unwrap();
        let sol = solve_dare(&sys, &DareOptions::default()).unwrap();
        assert!(sol.avg_cost.abs() < 1e-9, "avg cost {}", sol.avg_cost);
        assert!(sol.l.rows(7, 2).amax() < 1e-9);
    }

    #[test]
    fn closed_form_matches_general_solver() {
        for &lambda in &[1e-9, 2e-8, 5e-7] {
            for &phi in &[0.3, 0.707, 0.95] {
                let (rho, se, g) = (1e-6, 0.0013, 0.006);
                let params = permanent_one_factor(lambda, rho, se, phi, g);
                let sys = params.assemble_system().unwrap();
                let sol = solve_dare(&sys, &DareOptions::default()).unwrap();
                let cf = closed_form_single_factor(lambda, rho, se, phi, g);
                assert_relative_eq!(sol.p[(0, 0)], cf.p_xx, max_relative = 1e-8);
                assert_relative_eq!(2.0 * sol.p[(0, 1)], cf.p_xf, max_relative = 1e-8);
                assert_relative_eq!(sol.p[(1, 1)], cf.p_ff, max_relative = 1e-8);
                assert_relative_eq!(sol.l[0], cf.l_x, max_relative = 1e-8);
                assert_relative_eq!(sol.l[1], cf.l_f, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn closed_form_limits() {
        let (rho, se, phi, g) = (1e-6, 0.0013, 0.707, 0.006);
        let cf = closed_form_single_factor(1e-20, rho, se, phi, g);
        assert_relative_eq!(cf.l_x, -1.0, max_relative = 1e-5);
        let limit = g * g * phi * phi / (4.0 * (1.0 - phi * phi) * rho * se);
        assert_relative_eq!(-cf.p_ff, limit, max_relative = 1e-5);
        assert_relative_eq!(cf.l_f, g * phi / (2.0 * rho * se), max_relative = 1e-5);

        let zero_alpha = closed_form_single_factor(2e-8, rho, se, phi, 0.0);
        assert_eq!(zero_alpha.l_f, 0.0);
        assert_eq!(zero_alpha.p_xf, 0.0);
        assert_eq!(zero_alpha.p_ff, 0.0);
    }

    #[test]
    fn gains_shrink_as_permanent_impact_grows() {
        let lambdas: Vec<f64> = (0..20).map(|i| 1e-10 * 1.8f64.powi(i)).collect();
        let cfs: Vec<_> = lambdas
            .iter()
            .map(|&l| closed_form_single_factor(l, 1e-6, 0.0013, 0.707, 0.006))
            .collect();
        for w in cfs.windows(2) {
            assert!(w[1].l_x.abs() < w[0].l_x.abs());
            assert!(w[1].l_f.abs() < w[0].l_f.abs());
        }
    }

    #[test]
    fn finite_horizon_converges_geometrically() {
        let sys = ModelParams::desk_scale().assemble_system().unwrap();
        let sol = solve_dare(&sys, &DareOptions::default()).unwrap();
        let fh = finite_horizon_value(&sys, &sol.p, 300).unwrap();
        assert_eq!(fh.errors.len(), 301);
        assert_eq!(fh.errors[0], 1.0);
        assert!(fh.errors[300] <= 1e-6, "{}", fh.errors[300]);
        // one step from zero is a single backup
        let (one, _) = bellman_backup(&sys, &DMatrix::zeros(9, 9));
        let expect = norm2(&(&one - &sol.p)) / norm2(&sol.p);
        assert_relative_eq!(fh.errors[1], expect, max_relative = 1e-12);
        for t in 50..300 {
            assert!(fh.errors[t + 1] < fh.errors[t]);
        }
    }

    #[test]
    fn lyapunov_special_cases() {
        let omega = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let pi = stationary_covariance(&DMatrix::zeros(2, 2), &omega).unwrap();
        assert_eq!(pi, omega);

        let pi = stationary_covariance(&DMatrix::from_element(1, 1, 0.9), &DMatrix::from_element(1, 1, 3.0)).unwrap();
        assert_relative_eq!(pi[(0, 0)], 3.0 / (1.0 - 0.81), max_relative = 1e-12);

        let unstable = DMatrix::from_element(1, 1, 1.01);
        assert!(matches!(
            stationary_covariance(&unstable, &DMatrix::identity(1, 1)),
            Err(Error::Unstable { .. })
        ));
    }

    #[test]
    fn desk_scale_signal_to_noise() {
        let params = ModelParams::desk_scale();
        let sys = params.assemble_system().unwrap();
        let sol = solve_dare(&sys, &DareOptions::default()).unwrap();
        let pi = stationary_covariance(&sol.g_cl, &sys.omega_tilde).unwrap();
        let snr = signal_to_noise(&sol, &pi, &params.theta_star(), params.noise.sigma_eps);
        assert!((snr - 0.058).abs() <= 0.05 * 0.058, "snr {snr}");
        assert_eq!(relative_gain_error(&sol.l, &sol.l, &pi), 0.0);
    }

    #[test]
    fn excitation_floor_small_grids() {
        let params = ModelParams::desk_scale();
        let opts = DareOptions::default();
        let star = params.theta_star();
        let single = excitation_floor(&params, &[star.clone()], &opts).unwrap();
        assert!(single.value > 0.0);

        let heavy = params.domain.theta_max_vec();
        let pair = excitation_floor(&params, &[star.clone(), heavy.clone()], &opts).unwrap();
        let heavy_only = excitation_floor(&params, &[heavy], &opts).unwrap();
        assert_eq!(pair.value, single.value.min(heavy_only.value));
        assert_eq!(pair.values.len(), 2);
    }

    #[test]
    fn grid_respects_half_space() {
        let params = ModelParams::desk_scale();
        let grid = theta_grid(&params);
        assert_eq!(grid.len(), 3usize.pow(7) - 1 + 7);
        assert!(grid.iter().all(|t| params.domain.contains(t, 0.0)));
    }
}
