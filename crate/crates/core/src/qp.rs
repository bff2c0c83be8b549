//! Strictly convex quadratic programs over the parameter domain
//!
//! ```text
//! minimize 1/2 theta' H theta - h' theta   s.t.  0 <= theta <= theta_max,  1'theta >= beta
//! ```
//!
//! solved by a primal active-set method. The working set is a labelling of
//! each coordinate as free, at its lower bound or at its upper bound, plus a
//! flag for the sum constraint, so every equality-constrained subproblem
//! reduces to one or two Cholesky solves on the free block.
//!
//! Coordinates are rescaled by `max(theta_max)` and the objective by the
//! largest diagonal entry of `H` before solving.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::ThetaDomain;

const MAX_ACTIVE_SET_ITERS: usize = 500;
/// Face enumeration is `O(2 * 3^n)` equality-constrained solves.
pub const MAX_ENUMERATION_DIM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpMethod {
    ActiveSet,
    Enumeration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub theta: DVector<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub method: QpMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

/// Problem in normalized coordinates `phi = theta / scale`.
struct Scaled {
    h: DMatrix<f64>,
    lin: DVector<f64>,
    hi: DVector<f64>,
    beta: f64,
    scale: f64,
}

impl Scaled {
    fn new(h: &DMatrix<f64>, lin: &DVector<f64>, domain: &ThetaDomain) -> Result<Self> {
        let n = domain.dim();
        if h.nrows() != n || h.ncols() != n {
            return Err(Error::Dimension {
                what: "QP Hessian",
                expected: n,
                got: h.nrows(),
            });
        }
        if lin.len() != n {
            return Err(Error::Dimension {
                what: "QP linear term",
                expected: n,
                got: lin.len(),
            });
        }
        domain.validate()?;
        let scale = domain.theta_max.iter().copied().fold(0.0, f64::max);
        let mut hs = h * (scale * scale);
        let mut ls = lin * scale;
        let norm = hs.diagonal().amax();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Degenerate("QP Hessian has no positive diagonal".into()));
        }
        hs /= norm;
        ls /= norm;
        Ok(Self {
            h: hs,
            lin: ls,
            hi: domain.theta_max_vec() / scale,
            beta: domain.beta / scale,
            scale,
        })
    }

    fn n(&self) -> usize {
        self.lin.len()
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) - self.lin.dot(x)
    }

    /// Minimizes over the affine set where `Lower`/`Upper` coordinates are
    /// pinned and, if `sum_active`, `1'x = beta`. Returns `None` when the
    /// face is degenerate (sum constraint with no free coordinate).
    fn face_minimizer(&self, status: &[Bound], sum_active: bool) -> Option<DVector<f64>> {
        let n = self.n();
        let free: Vec<usize> = (0..n).filter(|&j| status[j] == Bound::Free).collect();
        let mut x = DVector::from_fn(n, |j, _| match status[j] {
            Bound::Upper => self.hi[j],
            _ => 0.0,
        });
        if free.is_empty() {
            return if sum_active { None } else { Some(x) };
        }
        let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| self.h[(free[a], free[b])]);
        let chol = hff.cholesky()?;
        let rhs = DVector::from_fn(free.len(), |a, _| {
            let j = free[a];
            let fixed: f64 = (0..n)
                .filter(|&i| status[i] != Bound::Free)
                .map(|i| self.h[(j, i)] * x[i])
                .sum();
            self.lin[j] - fixed
        });
        let mut xf = chol.solve(&rhs);
        if sum_active {
            let ones = DVector::from_element(free.len(), 1.0);
            let y = chol.solve(&ones);
            let pinned: f64 = (0..n).filter(|&i| status[i] != Bound::Free).map(|i| x[i]).sum();
            let nu = (self.beta - pinned - xf.sum()) / y.sum();
            xf += y * nu;
        }
        for (a, &j) in free.iter().enumerate() {
            x[j] = xf[a];
        }
        Some(x)
    }

    fn feasible(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.iter().zip(self.hi.iter()).all(|(&v, &hi)| v >= -tol && v <= hi + tol)
            && x.sum() >= self.beta - tol
    }

    fn unscale(&self, x: &DVector<f64>) -> DVector<f64> {
        x * self.scale
    }
}

/// Minimizes `1/2 theta'H theta - h'theta` over `domain`. `H` must be
/// positive definite. `warm` is an optional starting point (clamped to the
/// domain before use).
pub fn solve(
    h: &DMatrix<f64>,
    lin: &DVector<f64>,
    domain: &ThetaDomain,
    warm: Option<&DVector<f64>>,
) -> Result<QpSolution> {
    let prob = Scaled::new(h, lin, domain)?;
    match active_set(&prob, warm) {
        Some((x, iterations)) => {
            let theta = prob.unscale(&x);
            let kkt = kkt_residual(h, lin, domain, &theta);
            if kkt <= 1e-9 {
                return Ok(QpSolution {
                    theta,
                    kkt_residual: kkt,
                    iterations,
                    method: QpMethod::ActiveSet,
                });
            }
        }
        None => {}
    }
    // cycling or an inaccurate active-set answer
    if prob.n() <= MAX_ENUMERATION_DIM {
        let theta = solve_by_enumeration(h, lin, domain)?;
        let kkt = kkt_residual(h, lin, domain, &theta);
        return Ok(QpSolution {
            theta,
            kkt_residual: kkt,
            iterations: 0,
            method: QpMethod::Enumeration,
        });
    }
    Err(Error::NoConvergence {
        solver: "active-set QP",
        iterations: MAX_ACTIVE_SET_ITERS,
        residual: f64::NAN,
    })
}

fn starting_point(prob: &Scaled, warm: Option<&DVector<f64>>) -> DVector<f64> {
    let n = prob.n();
    let mut x = match warm {
        Some(w) if w.len() == n => DVector::from_fn(n, |j, _| {
            let v = w[j] / prob.scale;
            if v.is_finite() {
                v.clamp(0.0, prob.hi[j])
            } else {
                prob.hi[j]
            }
        }),
        _ => prob.hi.clone(),
    };
    let sum = x.sum();
    if sum < prob.beta {
        let total = prob.hi.sum();
        let w = (prob.beta - sum) / (total - sum);
        x = &x + (&prob.hi - &x) * w;
        for j in 0..n {
            x[j] = x[j].min(prob.hi[j]);
        }
    }
    x
}

fn active_set(prob: &Scaled, warm: Option<&DVector<f64>>) -> Option<(DVector<f64>, usize)> {
    let n = prob.n();
    let mut x = starting_point(prob, warm);
    let mut status: Vec<Bound> = (0..n)
        .map(|j| {
            if x[j] <= 0.0 {
                x[j] = 0.0;
                Bound::Lower
            } else if x[j] >= prob.hi[j] {
                x[j] = prob.hi[j];
                Bound::Upper
            } else {
                Bound::Free
            }
        })
        .collect();
    let mut sum_active = status.contains(&Bound::Free) && (x.sum() - prob.beta).abs() <= 1e-15;

    let grad_scale = 1.0 + prob.lin.amax() + prob.h.amax();
    for iter in 1..=MAX_ACTIVE_SET_ITERS {
        let free: Vec<usize> = (0..n).filter(|&j| status[j] == Bound::Free).collect();
        if free.is_empty() && sum_active {
            sum_active = false;
        }
        let target = prob.face_minimizer(&status, sum_active)?;
        let p = &target - &x;

        if p.amax() <= 1e-14 * (1.0 + x.amax()) {
            let g = &prob.h * &x - &prob.lin;
            let mu = if sum_active {
                free.iter().map(|&j| g[j]).sum::<f64>() / free.len() as f64
            } else {
                0.0
            };
            // most negative multiplier
            let mut worst: Option<(f64, Option<usize>)> = None;
            for j in 0..n {
                let lam = match status[j] {
                    Bound::Free => continue,
                    Bound::Lower => g[j] - mu,
                    Bound::Upper => mu - g[j],
                };
                if worst.map_or(true, |(w, _)| lam < w) {
                    worst = Some((lam, Some(j)));
                }
            }
            if sum_active && worst.map_or(true, |(w, _)| mu < w) {
                worst = Some((mu, None));
            }
            match worst {
                Some((lam, which)) if lam < -1e-13 * grad_scale => match which {
                    Some(j) => status[j] = Bound::Free,
                    None => sum_active = false,
                },
                _ => return Some((x, iter)),
            }
            continue;
        }

        // ratio test toward the face minimizer
        let mut alpha = 1.0;
        let mut blocking: Option<(usize, Bound)> = None;
        let mut sum_blocks = false;
        for &j in &free {
            if p[j] < 0.0 {
                let ratio = -x[j] / p[j];
                if ratio < alpha {
                    alpha = ratio;
                    blocking = Some((j, Bound::Lower));
                    sum_blocks = false;
                }
            } else if p[j] > 0.0 {
                let ratio = (prob.hi[j] - x[j]) / p[j];
                if ratio < alpha {
                    alpha = ratio;
                    blocking = Some((j, Bound::Upper));
                    sum_blocks = false;
                }
            }
        }
        let dsum = p.sum();
        if !sum_active && dsum < 0.0 {
            let ratio = (prob.beta - x.sum()) / dsum;
            if ratio < alpha {
                alpha = ratio.max(0.0);
                blocking = None;
                sum_blocks = true;
            }
        }
        x += &p * alpha;
        if let Some((j, b)) = blocking {
            status[j] = b;
            x[j] = if b == Bound::Lower { 0.0 } else { prob.hi[j] };
        } else if sum_blocks {
            sum_active = true;
        }
    }
    None
}

/// Exhaustive search over every face of the domain. Exact but exponential;
/// intended for small dimensions and as an independent check.
pub fn solve_by_enumeration(
    h: &DMatrix<f64>,
    lin: &DVector<f64>,
    domain: &ThetaDomain,
) -> Result<DVector<f64>> {
    let prob = Scaled::new(h, lin, domain)?;
    let n = prob.n();
    if n > MAX_ENUMERATION_DIM {
        return Err(Error::Config(format!(
            "face enumeration limited to dimension {MAX_ENUMERATION_DIM}, got {n}"
        )));
    }
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut status = vec![Bound::Free; n];
    for code in 0..3usize.pow(n as u32) {
        let mut c = code;
        for s in status.iter_mut() {
            *s = match c % 3 {
                0 => Bound::Free,
                1 => Bound::Lower,
                _ => Bound::Upper,
            };
            c /= 3;
        }
        for sum_active in [false, true] {
            let Some(x) = prob.face_minimizer(&status, sum_active) else {
                continue;
            };
            if !prob.feasible(&x, 1e-12) {
                continue;
            }
            let obj = prob.objective(&x);
            if best.as_ref().map_or(true, |(b, _)| obj < *b) {
                best = Some((obj, x));
            }
        }
    }
    let (_, x) = best.ok_or_else(|| Error::Infeasible("no feasible face".into()))?;
    // clip round-off so the result satisfies the box exactly
    let mut theta = prob.unscale(&x);
    for (t, &hi) in theta.iter_mut().zip(&domain.theta_max) {
        *t = t.clamp(0.0, hi);
    }
    Ok(theta)
}

/// Normalized KKT violation of `theta` for the QP (primal feasibility,
/// stationarity, dual feasibility), measured in the scaled coordinates.
pub fn kkt_residual(h: &DMatrix<f64>, lin: &DVector<f64>, domain: &ThetaDomain, theta: &DVector<f64>) -> f64 {
    let Ok(prob) = Scaled::new(h, lin, domain) else {
        return f64::INFINITY;
    };
    let n = prob.n();
    let x = theta / prob.scale;
    let g = &prob.h * &x - &prob.lin;
    let tol = 1e-10;

    let mut primal: f64 = 0.0;
    for j in 0..n {
        primal = primal.max(-x[j]).max(x[j] - prob.hi[j]);
    }
    primal = primal.max(prob.beta - x.sum());

    let at_lower: Vec<bool> = (0..n).map(|j| x[j] <= tol).collect();
    let at_upper: Vec<bool> = (0..n).map(|j| x[j] >= prob.hi[j] - tol).collect();
    let interior: Vec<usize> = (0..n).filter(|&j| !at_lower[j] && !at_upper[j]).collect();
    let sum_active = (x.sum() - prob.beta).abs() <= tol;

    let mu = if !sum_active {
        0.0
    } else if !interior.is_empty() {
        (interior.iter().map(|&j| g[j]).sum::<f64>() / interior.len() as f64).max(0.0)
    } else {
        // any mu in [max(0, g_upper), min(g_lower)] certifies optimality
        let lo = (0..n).filter(|&j| at_upper[j]).map(|j| g[j]).fold(0.0, f64::max);
        let hi = (0..n).filter(|&j| at_lower[j]).map(|j| g[j]).fold(f64::INFINITY, f64::min);
        if hi.is_finite() { lo.min(hi).max(0.0) } else { lo }
    };

    let mut dual: f64 = 0.0;
    for j in 0..n {
        let r = g[j] - mu;
        let v = if at_lower[j] && at_upper[j] {
            0.0
        } else if at_lower[j] {
            (-r).max(0.0)
        } else if at_upper[j] {
            r.max(0.0)
        } else {
            r.abs()
        };
        dual = dual.max(v);
    }
    let scale = 1.0 + prob.lin.amax() + prob.h.amax();
    primal.max(0.0).max(dual / scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn domain(n: usize, hi: f64, beta: f64) -> ThetaDomain {
        ThetaDomain::new(vec![hi; n], beta).unwrap()
    }

    fn spd(n: usize, seed: &[f64]) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |i, j| seed[(i * n + j) % seed.len()]);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn interior_minimizer_is_returned_unchanged() {
        let dom = domain(3, 1.0, 0.1);
        let h = spd(3, &[0.3, -0.2, 0.5, 0.1, 0.7, -0.4, 0.2, 0.0, 0.9]);
        let target = DVector::from_vec(vec![0.3, 0.4, 0.5]);
        let lin = &h * &target;
        let sol = solve(&h, &lin, &dom, None).unwrap();
        assert!((sol.theta - target).amax() < 1e-12);
        assert!(sol.kkt_residual < 1e-12);
    }

    #[test]
    fn origin_projects_to_symmetric_point() {
        let dom = domain(7, 5e-7, 5e-9);
        let h = DMatrix::identity(7, 7) * 1e11;
        let sol = solve(&h, &DVector::zeros(7), &dom, None).unwrap();
        let expect = 5e-9 / 7.0;
        for v in sol.theta.iter() {
            assert!((v - expect).abs() < 1e-12 * expect, "{v}");
        }
    }

    #[test]
    fn infeasible_domain_is_rejected() {
        let dom = ThetaDomain {
            theta_max: vec![1.0, 1.0],
            beta: 3.0,
        };
        let h = DMatrix::identity(2, 2);
        assert!(matches!(
            solve(&h, &DVector::zeros(2), &dom, None),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn matches_grid_search_in_three_dimensions() {
        // grid oracle: step 1e-3 * theta_max on two axes, the third axis
        // minimized over its grid values by checking the neighbours of the
        // 1-D unconstrained minimizer
        let dom = domain(3, 1.0, 1.2);
        let h = DMatrix::from_row_slice(3, 3, &[2.0, 0.6, -0.3, 0.6, 1.5, 0.4, -0.3, 0.4, 1.0]);
        let center = DVector::from_vec(vec![-0.2, 1.4, 0.3]);
        let lin = &h * &center;
        let obj = |x: &DVector<f64>| 0.5 * x.dot(&(&h * x)) - lin.dot(x);

        let steps = 1000usize;
        let dx = 1.0 / steps as f64;
        let mut best = (f64::INFINITY, DVector::zeros(3));
        for i in 0..=steps {
            for j in 0..=steps {
                let (a, b) = (i as f64 * dx, j as f64 * dx);
                // d/dc of the objective: h22 c + h20 a + h21 b - lin2
                let c_star = (lin[2] - h[(2, 0)] * a - h[(2, 1)] * b) / h[(2, 2)];
                let k = (c_star / dx).floor() as i64;
                for kk in [k - 1, k, k + 1, k + 2] {
                    if kk < 0 || kk > steps as i64 {
                        continue;
                    }
                    let c = kk as f64 * dx;
                    if a + b + c < 1.2 - 1e-12 {
                        continue;
                    }
                    let x = DVector::from_vec(vec![a, b, c]);
                    let v = obj(&x);
                    if v < best.0 {
                        best = (v, x);
                    }
                }
                // the lowest feasible grid value of c also needs checking
                let c_min = ((1.2 - a - b) / dx - 1e-9).ceil().max(0.0) * dx;
                if c_min <= 1.0 {
                    let x = DVector::from_vec(vec![a, b, c_min]);
                    let v = obj(&x);
                    if v < best.0 {
                        best = (v, x);
                    }
                }
            }
        }
        let sol = solve(&h, &lin, &dom, None).unwrap();
        let qp_obj = obj(&sol.theta);
        assert!(qp_obj <= best.0 + 1e-12, "qp {qp_obj} grid {}", best.0);
        assert!((sol.theta.clone() - &best.1).amax() <= 3e-3, "{} vs {}", sol.theta, best.1);
        assert!(sol.kkt_residual <= 1e-9);
    }

    fn arb_problem() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, f64)> {
        (2usize..=4).prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec(-1.0f64..1.0, n * n),
                proptest::collection::vec(-2.0f64..3.0, n),
                0.01f64..0.9,
            )
        })
    }

    proptest! {
        #[test]
        fn active_set_agrees_with_enumeration((n, a, c, frac) in arb_problem()) {
            let am = DMatrix::from_vec(n, n, a);
            let h = &am * am.transpose() + DMatrix::identity(n, n) * 0.05;
            let center = DVector::from_vec(c);
            let lin = &h * &center;
            let dom = ThetaDomain::new(vec![1.0; n], frac * n as f64).unwrap();
            let sol = solve(&h, &lin, &dom, None).unwrap();
            prop_assert_eq!(sol.method, QpMethod::ActiveSet);
            let exact = solve_by_enumeration(&h, &lin, &dom).unwrap();
            let obj = |x: &DVector<f64>| 0.5 * x.dot(&(&h * x)) - lin.dot(x);
            prop_assert!((obj(&sol.theta) - obj(&exact)).abs() <= 1e-10 * (1.0 + obj(&exact).abs()));
            prop_assert!((&sol.theta - &exact).amax() <= 1e-6);
            prop_assert!(dom.contains(&sol.theta, 1e-12));
            prop_assert!(sol.kkt_residual <= 1e-9);
        }

        #[test]
        fn warm_start_does_not_change_answer((n, a, c, frac) in arb_problem(), w in proptest::collection::vec(0.0f64..1.0, 4)) {
            let am = DMatrix::from_vec(n, n, a);
            let h = &am * am.transpose() + DMatrix::identity(n, n) * 0.05;
            let lin = &h * DVector::from_vec(c);
            let dom = ThetaDomain::new(vec![1.0; n], frac * n as f64).unwrap();
            let cold = solve(&h, &lin, &dom, None).unwrap();
            let warm = DVector::from_fn(n, |j, _| w[j]);
            let hot = solve(&h, &lin, &dom, Some(&warm)).unwrap();
            prop_assert!((&cold.theta - &hot.theta).amax() <= 1e-8);
        }
    }
}
