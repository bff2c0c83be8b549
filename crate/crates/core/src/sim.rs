//! Monte Carlo harness.
//!
//! Each path simulates the policy under test next to a companion path driven
//! by the optimal policy `u* = L* z*` on the same noise draws. Pathwise
//! regret is accumulated twice: directly as `J^pi - J^pi*` from realized
//! costs, and through the value-function expansion
//!
//! ```text
//! R_T = z*_T'P*z*_T - z_T'P*z_T + sum (u_t - L*z_{t-1})^2 (R + B'P*B)
//!     + 2 sum ((A z_{t-1} + B u_t) - G* z*_{t-1})'P* W_t + sum (x*_{t-1} - x_{t-1}) eps_t
//! ```
//!
//! whose first two groups (boundary and quadratic terms) have the same
//! expectation as the whole.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{regressor, MarketState, ModelParams, SystemMatrices};
use crate::noise::PathNoise;
use crate::policy::{Policy, PolicyConfig, PolicyKind, UpdateEvent};
use crate::riccati::{relative_gain_error, solve_dare, stationary_covariance, DareOptions, RiccatiSolution};
use crate::estimation::error_bound_b;

/// A published estimate together with its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRecord {
    pub event: UpdateEvent,
    /// `||theta_t - theta*||`.
    pub theta_error: f64,
    /// Error bound `b_t` with the run-wide regressor-norm proxy; CTRACE with
    /// `kappa > 0` and `C_v > 0` only.
    pub bound: Option<f64>,
    /// Squared confidence radius at the policy's `delta`; infinite for `kappa = 0`.
    pub radius_sq: f64,
}

/// Everything recorded along one simulated path. Curves are indexed by
/// period `t = 1..=T` (element `t - 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    pub path: usize,
    pub policy: String,
    /// Pathwise regret from the expansion.
    pub regret: Vec<f64>,
    /// Pathwise regret as `J^pi - J^pi*` from realized costs.
    pub regret_direct: Vec<f64>,
    /// Boundary plus quadratic terms of the expansion.
    pub regret_quadratic: Vec<f64>,
    /// Cumulative risk-adjusted profit `-J^pi`.
    pub profit: Vec<f64>,
    /// Cumulative risk-adjusted profit of the companion optimal path.
    pub profit_optimal: Vec<f64>,
    pub lambda_min: Vec<f64>,
    pub actions: Vec<f64>,
    /// `(L_t - L*) Pi* (L_t - L*)' / (L* Pi* L*')` with the gain in force at `t`.
    pub gain_error: Vec<f64>,
    pub updates: Vec<UpdateRecord>,
    /// Largest regressor norm seen on the path.
    pub c_psi: f64,
    pub fallbacks: usize,
    pub noise_checksum: u64,
}

/// Model, benchmark solution and initial state shared by all paths.
#[derive(Debug, Clone)]
pub struct Simulator {
    params: ModelParams,
    sys: SystemMatrices,
    star: RiccatiSolution,
    pi_star: DMatrix<f64>,
    initial: MarketState,
    dare: DareOptions,
}

impl Simulator {
    /// `initial` defaults to zero position, impact and factors at price 50.
    pub fn new(params: ModelParams, initial: Option<MarketState>, dare: DareOptions) -> Result<Self> {
        let sys = params.assemble_system()?;
        let star = solve_dare(&sys, &dare)?;
        let pi_star = stationary_covariance(&star.g_cl, &sys.omega_tilde)?;
        let initial = initial.unwrap_or_else(|| MarketState::zero(params.m(), params.k(), 50.0));
        if initial.d.len() != params.m() || initial.f.len() != params.k() {
            return Err(Error::Dimension {
                what: "initial state",
                expected: params.state_dim(),
                got: 1 + initial.d.len() + initial.f.len(),
            });
        }
        Ok(Self {
            params,
            sys,
            star,
            pi_star,
            initial,
            dare,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn system(&self) -> &SystemMatrices {
        &self.sys
    }

    pub fn optimal(&self) -> &RiccatiSolution {
        &self.star
    }

    pub fn pi_star(&self) -> &DMatrix<f64> {
        &self.pi_star
    }

    pub fn dare_options(&self) -> &DareOptions {
        &self.dare
    }

    /// Simulates path `path` of `policy` for `horizon` periods.
    pub fn run_path(&self, policy: &PolicyConfig, horizon: usize, seed_base: u64, path: usize) -> Result<PathResult> {
        self.run_path_inner(policy, horizon, seed_base, path, None)
            .map_err(|e| Error::Path {
                path,
                policy: policy.label.clone(),
                source: Box::new(e),
            })
    }

    /// Like [`Simulator::run_path`], but adds `shock` to the policy's order at
    /// the first period. Used to check the regret accounting by hand.
    pub fn run_path_with_shock(
        &self,
        policy: &PolicyConfig,
        horizon: usize,
        seed_base: u64,
        path: usize,
        shock: f64,
    ) -> Result<PathResult> {
        self.run_path_inner(policy, horizon, seed_base, path, Some(shock))
    }

    fn run_path_inner(
        &self,
        cfg: &PolicyConfig,
        horizon: usize,
        seed_base: u64,
        path: usize,
        shock: Option<f64>,
    ) -> Result<PathResult> {
        let params = &self.params;
        let (m, k) = (params.m(), params.k());
        let rs = params.rho * params.noise.sigma_eps;
        let p = &self.star.p;
        let l_star = &self.star.l;
        let r_eff = self.star.r_eff;
        let a = &self.sys.a;
        let b = &self.sys.b;
        let p_w = p.columns(1 + m, k).into_owned();
        let theta_star = params.theta_star();

        let mut noise = PathNoise::new(params, seed_base, path);
        let mut policy = Policy::new(cfg.clone(), params, self.dare, &self.star)?;

        let mut state = self.initial.clone();
        let mut state_opt = self.initial.clone();
        let mut out = PathResult {
            path,
            policy: cfg.label.clone(),
            regret: Vec::with_capacity(horizon),
            regret_direct: Vec::with_capacity(horizon),
            regret_quadratic: Vec::with_capacity(horizon),
            profit: Vec::with_capacity(horizon),
            profit_optimal: Vec::with_capacity(horizon),
            lambda_min: Vec::with_capacity(horizon),
            actions: Vec::with_capacity(horizon),
            gain_error: Vec::with_capacity(horizon),
            updates: Vec::new(),
            c_psi: 0.0,
            fallbacks: 0,
            noise_checksum: 0,
        };

        let (mut quad, mut cross, mut eps_sum, mut direct) = (0.0, 0.0, 0.0, 0.0);
        let (mut cost, mut cost_opt) = (0.0, 0.0);
        let mut gain_err = relative_gain_error(policy.gain(), l_star, &self.pi_star);

        for t in 1..=horizon {
            let z = state.z();
            let z_opt = state_opt.z();
            let mut u = policy.act(&z);
            if t == 1 {
                if let Some(s) = shock {
                    u += s;
                }
            }
            let u_opt = l_star.dot(&z_opt);
            let (eps, omega) = noise.draw();
            let (next, dp) = params.step_dynamics(&state, u, eps, &omega);
            let (next_opt, dp_opt) = params.step_dynamics(&state_opt, u_opt, eps, &omega);

            let c = rs * (state.x + u).powi(2) - dp * state.x;
            let c_opt = rs * (state_opt.x + u_opt).powi(2) - dp_opt * state_opt.x;
            cost += c;
            cost_opt += c_opt;
            direct += c - c_opt;

            let dev = u - l_star.dot(&z);
            quad += dev * dev * r_eff;
            let drift_gap = a * (&z - &z_opt) + b * (u - u_opt);
            cross += 2.0 * drift_gap.dot(&(&p_w * &omega));
            eps_sum += (state_opt.x - state.x) * eps;

            let psi = regressor(&state, u, &next);
            let y = dp - params.factors.g.dot(&state.f);
            state = next;
            state_opt = next_opt;
            if !state.is_finite() {
                return Err(Error::Degenerate(format!("state diverged at period {t}")));
            }

            let zt = state.z();
            let zt_opt = state_opt.z();
            let boundary = zt_opt.dot(&(p * &zt_opt)) - zt.dot(&(p * &zt));
            out.regret.push(boundary + quad + cross + eps_sum);
            out.regret_quadratic.push(boundary + quad);
            out.regret_direct.push(direct);
            out.profit.push(-cost);
            out.profit_optimal.push(-cost_opt);
            out.actions.push(u);

            out.c_psi = out.c_psi.max(psi.norm());
            if let Some(event) = policy.observe(&psi, y, t)? {
                gain_err = relative_gain_error(policy.gain(), l_star, &self.pi_star);
                let radius_sq = policy
                    .estimator()
                    .confidence_radius_sq(&params.noise, &params.domain, cfg.delta);
                out.updates.push(UpdateRecord {
                    theta_error: (&event.theta - &theta_star).norm(),
                    event,
                    bound: None,
                    radius_sq,
                });
            }
            out.lambda_min.push(policy.estimator().lambda_min());
            out.gain_error.push(gain_err);
        }

        // the bound uses one regressor-norm proxy for the whole run so that
        // the sequence is comparable across update times
        if cfg.kind == PolicyKind::Ctrace && cfg.kappa > 0.0 && cfg.c_v > 0.0 && out.c_psi > 0.0 {
            for rec in &mut out.updates {
                rec.bound = Some(error_bound_b(
                    rec.event.t,
                    cfg.kappa,
                    &params.noise,
                    &params.domain,
                    cfg.delta,
                    cfg.c_v,
                    out.c_psi,
                ));
            }
        }
        out.fallbacks = policy.fallbacks();
        out.noise_checksum = noise.checksum();
        Ok(out)
    }
}

/// Pointwise mean and standard error (`n - 1` denominator) of a set of curves.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegretCurve {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

impl RegretCurve {
    pub fn from_curves(curves: &[&[f64]]) -> Result<Self> {
        let n = curves.len();
        if n < 2 {
            return Err(Error::Degenerate(format!("need at least 2 paths, got {n}")));
        }
        let len = curves[0].len();
        if curves.iter().any(|c| c.len() != len) {
            return Err(Error::Degenerate("curves differ in length".into()));
        }
        let mut mean = vec![0.0; len];
        for c in curves {
            for (m, v) in mean.iter_mut().zip(c.iter()) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; len];
        for c in curves {
            for ((s, v), m) in var.iter_mut().zip(c.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let se = var
            .into_iter()
            .map(|s| (s / (n as f64 - 1.0)).sqrt() / (n as f64).sqrt())
            .collect();
        Ok(Self { mean, se })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Value at period `t` (1-based).
    pub fn at(&self, t: usize) -> (f64, f64) {
        (self.mean[t - 1], self.se[t - 1])
    }
}

/// `sqrt(se_a^2 + se_b^2)`.
pub fn pooled_se(se_a: f64, se_b: f64) -> f64 {
    (se_a * se_a + se_b * se_b).sqrt()
}

/// Both expected-regret estimators over a set of paths.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedRegret {
    /// Mean of the full pathwise regret.
    pub pathwise: RegretCurve,
    /// Mean of the boundary plus quadratic terms.
    pub quadratic: RegretCurve,
}

impl ExpectedRegret {
    /// `|pathwise - quadratic|` at period `t` in units of the pooled SE.
    /// Zero when both estimates coincide exactly.
    pub fn discrepancy(&self, t: usize) -> f64 {
        let (a, sa) = self.pathwise.at(t);
        let (b, sb) = self.quadratic.at(t);
        let gap = (a - b).abs();
        if gap == 0.0 {
            return 0.0;
        }
        gap / pooled_se(sa, sb)
    }
}

pub fn estimate_expected_regret(paths: &[&PathResult]) -> Result<ExpectedRegret> {
    let pathwise: Vec<&[f64]> = paths.iter().map(|p| p.regret.as_slice()).collect();
    let quadratic: Vec<&[f64]> = paths.iter().map(|p| p.regret_quadratic.as_slice()).collect();
    Ok(ExpectedRegret {
        pathwise: RegretCurve::from_curves(&pathwise)?,
        quadratic: RegretCurve::from_curves(&quadratic)?,
    })
}

/// Divides an expected-regret curve by `|tr(P* Omega~)|`.
pub fn relative_regret(curve: &RegretCurve, avg_cost: f64) -> Result<RegretCurve> {
    if avg_cost == 0.0 || !avg_cost.is_finite() {
        return Err(Error::Degenerate(format!(
            "relative regret needs a nonzero optimal average cost, got {avg_cost}"
        )));
    }
    let d = avg_cost.abs();
    Ok(RegretCurve {
        mean: curve.mean.iter().map(|v| v / d).collect(),
        se: curve.se.iter().map(|v| v / d).collect(),
    })
}

/// Per-policy aggregates of a paired experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySummary {
    pub config: PolicyConfig,
    pub expected: ExpectedRegret,
    pub relative: RegretCurve,
    pub gain_error: RegretCurve,
    /// `-J_T` per path, in path order.
    pub final_profit: Vec<f64>,
    pub final_regret: Vec<f64>,
    pub updates_per_path: Vec<usize>,
    pub fallbacks: usize,
    pub noise_checksums: Vec<u64>,
    /// Full records of the first few paths.
    pub kept_paths: Vec<PathResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub horizon: usize,
    pub n_paths: usize,
    pub seed_base: u64,
    pub avg_cost: f64,
    pub policies: Vec<PolicySummary>,
}

impl ExperimentResult {
    pub fn policy(&self, label: &str) -> Option<&PolicySummary> {
        self.policies.iter().find(|p| p.config.label == label)
    }

    /// Paired per-path differences `profit(a) - profit(b)` at the horizon.
    pub fn profit_differences(&self, a: &str, b: &str) -> Option<Vec<f64>> {
        let (pa, pb) = (self.policy(a)?, self.policy(b)?);
        Some(pa.final_profit.iter().zip(&pb.final_profit).map(|(x, y)| x - y).collect())
    }
}

/// A failed experiment and the policies that completed before the failure.
#[derive(Debug, Clone)]
pub struct ExperimentFailure {
    pub error: Error,
    pub completed: Vec<PolicySummary>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExperimentSpec {
    pub horizon: usize,
    pub n_paths: usize,
    pub seed_base: u64,
    /// Worker threads; results do not depend on it.
    pub parallelism: usize,
    /// Number of leading paths whose full records are kept.
    pub keep_paths: usize,
}

struct Digest {
    regret: Vec<f64>,
    quadratic: Vec<f64>,
    gain_error: Vec<f64>,
    final_profit: f64,
    updates: usize,
    fallbacks: usize,
    checksum: u64,
    full: Option<PathResult>,
}

impl Simulator {
    /// Runs every policy on paths `0..n_paths`; path `j` of every policy sees
    /// the noise stream keyed by `(seed_base, j)`.
    pub fn run_experiment(
        &self,
        policies: &[PolicyConfig],
        spec: &ExperimentSpec,
    ) -> std::result::Result<ExperimentResult, Box<ExperimentFailure>> {
        let fail = |error: Error, completed: Vec<PolicySummary>| Box::new(ExperimentFailure { error, completed });
        if spec.n_paths < 2 || spec.horizon < 1 {
            return Err(fail(
                Error::Config("an experiment needs at least 2 paths and 1 period".into()),
                Vec::new(),
            ));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.parallelism.max(1))
            .build()
            .map_err(|e| fail(Error::Config(format!("thread pool: {e}")), Vec::new()))?;

        let mut done = Vec::with_capacity(policies.len());
        for cfg in policies {
            let digests: Result<Vec<Digest>> = pool.install(|| {
                (0..spec.n_paths)
                    .into_par_iter()
                    .map(|j| {
                        let r = self.run_path(cfg, spec.horizon, spec.seed_base, j)?;
                        Ok(Digest {
                            regret: r.regret.clone(),
                            quadratic: r.regret_quadratic.clone(),
                            gain_error: r.gain_error.clone(),
                            final_profit: *r.profit.last().unwrap_or(&0.0),
                            updates: r.updates.len(),
                            fallbacks: r.fallbacks,
                            checksum: r.noise_checksum,
                            full: (j < spec.keep_paths).then_some(r),
                        })
                    })
                    .collect()
            });
            let digests = match digests {
                Ok(d) => d,
                Err(e) => return Err(fail(e, done)),
            };
            match self.summarize(cfg, digests) {
                Ok(s) => done.push(s),
                Err(e) => return Err(fail(e, done)),
            }
        }
        Ok(ExperimentResult {
            horizon: spec.horizon,
            n_paths: spec.n_paths,
            seed_base: spec.seed_base,
            avg_cost: self.star.avg_cost,
            policies: done,
        })
    }

    fn summarize(&self, cfg: &PolicyConfig, digests: Vec<Digest>) -> Result<PolicySummary> {
        let curves = |f: fn(&Digest) -> &[f64]| digests.iter().map(f).collect::<Vec<_>>();
        let pathwise = RegretCurve::from_curves(&curves(|d| &d.regret))?;
        let quadratic = RegretCurve::from_curves(&curves(|d| &d.quadratic))?;
        let gain_error = RegretCurve::from_curves(&curves(|d| &d.gain_error))?;
        let relative = relative_regret(&pathwise, self.star.avg_cost)?;
        let final_regret = digests.iter().map(|d| *d.regret.last().unwrap_or(&0.0)).collect();
        let final_profit = digests.iter().map(|d| d.final_profit).collect();
        let updates_per_path = digests.iter().map(|d| d.updates).collect();
        let fallbacks = digests.iter().map(|d| d.fallbacks).sum();
        let noise_checksums = digests.iter().map(|d| d.checksum).collect();
        let kept_paths = digests.into_iter().filter_map(|d| d.full).collect();
        Ok(PolicySummary {
            config: cfg.clone(),
            expected: ExpectedRegret { pathwise, quadratic },
            relative,
            gain_error,
            final_profit,
            final_regret,
            updates_per_path,
            fallbacks,
            noise_checksums,
            kept_paths,
        })
    }
}
