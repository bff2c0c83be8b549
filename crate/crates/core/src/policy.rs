//! Trading policies: oracle, certainty equivalent (CE), confidence-triggered
//! regularized CE (CTRACE) and the determinant-doubling benchmark (AS).
//!
//! Every policy is linear in the state, `u_t = L(theta_{t-1}) z_{t-1}`; they
//! differ only in when the estimate behind the gain is refreshed.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::estimation::{ConfidenceSet, EstimatorState};
use crate::model::{ModelParams, NoiseModel, ThetaDomain};
use crate::riccati::{solve_dare, DareOptions, RiccatiSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Oracle,
    Ce,
    Ctrace,
    As,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Oracle => "oracle",
            PolicyKind::Ce => "ce",
            PolicyKind::Ctrace => "ctrace",
            PolicyKind::As => "as",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oracle" => Some(PolicyKind::Oracle),
            "ce" => Some(PolicyKind::Ce),
            "ctrace" => Some(PolicyKind::Ctrace),
            "as" => Some(PolicyKind::As),
            _ => None,
        }
    }
}

/// How AS picks its point on the ray `alpha * theta_con`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AsSearch {
    /// Smallest feasible `alpha`, by bisection.
    #[default]
    SmallestAlpha,
    /// Minimize `tr(P(alpha theta_con) Omega~)` over this many grid points.
    TraceGrid(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub label: String,
    pub kappa: f64,
    pub c_v: f64,
    pub tau: usize,
    /// Confidence level for the AS ellipsoid and for the error-bound diagnostic.
    pub delta: f64,
    /// Initial estimate; `None` uses [`ThetaDomain::default_theta0`].
    pub theta0: Option<DVector<f64>>,
    pub as_search: AsSearch,
}

impl PolicyConfig {
    fn base(kind: PolicyKind, kappa: f64) -> Self {
        Self {
            kind,
            label: kind.name().to_string(),
            kappa,
            c_v: 0.0,
            tau: 1,
            delta: 0.05,
            theta0: None,
            as_search: AsSearch::SmallestAlpha,
        }
    }

    /// Knows `theta*`. Its estimator (regularized by `kappa`, possibly 0) is
    /// kept for diagnostics only.
    pub fn oracle() -> Self {
        Self::base(PolicyKind::Oracle, 0.0)
    }

    pub fn ce(kappa: f64) -> Self {
        Self::base(PolicyKind::Ce, kappa)
    }

    pub fn ctrace(kappa: f64, c_v: f64, tau: usize) -> Self {
        Self {
            c_v,
            tau,
            ..Self::base(PolicyKind::Ctrace, kappa)
        }
    }

    pub fn as_policy(kappa: f64, delta: f64) -> Self {
        Self {
            delta,
            ..Self::base(PolicyKind::As, kappa)
        }
    }

    /// Default desk-scale settings.
    pub fn default_ctrace() -> Self {
        Self::ctrace(1e11, 600.0, 1)
    }

    pub fn default_as() -> Self {
        Self::as_policy(1e8, 0.99)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Checks the invariants. `allow_unregularized` admits `kappa = 0` for
    /// CTRACE, which the regularization ablation needs; AS always requires
    /// `kappa > 0` because its ellipsoid is undefined otherwise.
    pub fn validate(&self, domain: &ThetaDomain, allow_unregularized: bool) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("policy '{}': {msg}", self.label)));
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return bad(format!("kappa must be finite and >= 0, got {}", self.kappa));
        }
        let needs_positive = match self.kind {
            PolicyKind::As => true,
            PolicyKind::Ctrace => !allow_unregularized,
            _ => false,
        };
        if needs_positive && self.kappa == 0.0 {
            return bad("kappa must be > 0: the confidence ellipsoid requires regularization".into());
        }
        if !(self.c_v >= 0.0 && self.c_v.is_finite()) {
            return bad(format!("c_v must be finite and >= 0, got {}", self.c_v));
        }
        if self.tau < 1 {
            return bad("tau must be >= 1".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if let AsSearch::TraceGrid(n) = self.as_search {
            if n < 2 {
                return bad("trace grid needs at least 2 points".into());
            }
        }
        if let Some(t0) = &self.theta0 {
            if t0.len() != domain.dim() {
                return Err(Error::Dimension {
                    what: "theta0",
                    expected: domain.dim(),
                    got: t0.len(),
                });
            }
            if !domain.contains(t0, 1e-15) {
                return bad("theta0 must lie in the parameter domain".into());
            }
        }
        Ok(())
    }
}

/// Record of a published estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateEvent {
    pub t: usize,
    pub theta: DVector<f64>,
    pub lambda_min: f64,
    /// Ray coefficient chosen by AS.
    pub alpha: Option<f64>,
    /// AS found no feasible point on the ray and published `theta_con`.
    pub fallback: bool,
}

/// Outcome of the AS selection rule.
#[derive(Debug, Clone, PartialEq)]
pub struct AsChoice {
    pub theta: DVector<f64>,
    pub alpha: f64,
    pub fallback: bool,
}

/// Gain `L(theta)` for a candidate parameter.
pub fn gain_for(params: &ModelParams, theta: &DVector<f64>, opts: &DareOptions) -> Result<RiccatiSolution> {
    solve_dare(&params.system_for_unchecked(theta), opts)
}

/// AS selection on the current confidence set; see [`select_on_ray`].
pub fn update_rule_as(
    est: &EstimatorState,
    theta_con: &DVector<f64>,
    domain: &ThetaDomain,
    noise: &NoiseModel,
    delta: f64,
) -> AsChoice {
    select_on_ray(&est.confidence_set(noise, domain, delta), theta_con, domain.beta)
}

/// With `c = theta_con`, the smallest `alpha` in `[beta / 1'c, 1]` such that
/// `alpha c` lies in `set`. `alpha c` is in the domain for every such
/// `alpha`. When `c` itself is outside the set the ray misses it, and `c` is
/// returned as a fallback.
pub fn select_on_ray(set: &ConfidenceSet, theta_con: &DVector<f64>, beta: f64) -> AsChoice {
    let sum = theta_con.sum();
    let lo = if sum > 0.0 { (beta / sum).min(1.0) } else { 1.0 };
    let inside = |a: f64| set.contains(&(theta_con * a));
    if !inside(1.0) {
        return AsChoice {
            theta: theta_con.clone(),
            alpha: 1.0,
            fallback: true,
        };
    }
    if inside(lo) {
        return AsChoice {
            theta: theta_con * lo,
            alpha: lo,
            fallback: false,
        };
    }
    // the feasible alphas form an interval containing 1 but not lo
    let (mut a, mut b) = (lo, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if inside(mid) {
            b = mid;
        } else {
            a = mid;
        }
    }
    AsChoice {
        theta: theta_con * b,
        alpha: b,
        fallback: false,
    }
}

/// Grid variant of the AS rule: minimizes `tr(P(alpha c) Omega~)` over the
/// feasible grid points of the ray.
pub fn update_rule_as_grid(
    params: &ModelParams,
    est: &EstimatorState,
    theta_con: &DVector<f64>,
    delta: f64,
    points: usize,
    opts: &DareOptions,
) -> Result<AsChoice> {
    let domain = &params.domain;
    let set = est.confidence_set(&params.noise, domain, delta);
    let sum = theta_con.sum();
    let lo = if sum > 0.0 { (domain.beta / sum).min(1.0) } else { 1.0 };
    let mut best: Option<(f64, f64)> = None;
    for i in 0..points {
        let alpha = lo + (1.0 - lo) * i as f64 / (points - 1) as f64;
        let theta = theta_con * alpha;
        if !set.contains(&theta) {
            continue;
        }
        let cost = gain_for(params, &theta, opts)?.avg_cost;
        if best.map_or(true, |(_, c)| cost < c) {
            best = Some((alpha, cost));
        }
    }
    Ok(match best {
        Some((alpha, _)) => AsChoice {
            theta: theta_con * alpha,
            alpha,
            fallback: false,
        },
        None => AsChoice {
            theta: theta_con.clone(),
            alpha: 1.0,
            fallback: true,
        },
    })
}

/// A policy bound to a model: its estimator, current estimate and gain.
#[derive(Debug, Clone)]
pub struct Policy {
    config: PolicyConfig,
    params: ModelParams,
    dare: DareOptions,
    estimator: EstimatorState,
    gain: DVector<f64>,
    last_update: usize,
    as_log_det: f64,
    fallbacks: usize,
}

impl Policy {
    /// `oracle` is the Riccati solution at `theta*`, reused for the oracle gain.
    pub fn new(
        config: PolicyConfig,
        params: &ModelParams,
        dare: DareOptions,
        oracle: &RiccatiSolution,
    ) -> Result<Self> {
        let domain = &params.domain;
        let theta0 = match config.kind {
            PolicyKind::Oracle => params.theta_star(),
            _ => config.theta0.clone().unwrap_or_else(|| domain.default_theta0()),
        };
        let estimator = EstimatorState::new(domain.dim(), config.kappa, theta0.clone())?;
        let gain = match config.kind {
            PolicyKind::Oracle => oracle.l.clone(),
            _ => gain_for(params, &theta0, &dare)
                .map_err(|e| policy_error(&config, 0, &theta0, e))?
                .l,
        };
        let as_log_det = if config.kappa > 0.0 {
            domain.dim() as f64 * config.kappa.ln()
        } else {
            f64::NEG_INFINITY
        };
        Ok(Self {
            config,
            params: params.clone(),
            dare,
            estimator,
            gain,
            last_update: 0,
            as_log_det,
            fallbacks: 0,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn estimator(&self) -> &EstimatorState {
        &self.estimator
    }

    pub fn gain(&self) -> &DVector<f64> {
        &self.gain
    }

    pub fn theta(&self) -> &DVector<f64> {
        self.estimator.theta_current()
    }

    /// Number of AS fallback events so far.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }

    /// `u = L z`.
    pub fn act(&self, z: &DVector<f64>) -> f64 {
        self.gain.dot(z)
    }

    /// Whether the CTRACE trigger is open at period `t`. The eigenvalue
    /// comparison allows for rounding at the scale of `V`.
    pub fn ctrace_gate(&self, t: usize) -> bool {
        let est = &self.estimator;
        let slack = 64.0 * f64::EPSILON * est.gram().norm();
        let excited = est.lambda_min() >= self.config.kappa + self.config.c_v * t as f64 - slack;
        excited && t >= self.last_update + self.config.tau
    }

    /// Ingests period `t`'s regressor and target and applies the update rule.
    pub fn observe(&mut self, psi: &DVector<f64>, y: f64, t: usize) -> Result<Option<UpdateEvent>> {
        self.estimator.ingest(psi, y);
        let domain = self.params.domain.clone();
        let (theta, alpha, fallback) = match self.config.kind {
            PolicyKind::Oracle => return Ok(None),
            PolicyKind::Ce => (self.solve_estimate(t, &domain)?, None, false),
            PolicyKind::Ctrace => {
                if !self.ctrace_gate(t) {
                    return Ok(None);
                }
                (self.solve_estimate(t, &domain)?, None, false)
            }
            PolicyKind::As => {
                let log_det = self.estimator.log_det();
                if log_det < std::f64::consts::LN_2 + self.as_log_det {
                    return Ok(None);
                }
                self.as_log_det = log_det;
                let con = self.solve_estimate(t, &domain)?;
                let choice = match self.config.as_search {
                    AsSearch::SmallestAlpha => update_rule_as(
                        &self.estimator,
                        &con,
                        &domain,
                        &self.params.noise,
                        self.config.delta,
                    ),
                    AsSearch::TraceGrid(n) => update_rule_as_grid(
                        &self.params,
                        &self.estimator,
                        &con,
                        self.config.delta,
                        n,
                        &self.dare,
                    )
                    .map_err(|e| policy_error(&self.config, t, &con, e))?,
                };
                if choice.fallback {
                    self.fallbacks += 1;
                }
                (choice.theta, Some(choice.alpha), choice.fallback)
            }
        };
        let sol = gain_for(&self.params, &theta, &self.dare)
            .map_err(|e| policy_error(&self.config, t, &theta, e))?;
        self.gain = sol.l;
        self.last_update = t;
        self.estimator.record_update(t, theta.clone());
        Ok(Some(UpdateEvent {
            t,
            theta,
            lambda_min: self.estimator.lambda_min(),
            alpha,
            fallback,
        }))
    }

    fn solve_estimate(&self, t: usize, domain: &ThetaDomain) -> Result<DVector<f64>> {
        self.estimator
            .solve_constrained(domain)
            .map_err(|e| policy_error(&self.config, t, self.estimator.theta_current(), e))
    }
}

fn policy_error(config: &PolicyConfig, period: usize, theta: &DVector<f64>, source: Error) -> Error {
    Error::Policy {
        policy: config.label.clone(),
        period,
        theta: theta.iter().copied().collect(),
        source: Box::new(source),
    }
}

/// True iff two action traces agree to `1e-9` relative at every period.
pub fn reduce_to_ce_check(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(&x, &y)| {
            let scale = x.abs().max(y.abs());
            (x - y).abs() <= 1e-9 * scale
        })
}
