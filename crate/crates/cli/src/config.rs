//! Experiment configuration: TOML file with every model and policy value
//! defaulting to the desk-scale setting (six transient impact terms, two
//! factors, five-minute periods).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ctrace_core::model::{FactorModel, ImpactParams, MarketState, ModelParams, NoiseModel, ThetaDomain};
use ctrace_core::policy::{AsSearch, PolicyConfig, PolicyKind};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub lambda: f64,
    pub gamma: Vec<f64>,
    pub decay: Vec<f64>,
    /// Row-major factor transition matrix.
    pub phi: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    pub omega: Vec<Vec<f64>>,
    pub sigma_eps: f64,
    /// Sub-Gaussian scale of the price noise; defaults to `sqrt(sigma_eps)`.
    pub c_eps: Option<f64>,
    /// Clamp for the price noise.
    pub eps_bound: Option<f64>,
    /// Radial clip for the factor innovations.
    pub c_omega: Option<f64>,
    pub rho: f64,
    pub theta_max: Vec<f64>,
    pub beta: f64,
    pub initial_price: f64,
    pub x0: f64,
    /// Defaults to zeros.
    pub d0: Option<Vec<f64>>,
    /// Defaults to zeros.
    pub f0: Option<Vec<f64>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            lambda: 2e-8,
            gamma: vec![0.0, 6e-8, 0.0, 3e-8, 7e-8, 5e-8],
            decay: vec![0.50, 0.63, 0.71, 0.79, 0.89, 0.93],
            phi: vec![vec![0.707, 0.0], vec![0.0, 0.917]],
            g: vec![0.006, 0.002],
            omega: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            sigma_eps: 0.0013,
            c_eps: None,
            eps_bound: None,
            c_omega: None,
            rho: 1e-6,
            theta_max: vec![5e-7; 7],
            beta: 5e-9,
            initial_price: 50.0,
            x0: 0.0,
            d0: None,
            f0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub horizon: usize,
    pub n_paths: usize,
    pub seed_base: u64,
    /// Worker threads. Does not affect any output, so it is excluded from the
    /// config hash.
    pub parallelism: usize,
    /// Paths per policy whose estimator trajectory goes to `estimator.csv`.
    pub estimator_paths: usize,
    /// Write every k-th period to the curve CSVs (the last period is always kept).
    pub stride: usize,
    /// DARE relative residual tolerance.
    pub dare_tol: f64,
    /// Horizon of the finite-horizon error curve in `fig1`.
    pub fig1_horizon: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            horizon: 3000,
            n_paths: 600,
            seed_base: 1,
            parallelism: 1,
            estimator_paths: 1,
            stride: 1,
            dare_tol: 1e-10,
            fig1_horizon: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub kind: String,
    pub label: Option<String>,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default)]
    pub c_v: f64,
    #[serde(default = "one")]
    pub tau: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub theta0: Option<Vec<f64>>,
    /// AS only: minimize the average cost over this many points of the ray
    /// instead of taking the smallest feasible multiple.
    pub as_grid: Option<usize>,
}

fn one() -> usize {
    1
}

fn default_delta() -> f64 {
    0.05
}

impl PolicySection {
    fn new(kind: &str, kappa: f64, c_v: f64, delta: f64) -> Self {
        Self {
            kind: kind.into(),
            label: None,
            kappa,
            c_v,
            tau: 1,
            delta,
            theta0: None,
            as_grid: None,
        }
    }

    pub fn to_config(&self) -> Result<PolicyConfig, CliError> {
        let kind = PolicyKind::parse(&self.kind).ok_or_else(|| {
            CliError::Config(format!(
                "unknown policy kind '{}' (expected oracle, ce, ctrace or as)",
                self.kind
            ))
        })?;
        Ok(PolicyConfig {
            kind,
            label: self.label.clone().unwrap_or_else(|| kind.name().to_string()),
            kappa: self.kappa,
            c_v: self.c_v,
            tau: self.tau,
            delta: self.delta,
            theta0: self.theta0.as_ref().map(|v| DVector::from_vec(v.clone())),
            as_search: match self.as_grid {
                Some(n) => AsSearch::TraceGrid(n),
                None => AsSearch::SmallestAlpha,
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMode {
    /// Every `(kappa, c_v)` pair.
    Product,
    /// The kappa axis at `base_c_v` followed by the C_v axis at `base_kappa`.
    Cross,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub kappa: Vec<f64>,
    pub c_v: Vec<f64>,
    pub mode: SweepMode,
    pub base_kappa: f64,
    pub base_c_v: f64,
    pub tau: usize,
    pub delta: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            kappa: vec![0.0, 2e10, 1e11],
            c_v: vec![0.0, 20.0, 600.0],
            mode: SweepMode::Cross,
            base_kappa: 1e11,
            base_c_v: 0.0,
            tau: 1,
            delta: 0.05,
        }
    }
}

impl SweepSection {
    /// Grid cells in run order, without duplicates.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        let mut cells: Vec<(f64, f64)> = match self.mode {
            SweepMode::Product => self
                .kappa
                .iter()
                .flat_map(|&k| self.c_v.iter().map(move |&c| (k, c)))
                .collect(),
            SweepMode::Cross => self
                .kappa
                .iter()
                .map(|&k| (k, self.base_c_v))
                .chain(self.c_v.iter().map(|&c| (self.base_kappa, c)))
                .collect(),
        };
        let mut seen = Vec::new();
        cells.retain(|cell| {
            let fresh = !seen.contains(cell);
            if fresh {
                seen.push(*cell);
            }
            fresh
        });
        cells
    }

    pub fn cell_policy(&self, kappa: f64, c_v: f64) -> PolicyConfig {
        let mut p = PolicyConfig::ctrace(kappa, c_v, self.tau).with_label(format!("ctrace_k{kappa:e}_cv{c_v}"));
        p.delta = self.delta;
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub experiment: ExperimentSection,
    pub policies: Vec<PolicySection>,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            experiment: ExperimentSection::default(),
            policies: vec![
                PolicySection::new("ce", 0.0, 0.0, 0.05),
                PolicySection::new("ctrace", 1e11, 600.0, 0.05),
                PolicySection::new("as", 1e8, 0.0, 0.99),
            ],
            sweep: SweepSection::default(),
        }
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(CliError::Config(format!("{what} must be a square matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_params(&self) -> Result<ModelParams, CliError> {
        let m = &self.model;
        let phi = matrix(&m.phi, "phi")?;
        let omega = matrix(&m.omega, "omega")?;
        let params = ModelParams {
            impact: ImpactParams::new(m.lambda, m.gamma.clone()),
            decay: m.decay.clone(),
            factors: FactorModel {
                phi,
                g: DVector::from_vec(m.g.clone()),
                omega_cov: omega,
                c_omega: m.c_omega,
            },
            noise: NoiseModel {
                sigma_eps: m.sigma_eps,
                c_eps: m.c_eps.unwrap_or_else(|| m.sigma_eps.max(0.0).sqrt()),
                eps_bound: m.eps_bound,
            },
            rho: m.rho,
            domain: ThetaDomain::new(m.theta_max.clone(), m.beta)?,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn initial_state(&self) -> Result<MarketState, CliError> {
        let m = &self.model;
        let d = m.d0.clone().unwrap_or_else(|| vec![0.0; m.decay.len()]);
        let f = m.f0.clone().unwrap_or_else(|| vec![0.0; m.g.len()]);
        if d.len() != m.decay.len() || f.len() != m.g.len() {
            return Err(CliError::Config(
                "initial impact and factor states must match the number of decay rates and factors".into(),
            ));
        }
        Ok(MarketState {
            x: m.x0,
            d: DVector::from_vec(d),
            f: DVector::from_vec(f),
            price: m.initial_price,
        })
    }

    pub fn policy_configs(&self) -> Result<Vec<PolicyConfig>, CliError> {
        self.policies.iter().map(|p| p.to_config()).collect()
    }

    /// Checks every model and policy invariant.
    pub fn validate(&self) -> Result<(), CliError> {
        let params = self.model_params()?;
        self.initial_state()?;
        let e = &self.experiment;
        if e.horizon < 1 {
            return Err(CliError::Config("horizon must be at least 1".into()));
        }
        if e.n_paths < 2 {
            return Err(CliError::Config("n_paths must be at least 2".into()));
        }
        if e.parallelism < 1 || e.stride < 1 {
            return Err(CliError::Config("parallelism and stride must be at least 1".into()));
        }
        if !(e.dare_tol > 0.0) {
            return Err(CliError::Config("dare_tol must be positive".into()));
        }
        let policies = self.policy_configs()?;
        if policies.is_empty() {
            return Err(CliError::Config("at least one policy is required".into()));
        }
        for (i, p) in policies.iter().enumerate() {
            p.validate(&params.domain, false)?;
            if policies[..i].iter().any(|q| q.label == p.label) {
                return Err(CliError::Config(format!("duplicate policy label '{}'", p.label)));
            }
        }
        let s = &self.sweep;
        if s.kappa.is_empty() || s.c_v.is_empty() {
            return Err(CliError::Config("sweep axes must be nonempty".into()));
        }
        for (k, c) in s.cells() {
            // the regularization ablation includes kappa = 0
            s.cell_policy(k, c).validate(&params.domain, true)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, with the execution-only
    /// `parallelism` setting zeroed.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.experiment.parallelism = 0;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_hard_coded_model() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let p = cfg.model_params().unwrap();
        let t = ModelParams::desk_scale();
        assert_eq!(p.impact, t.impact);
        assert_eq!(p.decay, t.decay);
        assert_eq!(p.factors, t.factors);
        assert_eq!(p.noise, t.noise);
        assert_eq!(p.rho, t.rho);
        assert_eq!(p.domain, t.domain);
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn parallelism_does_not_change_hash() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.experiment.parallelism = 8;
        assert_eq!(a.hash(), b.hash());
        b.experiment.seed_base = 2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn cross_sweep_cells() {
        let s = SweepSection::default();
        assert_eq!(
            s.cells(),
            vec![(0.0, 0.0), (2e10, 0.0), (1e11, 0.0), (1e11, 20.0), (1e11, 600.0)]
        );
        let p = SweepSection {
            mode: SweepMode::Product,
            ..SweepSection::default()
        };
        assert_eq!(p.cells().len(), 9);
    }
}
