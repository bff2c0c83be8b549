use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ctrace_core::linalg::lambda_min;
use ctrace_core::policy::{PolicyConfig, PolicyKind};
use ctrace_core::riccati::{
    closed_form_single_factor, excitation_floor, finite_horizon_value, regressor_covariance, signal_to_noise,
    theta_grid, DareOptions, RiccatiSolution,
};
use ctrace_core::sim::{ExperimentResult, ExperimentSpec, Simulator};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::{num, opt_num, sampled_periods, OutputDir, Table};

#[derive(Debug, Parser)]
#[command(name = "ctrace", version, about = "Adaptive trade execution experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML experiment file; built-in defaults when omitted
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, default_value = "results")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Solve the Riccati equation for the true parameters and report diagnostics
    Solve,
    /// Run the paired Monte Carlo experiment for the configured policies
    Simulate,
    /// Run CTRACE over the configured (kappa, C_v) grid
    Sweep,
    /// Finite-horizon value error and CTRACE gain-error curves
    Fig1,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Simulate => "simulate",
            Command::Sweep => "sweep",
            Command::Fig1 => "fig1",
        }
    }
}

/// Loads the config and applies command-line overrides, then validates.
pub fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let e = &mut cfg.experiment;
    if let Some(v) = args.seed {
        e.seed_base = v;
    }
    if let Some(v) = args.paths {
        e.n_paths = v;
    }
    if let Some(v) = args.horizon {
        e.horizon = v;
    }
    if let Some(v) = args.parallelism {
        e.parallelism = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    match cli.command {
        Command::Solve => cmd_solve(&cfg, out).map(|_| ()),
        Command::Simulate => cmd_simulate(&cfg, out).map(|_| ()),
        Command::Sweep => cmd_sweep(&cfg, out),
        Command::Fig1 => cmd_fig1(&cfg, out),
    }
}

fn dare_options(cfg: &ExperimentConfig) -> DareOptions {
    DareOptions {
        tol: cfg.experiment.dare_tol,
        ..DareOptions::default()
    }
}

fn simulator(cfg: &ExperimentConfig) -> Result<Simulator, CliError> {
    Ok(Simulator::new(cfg.model_params()?, Some(cfg.initial_state()?), dare_options(cfg))?)
}

fn spec(cfg: &ExperimentConfig) -> ExperimentSpec {
    let e = &cfg.experiment;
    ExperimentSpec {
        horizon: e.horizon,
        n_paths: e.n_paths,
        seed_base: e.seed_base,
        parallelism: e.parallelism,
        keep_paths: e.estimator_paths.min(e.n_paths),
    }
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosedFormCheck {
    pub closed_form: [f64; 5],
    pub solver: [f64; 5],
    /// Largest relative difference over the five entries
    /// `(p_xx, p_xf, p_ff, l_x, l_f)`.
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExcitationReport {
    /// Minimum over the parameter grid of `lambda_min(U Pi U')`.
    pub floor: f64,
    pub argmin: Vec<f64>,
    pub grid_size: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub config_hash: String,
    /// `-tr(P* Omega~)`, dollars per period.
    pub avg_profit: f64,
    pub snr: f64,
    pub lambda_min_regressor_cov: f64,
    pub spectral_radius: f64,
    pub residual: f64,
    pub iterations: usize,
    pub r_eff: f64,
    pub gain: Vec<f64>,
    pub p: Vec<Vec<f64>>,
    pub excitation: Option<ExcitationReport>,
    pub closed_form: Option<ClosedFormCheck>,
}

pub fn solve_report(cfg: &ExperimentConfig) -> Result<SolveReport, CliError> {
    let sim = simulator(cfg)?;
    let params = sim.params();
    let sol: &RiccatiSolution = sim.optimal();
    let cov = regressor_covariance(sol, sim.pi_star());

    let grid = theta_grid(params);
    let excitation = excitation_floor(params, &grid, &dare_options(cfg)).ok().map(|f| ExcitationReport {
        floor: f.value,
        argmin: f.argmin.iter().copied().collect(),
        grid_size: grid.len(),
    });

    let closed_form = (params.m() == 0 && params.k() == 1).then(|| {
        let cf = closed_form_single_factor(
            params.impact.lambda,
            params.rho,
            params.noise.sigma_eps,
            params.factors.phi[(0, 0)],
            params.factors.g[0],
        );
        let closed = [cf.p_xx, cf.p_xf, cf.p_ff, cf.l_x, cf.l_f];
        let solver = [sol.p[(0, 0)], 2.0 * sol.p[(0, 1)], sol.p[(1, 1)], sol.l[0], sol.l[1]];
        let max_rel_error = closed
            .iter()
            .zip(&solver)
            .map(|(c, s)| (c - s).abs() / c.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        ClosedFormCheck {
            closed_form: closed,
            solver,
            max_rel_error,
        }
    });

    Ok(SolveReport {
        config_hash: cfg.hash(),
        avg_profit: -sol.avg_cost,
        snr: signal_to_noise(sol, sim.pi_star(), &params.theta_star(), params.noise.sigma_eps),
        lambda_min_regressor_cov: lambda_min(&cov),
        spectral_radius: sol.spectral_radius,
        residual: sol.residual,
        iterations: sol.iterations,
        r_eff: sol.r_eff,
        gain: sol.l.iter().copied().collect(),
        p: rows(&sol.p),
        excitation,
        closed_form,
    })
}

pub fn cmd_solve(cfg: &ExperimentConfig, out: &std::path::Path) -> Result<SolveReport, CliError> {
    let report = solve_report(cfg)?;
    println!("average profit    {:.4}", report.avg_profit);
    println!("SNR               {:.6}", report.snr);
    println!("lambda_min(UPiU') {:.4}", report.lambda_min_regressor_cov);
    println!("spectral radius   {:.6}", report.spectral_radius);
    println!("DARE residual     {:e} after {} iterations", report.residual, report.iterations);
    if let Some(ex) = &report.excitation {
        println!("excitation floor  {:.4} over {} grid points", ex.floor, ex.grid_size);
        for p in cfg.policy_configs()? {
            if p.kind == PolicyKind::Ctrace && p.c_v >= ex.floor {
                println!("  note: {} has C_v = {} at or above the floor", p.label, p.c_v);
            }
        }
    }
    if let Some(cf) = &report.closed_form {
        println!("closed form       max relative difference {:e}", cf.max_rel_error);
    }
    let mut dir = OutputDir::create(out, &report.config_hash)?;
    dir.write_json("solution.json", &report)?;
    finish(dir, cfg, "solve", Vec::new())?;
    Ok(report)
}

fn finish(dir: OutputDir, cfg: &ExperimentConfig, command: &str, policies: Vec<String>) -> Result<(), CliError> {
    let e = &cfg.experiment;
    dir.finish(command, e.seed_base, e.horizon, e.n_paths, policies)
}

fn experiment_error(e: Box<ctrace_core::sim::ExperimentFailure>) -> CliError {
    CliError::from(e.error)
}

fn theta_names(m: usize) -> Vec<String> {
    std::iter::once("theta_lambda".to_string())
        .chain((1..=m).map(|i| format!("theta_gamma_{i}")))
        .collect()
}

pub fn regret_table(result: &ExperimentResult, stride: usize) -> Table {
    let mut header = vec!["period".to_string()];
    for p in &result.policies {
        header.push(format!("{}_mean", p.config.label));
        header.push(format!("{}_se", p.config.label));
    }
    let mut table = Table::new(header);
    for t in sampled_periods(result.horizon, stride) {
        let mut row = vec![t.to_string()];
        for p in &result.policies {
            let (m, s) = p.relative.at(t);
            row.push(num(m));
            row.push(num(s));
        }
        table.push(row);
    }
    table
}

/// The first CTRACE policy, or the first policy, is the reference of the
/// paired differences.
fn reference_label(result: &ExperimentResult) -> String {
    result
        .policies
        .iter()
        .find(|p| p.config.kind == PolicyKind::Ctrace)
        .unwrap_or(&result.policies[0])
        .config
        .label
        .clone()
}

pub fn profit_table(result: &ExperimentResult) -> Table {
    let reference = reference_label(result);
    let others: Vec<&str> = result
        .policies
        .iter()
        .map(|p| p.config.label.as_str())
        .filter(|l| *l != reference)
        .collect();
    let mut header = vec!["path".to_string()];
    header.extend(result.policies.iter().map(|p| format!("{}_profit", p.config.label)));
    header.extend(others.iter().map(|o| format!("{reference}_minus_{o}")));
    let mut table = Table::new(header);
    let diffs: Vec<Vec<f64>> = others
        .iter()
        .map(|o| result.profit_differences(&reference, o).unwrap_or_default())
        .collect();
    for j in 0..result.n_paths {
        let mut row = vec![j.to_string()];
        row.extend(result.policies.iter().map(|p| num(p.final_profit[j])));
        row.extend(diffs.iter().map(|d| num(d[j])));
        table.push(row);
    }
    table
}

pub fn estimator_table(result: &ExperimentResult, m: usize) -> Table {
    let mut header: Vec<String> = ["policy", "path", "t"].iter().map(|s| s.to_string()).collect();
    header.extend(theta_names(m));
    header.extend(
        ["theta_error", "lambda_min", "bound", "radius_sq", "alpha", "fallback"]
            .iter()
            .map(|s| s.to_string()),
    );
    let mut table = Table::new(header);
    for p in &result.policies {
        for path in &p.kept_paths {
            for rec in &path.updates {
                let ev = &rec.event;
                let mut row = vec![p.config.label.clone(), path.path.to_string(), ev.t.to_string()];
                row.extend(ev.theta.iter().map(|v| num(*v)));
                row.push(num(rec.theta_error));
                row.push(num(ev.lambda_min));
                row.push(opt_num(rec.bound));
                row.push(num(rec.radius_sq));
                row.push(opt_num(ev.alpha));
                row.push(u8::from(ev.fallback).to_string());
                table.push(row);
            }
        }
    }
    table
}

pub fn cmd_simulate(cfg: &ExperimentConfig, out: &std::path::Path) -> Result<ExperimentResult, CliError> {
    let sim = simulator(cfg)?;
    let policies = cfg.policy_configs()?;
    let result = sim.run_experiment(&policies, &spec(cfg)).map_err(experiment_error)?;

    let hash = cfg.hash();
    let mut dir = OutputDir::create(out, &hash)?;
    dir.write_table("regret.csv", &regret_table(&result, cfg.experiment.stride))?;
    dir.write_table("profit_diff.csv", &profit_table(&result))?;
    dir.write_table("estimator.csv", &estimator_table(&result, sim.params().m()))?;
    finish(dir, cfg, "simulate", policies.iter().map(|p| p.label.clone()).collect())?;

    println!("relative regret at T = {} over {} paths", result.horizon, result.n_paths);
    for p in &result.policies {
        let (m, s) = p.relative.at(result.horizon);
        let updates: usize = p.updates_per_path.iter().sum();
        println!(
            "  {:<12} {:>12.4} +/- {:<10.4} updates/path {:.1}",
            p.config.label,
            m,
            s,
            updates as f64 / result.n_paths as f64
        );
    }
    Ok(result)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &std::path::Path) -> Result<(), CliError> {
    let sim = simulator(cfg)?;
    let spec = spec(cfg);
    let cells = cfg.sweep.cells();
    let mut table = Table::new(["kappa", "c_v", "status", "period", "mean", "se"]);
    let mut failed = 0;
    let mut labels = Vec::new();
    for &(kappa, c_v) in &cells {
        let policy: PolicyConfig = cfg.sweep.cell_policy(kappa, c_v);
        labels.push(policy.label.clone());
        match sim.run_experiment(std::slice::from_ref(&policy), &spec) {
            Ok(result) => {
                let rel = &result.policies[0].relative;
                let (m, s) = rel.at(spec.horizon);
                println!("kappa {kappa:e} C_v {c_v}: {m:.4} +/- {s:.4}");
                for t in sampled_periods(spec.horizon, cfg.experiment.stride) {
                    let (m, s) = rel.at(t);
                    table.push(vec![num(kappa), num(c_v), "ok".into(), t.to_string(), num(m), num(s)]);
                }
            }
            Err(e) => {
                eprintln!("kappa {kappa:e} C_v {c_v}: failed: {}", e.error);
                failed += 1;
                table.push(vec![num(kappa), num(c_v), "failed".into(), String::new(), String::new(), String::new()]);
            }
        }
    }
    let mut dir = OutputDir::create(out, &cfg.hash())?;
    dir.write_table("sweep.csv", &table)?;
    finish(dir, cfg, "sweep", labels)?;
    if failed > 0 {
        return Err(CliError::PartialSweep {
            failed,
            total: cells.len(),
        });
    }
    Ok(())
}

/// The CTRACE policy used for the learning curve: the first configured one,
/// else the default.
fn fig1_policy(cfg: &ExperimentConfig) -> Result<PolicyConfig, CliError> {
    Ok(cfg
        .policy_configs()?
        .into_iter()
        .find(|p| p.kind == PolicyKind::Ctrace)
        .unwrap_or_else(PolicyConfig::default_ctrace))
}

pub fn cmd_fig1(cfg: &ExperimentConfig, out: &std::path::Path) -> Result<(), CliError> {
    let sim = simulator(cfg)?;
    let fh = finite_horizon_value(sim.system(), &sim.optimal().p, cfg.experiment.fig1_horizon)?;
    let mut p0 = Table::new(["T", "relative_error"]);
    for (t, e) in fh.errors.iter().enumerate() {
        p0.push(vec![t.to_string(), num(*e)]);
    }

    let policy = fig1_policy(cfg)?;
    let mut spec = spec(cfg);
    spec.keep_paths = 0;
    let result = sim
        .run_experiment(std::slice::from_ref(&policy), &spec)
        .map_err(experiment_error)?;
    let curve = &result.policies[0].gain_error;
    let mut gain = Table::new(["period", "mean", "se", "lower", "upper"]);
    for t in sampled_periods(spec.horizon, cfg.experiment.stride) {
        let (m, s) = curve.at(t);
        gain.push(vec![t.to_string(), num(m), num(s), num(m - 2.0 * s), num(m + 2.0 * s)]);
    }

    let mut dir = OutputDir::create(out, &cfg.hash())?;
    dir.write_table("p0_error.csv", &p0)?;
    dir.write_table("gain_error.csv", &gain)?;
    finish(dir, cfg, "fig1", vec![policy.label.clone()])?;
    println!(
        "finite-horizon error at T = {}: {:e}",
        cfg.experiment.fig1_horizon,
        fh.errors.last().copied().unwrap_or(f64::NAN)
    );
    let (m, s) = curve.at(spec.horizon);
    println!("{} relative gain error at T = {}: {m:.5} +/- {s:.5}", policy.label, spec.horizon);
    Ok(())
}
