//! Command-line interface: argument parsing, experiment dispatch and result
//! files.
//!
//! Exit status is 0 on success, 2 for configuration or input errors and 3
//! for numerical failures.

pub mod config;
pub mod experiments;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::error::{Error, Result};
use crate::policy::PolicyFamily;
use config::{load_config, Overrides, RunConfig};
use output::{num, OutputDir};

#[derive(Debug, Parser)]
#[command(name = "monostop", version, about = "Monotone stopping policies for radar micro-management")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replaces the configuration's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Operating cost per epoch.
    #[arg(long = "c-nu", global = true)]
    pub c_nu: Option<f64>,
    /// Detection probability.
    #[arg(long, global = true)]
    pub pd: Option<f64>,
    /// Epoch at which every rollout is forced to stop.
    #[arg(long = "tau-max", global = true)]
    pub tau_max: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Fly-by scenario: cost over (p_d, c_nu) and the periodic envelope.
    Flyby,
    /// Persistent surveillance with per-location policies.
    Persistent,
    /// Train one policy family on the scenario.
    Optimize {
        #[arg(long)]
        family: PolicyFamily,
    },
    /// Costs of all fixed stopping times up to `kmax`.
    PeriodicSweep {
        #[arg(long)]
        kmax: usize,
    },
    /// Linearization quality of the measurement map.
    ValidateLinearization,
    /// Value iteration for the scalar two-target problem.
    DpThreshold,
    /// Monotonicity checks for policies and determinant ratios.
    VerifyProperties {
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Flyby => "flyby",
            Command::Persistent => "persistent",
            Command::Optimize { .. } => "optimize",
            Command::PeriodicSweep { .. } => "periodic-sweep",
            Command::ValidateLinearization => "validate-linearization",
            Command::DpThreshold => "dp-threshold",
            Command::VerifyProperties { .. } => "verify-properties",
        }
    }
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        2
    } else {
        3
    }
}

/// The effective configuration: file contents, then command-line overrides.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::with_seed(
            common
                .seed
                .ok_or_else(|| Error::invalid("seed", "give --seed or a configuration with a seed"))?,
        ),
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        operating_cost: common.c_nu,
        detection_prob: common.pd,
        tau_max: common.tau_max,
    });
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one command and writes its files; returns the output directory.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let cfg = resolve_config(&cli.common)?;
    let mut out = OutputDir::create(&cli.common.out, &cfg.hash())?;
    out.write_json("config.json", &cfg)?;
    let summary = match &cli.command {
        Command::Flyby => flyby(&cfg, &mut out)?,
        Command::Persistent => persistent(&cfg, &mut out)?,
        Command::Optimize { family } => optimize(&cfg, *family, &mut out)?,
        Command::PeriodicSweep { kmax } => periodic(&cfg, *kmax, &mut out)?,
        Command::ValidateLinearization => linearization(&cfg, &mut out)?,
        Command::DpThreshold => dp_threshold(&cfg, &mut out)?,
        Command::VerifyProperties { samples } => verify(&cfg, *samples, &mut out)?,
    };
    let dir = out.path().to_path_buf();
    out.finish(cli.command.name(), cfg.seed, summary)?;
    Ok(dir)
}

fn flyby(cfg: &RunConfig, out: &mut OutputDir) -> Result<serde_json::Value> {
    let grid = experiments::sensitivity(cfg)?;
    out.write_csv(
        "sensitivity.csv",
        "c_nu and cost in cost units, p_d probability, mean_tau in epochs",
        &["c_nu", "p_d", "mean_cost", "std_err", "mean_tau", "policy_source"],
        grid.iter().map(|r| {
            vec![
                num(r.operating_cost),
                num(r.detection_prob),
                num(r.evaluation.cost.mean),
                num(r.evaluation.cost.std_err),
                num(r.evaluation.mean_tau),
                r.policy_source.to_string(),
            ]
        }),
    )?;
    let env = experiments::envelope(cfg)?;
    out.write_csv(
        "envelope.csv",
        "costs in cost units, mean_tau and best_k in epochs",
        &["initial_condition", "policy_cost", "policy_std_err", "mean_tau", "best_k", "best_periodic_cost", "best_periodic_std_err"],
        env.iter().map(|r| {
            vec![
                r.initial_condition.to_string(),
                num(r.policy.cost.mean),
                num(r.policy.cost.std_err),
                num(r.policy.mean_tau),
                r.best_k.to_string(),
                num(r.best_periodic.mean),
                num(r.best_periodic.std_err),
            ]
        }),
    )?;
    out.write_csv(
        "periodic_by_initial_condition.csv",
        "k_stop in epochs, cost in cost units",
        &["initial_condition", "k_stop", "mean_cost", "std_err"],
        env.iter().flat_map(|r| {
            r.periodic
                .iter()
                .enumerate()
                .map(move |(k, e)| vec![r.initial_condition.to_string(), (k + 1).to_string(), num(e.mean), num(e.std_err)])
        }),
    )?;
    let dominated = env
        .iter()
        .filter(|r| r.policy.cost.mean <= r.best_periodic.mean + 2.0 * r.best_periodic.std_err)
        .count();
    Ok(json!({
        "grid_points": grid.len(),
        "initial_conditions": env.len(),
        "policy_within_envelope": dominated,
    }))
}

fn persistent(cfg: &RunConfig, out: &mut OutputDir) -> Result<serde_json::Value> {
    let res = experiments::persistent(cfg)?;
    out.write_csv(
        "persistent_trace.csv",
        "log_det in log of squared metres and (m/s)^2; cycle, epoch and target are indices",
        &["cycle", "epoch", "target", "leader", "log_det_P", "log_det_Pbar", "detected", "action"],
        res.trace.rows.iter().map(|r| {
            vec![
                r.cycle.to_string(),
                r.epoch.to_string(),
                (r.target + 1).to_string(),
                (r.leader + 1).to_string(),
                num(r.log_det_p),
                num(r.log_det_pbar),
                u8::from(r.detected).to_string(),
                (r.action as u8).to_string(),
            ]
        }),
    )?;
    out.write_csv(
        "persistent_cycles.csv",
        "stop_time in epochs; location is the orbit index 1..72",
        &["cycle", "leader", "location", "stop_time"],
        (0..res.trace.stop_times.len()).map(|c| {
            vec![
                c.to_string(),
                (res.trace.leaders[c] + 1).to_string(),
                res.trace.locations[c].map_or(String::new(), |l| l.to_string()),
                res.trace.stop_times[c].to_string(),
            ]
        }),
    )?;
    out.write_json("persistent_policies.json", &res.policies)?;
    let mean_tau = res.trace.stop_times.iter().sum::<usize>() as f64 / res.trace.stop_times.len().max(1) as f64;
    Ok(json!({
        "cycles": res.trace.stop_times.len(),
        "optimized_locations": res.policies.len(),
        "mean_stop_time": mean_tau,
    }))
}

fn optimize(cfg: &RunConfig, family: PolicyFamily, out: &mut OutputDir) -> Result<serde_json::Value> {
    let res = experiments::optimize(cfg, family)?;
    out.write_csv(
        "spsa_trace.csv",
        "cost in cost units; phi unconstrained parameters separated by ';'",
        &["restart", "iteration", "cost", "phi"],
        res.spsa.trace.iter().map(|t| {
            vec![
                t.restart.to_string(),
                t.iteration.to_string(),
                num(t.cost),
                t.phi.iter().map(|v| num(*v)).collect::<Vec<_>>().join(";"),
            ]
        }),
    )?;
    out.write_json("policy.json", &res.params)?;
    Ok(json!({
        "family": family.name(),
        "training_cost": res.spsa.best_cost,
        "evaluation": res.evaluation,
    }))
}

fn periodic(cfg: &RunConfig, k_max: usize, out: &mut OutputDir) -> Result<serde_json::Value> {
    let sweep = experiments::periodic(cfg, k_max)?;
    out.write_csv(
        "periodic.csv",
        "k_stop in epochs, cost in cost units",
        &["k_stop", "mean_cost", "std_err"],
        sweep.iter().enumerate().map(|(k, e)| vec![(k + 1).to_string(), num(e.mean), num(e.std_err)]),
    )?;
    let (k, best) = sweep
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.mean.total_cmp(&b.1.mean))
        .expect("kmax is at least 1");
    Ok(json!({ "best_k": k + 1, "best_cost": best.mean }))
}

fn linearization(cfg: &RunConfig, out: &mut OutputDir) -> Result<serde_json::Value> {
    let rep = experiments::linearization(cfg)?;
    let mut rows = Vec::new();
    for (i, label) in rep.labels.iter().enumerate() {
        for (j, k) in rep.steps.iter().enumerate() {
            rows.push(vec![label.clone(), k.to_string(), num(rep.d[i][j])]);
        }
    }
    out.write_csv("linearization_d.csv", "D dimensionless; k in epochs", &["state", "k", "D"], rows)?;
    let mut rows = Vec::new();
    for (g, gamma) in rep.gammas.iter().enumerate() {
        for (i, label) in rep.labels.iter().enumerate() {
            for (j, k) in rep.steps.iter().enumerate() {
                rows.push(vec![num(*gamma), label.clone(), k.to_string(), num(rep.e[g][i][j])]);
            }
        }
    }
    out.write_csv("linearization_e.csv", "E dimensionless; gamma dimensionless; k in epochs", &["gamma", "state", "k", "E"], rows)?;
    Ok(json!({ "linear": rep.is_linear(), "flags": rep.flags }))
}

fn dp_threshold(cfg: &RunConfig, out: &mut OutputDir) -> Result<serde_json::Value> {
    let res = experiments::dp_threshold(cfg)?;
    out.write_csv(
        "threshold.csv",
        "covariances in state units squared",
        &["p_other", "g"],
        res.threshold.iter().map(|(p, g)| vec![num(*p), num(*g)]),
    )?;
    Ok(json!({
        "iterations": res.iterations,
        "bellman_residual": res.bellman_residual,
        "monotonicity_violations": res.monotonicity_violations,
        "optimal_cost": res.optimal_cost,
        "greedy": res.greedy,
    }))
}

fn verify(cfg: &RunConfig, samples: usize, out: &mut OutputDir) -> Result<serde_json::Value> {
    let rows = experiments::verify_properties(cfg, samples)?;
    out.write_csv(
        "properties.csv",
        "counts",
        &["property", "samples", "decisive", "violations"],
        rows.iter().map(|r| {
            vec![
                r.property.clone(),
                r.samples.to_string(),
                r.decisive.to_string(),
                r.violations.to_string(),
            ]
        }),
    )?;
    let total: usize = rows.iter().map(|r| r.violations).sum();
    Ok(json!({ "violations": total }))
}
