//! Experiment drivers behind the CLI subcommands.
//!
//! Each driver takes a validated [`RunConfig`] and returns plain data; the
//! caller decides how to write it. Every random choice is drawn from a
//! stream named after its purpose, so the drivers are deterministic in the
//! configuration and seed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::dp_oracle::{self, GreedyPolicy};
use crate::error::{Error, Result};
use crate::filter_core::{det_ratio_lyapunov, det_ratio_riccati, Covariance, TargetModel};
use crate::gmti_sim::{
    run_macro_cycles, system_matrices, CyclePolicy, MacroTrace, PlatformSpec, Scenario, SensorNoise, TargetState,
    ORBIT_LOCATIONS,
};
use crate::linearization::{validate_linearization, LinearityReport};
use crate::optimizer::{
    evaluate_cost_stats, optimize_policy, periodic_sweep, sample_paths, CostEstimate, SpsaOutcome, StoppingProblem,
};
use crate::policy::{param_dim, verify_monotone, MonotoneSampler, PolicyFamily, PolicyParams};
use crate::rng::{self, stream_seed};

fn template(cfg: &RunConfig, family: PolicyFamily, problem: &StoppingProblem) -> Result<PolicyParams> {
    let layout = cfg.policy.layout;
    let (l, m) = (problem.num_targets(), problem.state_dim());
    PolicyParams::from_phi(family, layout, l, m, vec![0.0; param_dim(family, layout, l, m)])
}

/// Cost estimate plus mean stopping time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub cost: CostEstimate,
    pub mean_tau: f64,
}

pub fn evaluate_policy(problem: &StoppingProblem, params: &PolicyParams, seed: u64, batch: usize) -> Result<PolicyEvaluation> {
    let paths = sample_paths(problem, params, seed, batch)?;
    let costs: Vec<f64> = paths.iter().map(|p| p.1).collect();
    Ok(PolicyEvaluation {
        cost: CostEstimate::from_samples(&costs),
        mean_tau: paths.iter().map(|p| p.0 as f64).sum::<f64>() / paths.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOutcome {
    pub params: PolicyParams,
    pub spsa: SpsaOutcome,
    pub evaluation: PolicyEvaluation,
}

/// SPSA on the scenario's initial stopping problem.
pub fn optimize(cfg: &RunConfig, family: PolicyFamily) -> Result<OptimizeOutcome> {
    let problem = cfg.scenario()?.stopping_problem()?;
    let t = template(cfg, family, &problem)?;
    let (params, spsa) = optimize_policy(&problem, &t, &cfg.spsa, stream_seed(cfg.seed, "optimize", 0))?;
    let evaluation = evaluate_policy(&problem, &params, stream_seed(cfg.seed, "evaluation", 0), cfg.evaluation_rollouts)?;
    Ok(OptimizeOutcome {
        params,
        spsa,
        evaluation,
    })
}

/// Fixed stopping times `1..=k_max` on the scenario's initial problem.
pub fn periodic(cfg: &RunConfig, k_max: usize) -> Result<Vec<CostEstimate>> {
    let problem = cfg.scenario()?.stopping_problem()?;
    periodic_sweep(&problem, k_max, stream_seed(cfg.seed, "evaluation", 0), cfg.evaluation_rollouts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub operating_cost: f64,
    pub detection_prob: f64,
    pub evaluation: PolicyEvaluation,
    /// Grid point whose optimized policy achieved the reported cost.
    pub policy_source: usize,
}

/// Cost of the optimized policy over the (detection probability, operating
/// cost) grid.
///
/// SPSA runs once per grid point with a common seed. Every grid point then
/// evaluates all optimized policies on one common set of rollouts and
/// reports the cheapest, so that a poor local optimum at one point does not
/// mask the trend.
pub fn sensitivity(cfg: &RunConfig) -> Result<Vec<SensitivityRow>> {
    let base = cfg.scenario()?;
    let grid: Vec<(f64, f64)> = cfg
        .sensitivity
        .detection_probs
        .iter()
        .flat_map(|&pd| cfg.sensitivity.operating_costs.iter().map(move |&c| (c, pd)))
        .collect();
    let problems = grid
        .iter()
        .map(|&(c, pd)| {
            let mut s = base.clone();
            s.weights.operating_cost = c;
            s.detection_prob = pd;
            s.stopping_problem()
        })
        .collect::<Result<Vec<_>>>()?;
    let spsa_seed = stream_seed(cfg.seed, "sensitivity-spsa", 0);
    let candidates = problems
        .iter()
        .map(|p| optimize_policy(p, &template(cfg, cfg.policy.family, p)?, &cfg.spsa, spsa_seed).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    let eval_seed = stream_seed(cfg.seed, "sensitivity-evaluation", 0);
    grid.iter()
        .zip(&problems)
        .map(|(&(c, pd), problem)| {
            let mut best: Option<(usize, PolicyEvaluation)> = None;
            for (i, params) in candidates.iter().enumerate() {
                let e = evaluate_policy(problem, params, eval_seed, cfg.evaluation_rollouts)?;
                if best.as_ref().is_none_or(|(_, b)| e.cost.mean < b.cost.mean) {
                    best = Some((i, e));
                }
            }
            let (policy_source, evaluation) = best.ok_or_else(|| Error::invalid("sensitivity", "empty grid"))?;
            Ok(SensitivityRow {
                operating_cost: c,
                detection_prob: pd,
                evaluation,
                policy_source,
            })
        })
        .collect()
}

/// The scenario with each target's covariance rescaled and its estimate
/// redrawn, as described by the configuration's initial-condition set.
pub fn perturbed_scenario(cfg: &RunConfig, index: usize) -> Result<Scenario> {
    let mut s = cfg.scenario()?.clone();
    let [lo, hi] = cfg.initial_conditions.covariance_scale;
    let mut rng = rng::stream(cfg.seed, "initial-condition", index as u64);
    for t in &mut s.targets {
        let scale = if hi > lo { rng.random_range(lo.ln()..hi.ln()).exp() } else { lo };
        let cov = Covariance::new(t.covariance.matrix() * scale)?;
        let chol = cov
            .matrix()
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("initial covariance is not positive definite".into()))?;
        let z = DVector::<f64>::from_fn(4, |_, _| rng.sample(StandardNormal));
        let offset = chol.l() * z;
        t.estimate = TargetState(t.truth.0 + nalgebra::Vector4::from_column_slice(offset.as_slice()));
        t.covariance = cov;
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub initial_condition: usize,
    pub policy: PolicyEvaluation,
    /// Fixed stopping time with the lowest mean cost.
    pub best_k: usize,
    pub best_periodic: CostEstimate,
    pub periodic: Vec<CostEstimate>,
}

/// Optimized policy against every fixed stopping time over randomized
/// initial conditions, all evaluated on the same rollouts.
pub fn envelope(cfg: &RunConfig) -> Result<Vec<EnvelopeRow>> {
    (0..cfg.initial_conditions.count)
        .map(|i| {
            let scenario = perturbed_scenario(cfg, i)?;
            let problem = scenario.stopping_problem()?;
            let t = template(cfg, cfg.policy.family, &problem)?;
            let (params, _) = optimize_policy(&problem, &t, &cfg.spsa, stream_seed(cfg.seed, "envelope-spsa", i as u64))?;
            let eval_seed = stream_seed(cfg.seed, "envelope-evaluation", i as u64);
            let policy = evaluate_policy(&problem, &params, eval_seed, cfg.evaluation_rollouts)?;
            let periodic = periodic_sweep(&problem, problem.tau_max, eval_seed, cfg.evaluation_rollouts)?;
            let (k, best) = periodic
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.mean.total_cmp(&b.1.mean))
                .expect("tau_max is at least 1");
            Ok(EnvelopeRow {
                initial_condition: i,
                policy,
                best_k: k + 1,
                best_periodic: *best,
                periodic,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationPolicy {
    pub location: usize,
    pub params: PolicyParams,
    pub training_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistentOutcome {
    pub policies: Vec<LocationPolicy>,
    pub trace: MacroTrace,
}

fn circular_distance(a: usize, b: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(ORBIT_LOCATIONS - d)
}

/// Optimizes a policy at every `location_stride`-th orbit location, then
/// runs the macro/micro cycle switching between them.
pub fn persistent(cfg: &RunConfig) -> Result<PersistentOutcome> {
    let scenario = cfg.scenario()?;
    let (seg, start) = match scenario.platform {
        PlatformSpec::Orbit { start_location, .. } => {
            (scenario.platform.segment_time().expect("orbit"), start_location)
        }
        _ => return Err(Error::invalid("scenario.platform", "the persistent experiment needs an orbit")),
    };
    let estimates: Vec<TargetState> = scenario.targets.iter().map(|t| t.estimate).collect();
    let covariances: Vec<Covariance> = scenario.targets.iter().map(|t| t.covariance.clone()).collect();
    let policies = (1..=ORBIT_LOCATIONS)
        .step_by(cfg.persistent.location_stride)
        .map(|loc| {
            let offset = (loc + ORBIT_LOCATIONS - start % ORBIT_LOCATIONS) % ORBIT_LOCATIONS;
            let problem = scenario.stopping_problem_at(offset as f64 * seg, &estimates, &covariances)?;
            let t = template(cfg, cfg.policy.family, &problem)?;
            let (params, out) = optimize_policy(&problem, &t, &cfg.spsa, stream_seed(cfg.seed, "persistent-spsa", loc as u64))?;
            Ok(LocationPolicy {
                location: loc,
                params,
                training_cost: out.best_cost,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let per_location = (1..=ORBIT_LOCATIONS)
        .map(|loc| {
            policies
                .iter()
                .min_by_key(|p| circular_distance(p.location, loc))
                .expect("at least one location")
                .params
                .clone()
        })
        .collect();
    let trace = run_macro_cycles(
        scenario,
        &CyclePolicy::PerLocation(per_location),
        cfg.persistent.cycles,
        stream_seed(cfg.seed, "persistent-cycles", 0),
    )?;
    Ok(PersistentOutcome { policies, trace })
}

pub fn linearization(cfg: &RunConfig) -> Result<LinearityReport> {
    validate_linearization(&cfg.linearization, cfg.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpOutcome {
    pub iterations: usize,
    pub bellman_residual: f64,
    pub monotonicity_violations: usize,
    /// `(P^o, g(P^o))`; empty for four-dimensional tables.
    pub threshold: Vec<(f64, f64)>,
    pub optimal_cost: f64,
    /// Monte-Carlo cost of the greedy policy read from the table.
    pub greedy: CostEstimate,
}

pub fn dp_threshold(cfg: &RunConfig) -> Result<DpOutcome> {
    let run = &cfg.dp;
    let table = dp_oracle::value_iterate(&run.model, run.tolerance, run.max_iterations)?;
    let threshold = if run.model.uses_priors() {
        Vec::new()
    } else {
        dp_oracle::extract_threshold(&table)?
    };
    let problem = run.model.stopping_problem(&run.initial, crate::optimizer::DEFAULT_TAU_MAX)?;
    let greedy = evaluate_cost_stats(
        &problem,
        &GreedyPolicy { table: &table },
        stream_seed(cfg.seed, "evaluation", 0),
        cfg.evaluation_rollouts,
    )?;
    Ok(DpOutcome {
        iterations: table.iterations,
        bellman_residual: table.bellman_residual(),
        monotonicity_violations: dp_oracle::check_monotone_policy(&table),
        threshold,
        optimal_cost: dp_oracle::optimal_cost(&table, &run.initial)?,
        greedy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyRow {
    pub property: String,
    pub samples: usize,
    /// Samples where the check could fail (decisions that differ, or pairs
    /// that are strictly ordered).
    pub decisive: usize,
    pub violations: usize,
}

fn gaussian_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn spectral_radius(f: &DMatrix<f64>) -> f64 {
    f.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn random_model<R: Rng>(rng: &mut R, m: usize, use_gmti: bool) -> Result<TargetModel> {
    let f = if use_gmti && m == 4 {
        let sensor = SensorNoise {
            range: 20.0,
            azimuth_deg: 0.5,
            range_rate: 5.0,
        };
        let sys = system_matrices(0.1, 0.5, 0.5, &sensor);
        DMatrix::from_column_slice(4, 4, sys.transition.as_slice())
    } else {
        let f = gaussian_matrix(rng, m, m);
        let radius = spectral_radius(&f);
        let target = rng.random_range(0.5..=1.5);
        if radius > 0.0 {
            f * (target / radius)
        } else {
            DMatrix::identity(m, m) * target
        }
    };
    let p = m.min(3);
    let g = gaussian_matrix(rng, m, m) * 0.3;
    let h = gaussian_matrix(rng, p, m);
    let a = gaussian_matrix(rng, p, p);
    let r = &a * a.transpose() + DMatrix::identity(p, p) * 0.1;
    TargetModel::new(f, g, h, DMatrix::identity(m, m), r, 0.75, 1.0)
}

/// Monotonicity of the four policy families and of both determinant
/// ratios on random ordered pairs.
pub fn verify_properties(cfg: &RunConfig, samples: usize) -> Result<Vec<PropertyRow>> {
    let (l, m) = (cfg.verify.num_targets, cfg.verify.state_dim);
    let mut rows = Vec::new();
    for (i, family) in PolicyFamily::ALL.iter().enumerate() {
        let layout = cfg.policy.layout;
        let dim = param_dim(*family, layout, l, m);
        let mut rng = rng::stream(cfg.seed, "verify-params", i as u64);
        let phi: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let params = PolicyParams::from_phi(*family, layout, l, m, phi)?;
        let sampler = MonotoneSampler {
            seed: stream_seed(cfg.seed, "verify-beliefs", i as u64),
            ..MonotoneSampler::default()
        };
        let report = verify_monotone(&params, &sampler, samples);
        rows.push(PropertyRow {
            property: format!("policy-monotone/{}", family.name()),
            samples,
            decisive: report.decisive,
            violations: report.violations.len(),
        });
    }

    let mut rng = rng::stream(cfg.seed, "verify-det-ratio", 0);
    let (mut lyap, mut ricc, mut strict) = (0, 0, 0);
    for s in 0..samples {
        let model = random_model(&mut rng, m, s % 4 == 0)?;
        let base = gaussian_matrix(&mut rng, m, m);
        let small = Covariance::new(&base * base.transpose() + DMatrix::identity(m, m) * 1e-2)?;
        let a = gaussian_matrix(&mut rng, m, m) * 0.5;
        let large = small.plus_outer(&a)?;
        strict += 1;
        let tol = |v: f64| 1e-9 * v.abs().max(1.0);
        let (l0, l1) = (det_ratio_lyapunov(&small, &model)?, det_ratio_lyapunov(&large, &model)?);
        if l1 > l0 + tol(l0) {
            lyap += 1;
        }
        let (r0, r1) = (det_ratio_riccati(&small, &model, 1.0)?, det_ratio_riccati(&large, &model, 1.0)?);
        if r1 > r0 + tol(r0) {
            ricc += 1;
        }
    }
    rows.push(PropertyRow {
        property: "det-ratio-lyapunov".into(),
        samples,
        decisive: strict,
        violations: lyap,
    });
    rows.push(PropertyRow {
        property: "det-ratio-riccati".into(),
        samples,
        decisive: strict,
        violations: ricc,
    });
    Ok(rows)
}
