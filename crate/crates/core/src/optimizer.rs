//! Rollout cost estimation and SPSA policy search.
//!
//! A rollout starts from the problem's initial belief at epoch 1. At each
//! epoch the rule decides; on Continue one uniform per target decides
//! detection and the belief is advanced, on Stop (or at the time bound) the
//! sample cost `(τ − 1) c_ν + C̄(P_τ)` is recorded. Detection uniforms are
//! drawn for every target at every epoch in a fixed order, so two policies
//! evaluated with the same seed see the same detection events.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter_core::{DetectionOutcome, TargetModel};
use crate::observability::{stopping_cost, Belief, CostWeights};
use crate::policy::{decide, decision_statistic, Action, PolicyFamily, PolicyParams};
use crate::rng;

/// Default time bound on a micro-management interval.
pub const DEFAULT_TAU_MAX: usize = 200;

/// Everything a rollout needs: target models, priority allocation, cost
/// weights, the initial belief and the time bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoppingProblem {
    pub models: Vec<TargetModel>,
    pub priorities: Vec<f64>,
    pub weights: CostWeights,
    pub initial: Belief,
    pub tau_max: usize,
}

impl StoppingProblem {
    pub fn new(
        models: Vec<TargetModel>,
        priorities: Vec<f64>,
        weights: CostWeights,
        initial: Belief,
        tau_max: usize,
    ) -> Result<Self> {
        let p = StoppingProblem {
            models,
            priorities,
            weights,
            initial,
            tau_max,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.initial.num_targets();
        self.initial.validate()?;
        self.weights.validate()?;
        if self.models.len() != n || self.priorities.len() != n || self.weights.num_targets() != n {
            return Err(Error::invalid("problem", "models, priorities, weights and belief disagree on the target count"));
        }
        for (l, m) in self.models.iter().enumerate() {
            m.validate()?;
            if m.state_dim() != self.initial.posterior[l].dim() {
                return Err(Error::dim("StoppingProblem", format!("target {l}: model and covariance dimensions differ")));
            }
        }
        validate_priorities(&self.priorities)?;
        if self.tau_max < 1 {
            return Err(Error::invalid("tau_max", "must be at least 1"));
        }
        Ok(())
    }

    pub fn num_targets(&self) -> usize {
        self.initial.num_targets()
    }

    pub fn state_dim(&self) -> usize {
        self.initial.posterior[self.initial.leader].dim()
    }

    pub fn stopping_cost(&self, belief: &Belief) -> Result<f64> {
        stopping_cost(belief, &self.weights)
    }
}

/// Priorities must be a probability vector.
pub fn validate_priorities(nu: &[f64]) -> Result<()> {
    if nu.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("priorities", "entries must be nonnegative"));
    }
    let total: f64 = nu.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("priorities", format!("must sum to 1, sum is {total}")));
    }
    Ok(())
}

/// A stopping rule queried once per epoch (epochs count from 1).
pub trait StopRule {
    fn decide(&self, belief: &Belief, epoch: usize) -> Action;
}

impl StopRule for PolicyParams {
    fn decide(&self, belief: &Belief, _epoch: usize) -> Action {
        decide(belief, self)
    }
}

/// Stops at a fixed epoch regardless of the belief.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedTime(pub usize);

impl StopRule for FixedTime {
    fn decide(&self, _belief: &Belief, epoch: usize) -> Action {
        if epoch >= self.0 {
            Action::Stop
        } else {
            Action::Continue
        }
    }
}

impl<R: StopRule + ?Sized> StopRule for &R {
    fn decide(&self, belief: &Belief, epoch: usize) -> Action {
        (**self).decide(belief, epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub tau: usize,
    pub sample_cost: f64,
    /// Beliefs at epochs `1..=tau`.
    pub belief_trajectory: Vec<Belief>,
    /// Detection outcomes that led from epoch `k` to `k + 1`.
    pub detections: Vec<Vec<bool>>,
    pub truncated: bool,
}

fn draw_outcomes<R: Rng>(rng: &mut R, models: &[TargetModel], priorities: &[f64]) -> Vec<DetectionOutcome> {
    models
        .iter()
        .zip(priorities)
        .map(|(m, &nu)| {
            let u: f64 = rng.random();
            DetectionOutcome {
                detected: nu > 0.0 && u < m.detection_prob,
            }
        })
        .collect()
}

fn simulate(problem: &StoppingProblem, rule: &dyn StopRule, seed: u64, record: bool) -> Result<RolloutResult> {
    let mut rng = rng::stream(seed, "rollout", 0);
    let mut belief = problem.initial.clone();
    let mut trajectory = Vec::new();
    let mut detections = Vec::new();
    let mut epoch = 1;
    loop {
        let at_bound = epoch >= problem.tau_max;
        if at_bound || rule.decide(&belief, epoch) == Action::Stop {
            let truncated = at_bound && rule.decide(&belief, epoch) == Action::Continue;
            let cost = (epoch - 1) as f64 * problem.weights.operating_cost + problem.stopping_cost(&belief)?;
            if record {
                trajectory.push(belief);
            }
            return Ok(RolloutResult {
                tau: epoch,
                sample_cost: cost,
                belief_trajectory: trajectory,
                detections,
                truncated,
            });
        }
        let outcomes = draw_outcomes(&mut rng, &problem.models, &problem.priorities);
        let next = belief
            .step(&problem.models, &problem.priorities, &outcomes)
            .map_err(|e| epoch_context(e, epoch))?;
        if record {
            trajectory.push(belief);
            detections.push(outcomes.iter().map(|o| o.detected).collect());
        }
        belief = next;
        epoch += 1;
    }
}

fn epoch_context(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("epoch {epoch}: {msg}")),
        Error::Domain(msg) => Error::Domain(format!("epoch {epoch}: {msg}")),
        other => other,
    }
}

/// One sample path of the stopping problem under `rule`.
pub fn rollout(problem: &StoppingProblem, rule: &dyn StopRule, seed: u64) -> Result<RolloutResult> {
    simulate(problem, rule, seed, true)
}

/// Seed of the `index`-th rollout of a batch.
pub fn batch_seed(seed: u64, index: usize) -> u64 {
    rng::stream_seed(seed, "batch", index as u64)
}

/// Sample costs of `batch` rollouts with decorrelated seeds derived from
/// `seed`. Rollout `b` uses the same seed for every rule, so differences
/// between rules are paired.
pub fn sample_costs(problem: &StoppingProblem, rule: &dyn StopRule, seed: u64, batch: usize) -> Result<Vec<f64>> {
    (0..batch)
        .map(|b| simulate(problem, rule, batch_seed(seed, b), false).map(|r| r.sample_cost))
        .collect()
}

/// Stopping times and sample costs of `batch` rollouts, seeded as in
/// [`sample_costs`].
pub fn sample_paths(problem: &StoppingProblem, rule: &dyn StopRule, seed: u64, batch: usize) -> Result<Vec<(usize, f64)>> {
    (0..batch)
        .map(|b| simulate(problem, rule, batch_seed(seed, b), false).map(|r| (r.tau, r.sample_cost)))
        .collect()
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl CostEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        CostEstimate {
            mean,
            std_err: (var / n as f64).sqrt(),
            samples: n,
        }
    }
}

/// Monte-Carlo estimate of the expected cost of `rule`.
pub fn evaluate_cost(problem: &StoppingProblem, rule: &dyn StopRule, seed: u64, batch: usize) -> Result<f64> {
    Ok(evaluate_cost_stats(problem, rule, seed, batch)?.mean)
}

pub fn evaluate_cost_stats(
    problem: &StoppingProblem,
    rule: &dyn StopRule,
    seed: u64,
    batch: usize,
) -> Result<CostEstimate> {
    if batch == 0 {
        return Err(Error::invalid("rollouts_per_eval", "must be at least 1"));
    }
    Ok(CostEstimate::from_samples(&sample_costs(problem, rule, seed, batch)?))
}

/// Cost of the policy that always stops at epoch `k_stop`.
pub fn periodic_policy_cost(problem: &StoppingProblem, k_stop: usize, seed: u64, batch: usize) -> Result<f64> {
    if k_stop < 1 || k_stop > problem.tau_max {
        return Err(Error::invalid("k_stop", format!("must lie in 1..={}", problem.tau_max)));
    }
    evaluate_cost(problem, &FixedTime(k_stop), seed, batch)
}

/// Costs of every fixed stopping time `1..=k_max`, all with the same seeds.
pub fn periodic_sweep(problem: &StoppingProblem, k_max: usize, seed: u64, batch: usize) -> Result<Vec<CostEstimate>> {
    if k_max < 1 || k_max > problem.tau_max {
        return Err(Error::invalid("kmax", format!("must lie in 1..={}", problem.tau_max)));
    }
    if batch == 0 {
        return Err(Error::invalid("rollouts_per_eval", "must be at least 1"));
    }
    // A fixed-time rule never looks at the belief, so one path of length
    // k_max carries the sample cost of every shorter stopping time.
    let c = problem.weights.operating_cost;
    let mut samples = vec![Vec::with_capacity(batch); k_max];
    for b in 0..batch {
        let path = simulate(problem, &FixedTime(k_max), batch_seed(seed, b), true)?;
        for (k, belief) in path.belief_trajectory.iter().enumerate() {
            samples[k].push(k as f64 * c + problem.stopping_cost(belief)?);
        }
    }
    Ok(samples.iter().map(|xs| CostEstimate::from_samples(xs)).collect())
}

/// A noisy scalar objective over an unconstrained parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn evaluate(&self, phi: &[f64], seed: u64) -> Result<f64>;

    /// Evaluation with an explicit Monte-Carlo budget, used to compare final
    /// candidates. Deterministic objectives ignore the budget.
    fn evaluate_batch(&self, phi: &[f64], seed: u64, _batch: usize) -> Result<f64> {
        self.evaluate(phi, seed)
    }
}

/// Expected rollout cost of a policy family, as a function of `phi`.
#[derive(Debug, Clone)]
pub struct PolicyObjective<'a> {
    pub problem: &'a StoppingProblem,
    pub template: PolicyParams,
    pub rollouts_per_eval: usize,
}

impl Objective for PolicyObjective<'_> {
    fn dim(&self) -> usize {
        self.template.phi().len()
    }

    fn evaluate(&self, phi: &[f64], seed: u64) -> Result<f64> {
        self.evaluate_batch(phi, seed, self.rollouts_per_eval)
    }

    fn evaluate_batch(&self, phi: &[f64], seed: u64, batch: usize) -> Result<f64> {
        let params = self.template.with_phi(phi.to_vec())?;
        evaluate_cost(self.problem, &params, seed, batch)
    }
}

/// Gain sequences and search budget of the SPSA recursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpsaSchedule {
    pub omega: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub s_offset: f64,
    pub zeta: f64,
    pub n_iterations: usize,
    pub n_restarts: usize,
    pub rollouts_per_eval: usize,
    /// Trailing window for choosing the best iterate of a restart.
    pub smoothing_window: usize,
    /// Rollouts used to compare the final candidates of all restarts.
    pub final_rollouts: usize,
    /// When set, `epsilon` is recomputed per restart so that the first step
    /// moves each coordinate by about this much on average.
    pub initial_step: Option<f64>,
}

impl Default for SpsaSchedule {
    fn default() -> Self {
        SpsaSchedule {
            omega: 0.5,
            gamma: 0.602,
            epsilon: 0.1,
            s_offset: 10.0,
            zeta: 0.801,
            n_iterations: 500,
            n_restarts: 8,
            rollouts_per_eval: 16,
            smoothing_window: 32,
            final_rollouts: 256,
            initial_step: None,
        }
    }
}

impl SpsaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0) {
            return Err(Error::invalid("omega", "must be positive"));
        }
        if !(0.5..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma", "must lie in [0.5, 1]"));
        }
        if !(self.zeta > 0.5 && self.zeta <= 1.0) {
            return Err(Error::invalid("zeta", "must lie in (0.5, 1]"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon", "must be positive"));
        }
        if !(self.s_offset > 0.0) {
            return Err(Error::invalid("s_offset", "must be positive"));
        }
        if self.rollouts_per_eval == 0 || self.final_rollouts == 0 {
            return Err(Error::invalid("rollouts_per_eval", "must be at least 1"));
        }
        if self.n_restarts == 0 || self.smoothing_window == 0 {
            return Err(Error::invalid("n_restarts", "restarts and smoothing window must be at least 1"));
        }
        if let Some(step) = self.initial_step {
            if !(step > 0.0) {
                return Err(Error::invalid("initial_step", "must be positive"));
            }
        }
        Ok(())
    }

    /// Perturbation size `ω / (n + 1)^γ`.
    pub fn perturbation(&self, n: usize) -> f64 {
        self.omega / ((n + 1) as f64).powf(self.gamma)
    }

    /// Step size `ε / (n + 1 + s)^ζ`.
    pub fn step(&self, epsilon: f64, n: usize) -> f64 {
        epsilon / ((n + 1) as f64 + self.s_offset).powf(self.zeta)
    }
}

/// Two-sided simultaneous-perturbation estimate with its two evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub gradient: Vec<f64>,
    pub cost_plus: f64,
    pub cost_minus: f64,
}

/// Rademacher direction for iteration `n`.
pub fn rademacher(dim: usize, seed: u64, n: usize) -> Vec<f64> {
    let mut rng = rng::stream(seed, "spsa-direction", n as u64);
    (0..dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

pub fn spsa_gradient_estimate(
    objective: &dyn Objective,
    phi: &[f64],
    n: usize,
    schedule: &SpsaSchedule,
    seed: u64,
) -> Result<GradientEstimate> {
    let d = rademacher(phi.len(), seed, n);
    let w = schedule.perturbation(n);
    let eval_seed = rng::stream_seed(seed, "spsa-eval", n as u64);
    let plus: Vec<f64> = phi.iter().zip(&d).map(|(p, di)| p + w * di).collect();
    let minus: Vec<f64> = phi.iter().zip(&d).map(|(p, di)| p - w * di).collect();
    let cost_plus = objective.evaluate(&plus, eval_seed)?;
    let cost_minus = objective.evaluate(&minus, eval_seed)?;
    let scale = (cost_plus - cost_minus) / (2.0 * w);
    Ok(GradientEstimate {
        gradient: d.iter().map(|di| scale * di).collect(),
        cost_plus,
        cost_minus,
    })
}

/// Gradient estimate at iteration `n`; both evaluations share one seed.
pub fn spsa_gradient(
    objective: &dyn Objective,
    phi: &[f64],
    n: usize,
    schedule: &SpsaSchedule,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(spsa_gradient_estimate(objective, phi, n, schedule, seed)?.gradient)
}

/// One row of the optimizer's cost trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub restart: usize,
    pub iteration: usize,
    pub phi: Vec<f64>,
    /// Mean of the two perturbed evaluations at this iterate.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub restart: usize,
    pub initial_phi: Vec<f64>,
    pub best_phi: Vec<f64>,
    pub best_smoothed_cost: f64,
    pub final_cost: f64,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpsaOutcome {
    pub best_phi: Vec<f64>,
    /// Cost of `best_phi` on the common final evaluation.
    pub best_cost: f64,
    pub restarts: Vec<RestartSummary>,
    pub trace: Vec<TraceRecord>,
}

/// Initial conditions drawn uniformly from `[-half_width, half_width]^dim`.
pub fn random_inits(dim: usize, count: usize, half_width: f64, seed: u64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|r| {
            let mut rng = rng::stream(seed, "spsa-init", r as u64);
            (0..dim).map(|_| rng.random_range(-half_width..=half_width)).collect()
        })
        .collect()
}

/// Range of the random initial parameters for a family.
///
/// Angles cover the whole sphere. Eigenvalue weights are scaled so that a
/// typical weight times a typical initial eigenvalue is of order one, which
/// keeps the initial statistic near the threshold.
pub fn init_half_width(problem: &StoppingProblem, family: PolicyFamily) -> f64 {
    if !family.is_eigen() {
        return std::f64::consts::PI;
    }
    let m = problem.state_dim() as f64;
    let mean_eig = problem.initial.posterior.iter().map(|p| p.trace() / m).sum::<f64>() / problem.num_targets() as f64;
    if mean_eig > 0.0 {
        mean_eig.sqrt().recip()
    } else {
        1.0
    }
}

/// Initial parameters for the eigen families placed on the stopping
/// boundary.
///
/// The eigen statistics are homogeneous of degree two in `phi`, and a rule
/// that has not stopped yet sees the same beliefs as the continue-forever
/// rule. So along pilot paths of the best fixed stopping time `k*`, scaling
/// a random direction by `s` multiplies its running statistic by `s²`. Each
/// direction is scaled so that the median statistic at `k*` equals 1.
/// Directions whose statistic is not positive there, or that would already
/// stop at epoch 1, are redrawn; after repeated failures the uniform
/// initialization is used instead.
pub fn anchored_inits(
    problem: &StoppingProblem,
    template: &PolicyParams,
    count: usize,
    pilot_rollouts: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    const MAX_DRAWS: usize = 64;
    const ANCHOR_MARGIN: f64 = 0.9;
    let dim = template.phi().len();
    let width = init_half_width(problem, template.family());
    if !template.family().is_eigen() || dim == 0 {
        return Ok(random_inits(dim, count, width, seed));
    }
    let pilot_seed = rng::stream_seed(seed, "anchor-pilot", 0);
    let paths: Vec<Vec<Belief>> = (0..pilot_rollouts.max(1))
        .map(|b| simulate(problem, &FixedTime(problem.tau_max), batch_seed(pilot_seed, b), true).map(|r| r.belief_trajectory))
        .collect::<Result<_>>()?;
    let c = problem.weights.operating_cost;
    let mut mean_cost = vec![0.0; problem.tau_max];
    for path in &paths {
        for (k, belief) in path.iter().enumerate() {
            mean_cost[k] += k as f64 * c + problem.stopping_cost(belief)?;
        }
    }
    let k_star = mean_cost
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map_or(1, |(k, _)| k + 1);
    let fallback = random_inits(dim, count, width, seed);
    (0..count)
        .map(|r| {
            let mut rng = rng::stream(seed, "anchor-direction", r as u64);
            for _ in 0..MAX_DRAWS {
                let dir: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let params = template.with_phi(dir.clone())?;
                let first = decision_statistic(&problem.initial, &params);
                let mut at_k: Vec<f64> = paths.iter().map(|path| decision_statistic(&path[k_star - 1], &params)).collect();
                at_k.sort_by(f64::total_cmp);
                let median = at_k[at_k.len() / 2];
                if median > 0.0 && median.is_finite() && first < ANCHOR_MARGIN * median {
                    let scale = median.sqrt().recip();
                    return Ok(dir.iter().map(|v| v * scale).collect());
                }
            }
            Ok(fallback[r].clone())
        })
        .collect()
}

fn calibrated_epsilon(
    objective: &dyn Objective,
    phi: &[f64],
    schedule: &SpsaSchedule,
    target_step: f64,
    seed: u64,
) -> Result<f64> {
    const PROBES: usize = 4;
    let mut total = 0.0;
    for k in 0..PROBES {
        let g = spsa_gradient(objective, phi, k, schedule, rng::stream_seed(seed, "spsa-calibrate", k as u64))?;
        total += g.first().map_or(0.0, |v| v.abs());
    }
    let mean = total / PROBES as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return Ok(schedule.epsilon);
    }
    Ok(target_step * (1.0 + schedule.s_offset).powf(schedule.zeta) / mean)
}

/// Stochastic-approximation search over `phi`, restarted from each initial
/// condition.
///
/// Within a restart the candidate is the iterate ending the window of
/// lowest trailing-mean cost. The candidates of all restarts, together with
/// their initial conditions, are then compared on one common evaluation and
/// the cheapest wins. A restart that produces a non-finite cost is abandoned
/// and contributes only its initial condition.
pub fn spsa_optimize(
    objective: &dyn Objective,
    inits: &[Vec<f64>],
    schedule: &SpsaSchedule,
    seed: u64,
) -> Result<SpsaOutcome> {
    schedule.validate()?;
    if inits.is_empty() {
        return Err(Error::invalid("inits", "at least one initial condition is required"));
    }
    let dim = objective.dim();
    if inits.iter().any(|p| p.len() != dim) {
        return Err(Error::dim("spsa_optimize", format!("initial conditions must have {dim} entries")));
    }
    let final_seed = rng::stream_seed(seed, "spsa-final", 0);
    let mut trace = Vec::new();
    let mut restarts = Vec::new();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let consider = |cost: f64, phi: &[f64], best: &mut Option<(f64, Vec<f64>)>| {
        if cost.is_finite() && best.as_ref().is_none_or(|(c, _)| cost < *c) {
            *best = Some((cost, phi.to_vec()));
        }
    };

    for (r, init) in inits.iter().enumerate() {
        let restart_seed = rng::stream_seed(seed, "spsa-restart", r as u64);
        let epsilon = match schedule.initial_step {
            Some(step) if dim > 0 => calibrated_epsilon(objective, init, schedule, step, restart_seed)?,
            _ => schedule.epsilon,
        };
        let mut phi = init.clone();
        let mut window: std::collections::VecDeque<f64> = std::collections::VecDeque::new();
        let mut best_smoothed = f64::INFINITY;
        let mut candidate = init.clone();
        let mut aborted = false;
        for n in 0..schedule.n_iterations {
            let est = spsa_gradient_estimate(objective, &phi, n, schedule, restart_seed)?;
            let cost = 0.5 * (est.cost_plus + est.cost_minus);
            if !cost.is_finite() || est.gradient.iter().any(|g| !g.is_finite()) {
                aborted = true;
                break;
            }
            trace.push(TraceRecord {
                restart: r,
                iteration: n,
                phi: phi.clone(),
                cost,
            });
            window.push_back(cost);
            if window.len() > schedule.smoothing_window {
                window.pop_front();
            }
            let smoothed = window.iter().sum::<f64>() / window.len() as f64;
            if smoothed < best_smoothed {
                best_smoothed = smoothed;
                candidate = phi.clone();
            }
            let a = schedule.step(epsilon, n + 1);
            for (p, g) in phi.iter_mut().zip(&est.gradient) {
                *p -= a * g;
            }
        }
        let init_cost = objective.evaluate_batch(init, final_seed, schedule.final_rollouts)?;
        consider(init_cost, init, &mut best);
        let final_cost = if aborted || candidate == *init {
            init_cost
        } else {
            let c = objective.evaluate_batch(&candidate, final_seed, schedule.final_rollouts)?;
            consider(c, &candidate, &mut best);
            c
        };
        restarts.push(RestartSummary {
            restart: r,
            initial_phi: init.clone(),
            best_phi: if aborted { init.clone() } else { candidate },
            best_smoothed_cost: best_smoothed,
            final_cost,
            aborted,
        });
    }
    let (best_cost, best_phi) =
        best.ok_or_else(|| Error::Numerical("every initial condition produced a non-finite cost".into()))?;
    Ok(SpsaOutcome {
        best_phi,
        best_cost,
        restarts,
        trace,
    })
}

/// SPSA over a policy family with the schedule's batch size and random
/// initial conditions.
pub fn optimize_policy(
    problem: &StoppingProblem,
    template: &PolicyParams,
    schedule: &SpsaSchedule,
    seed: u64,
) -> Result<(PolicyParams, SpsaOutcome)> {
    let objective = PolicyObjective {
        problem,
        template: template.clone(),
        rollouts_per_eval: schedule.rollouts_per_eval,
    };
    let inits = anchored_inits(
        problem,
        template,
        schedule.n_restarts,
        schedule.rollouts_per_eval,
        rng::stream_seed(seed, "inits", 0),
    )?;
    // The eigen weights live on a problem-dependent scale; searching in
    // units of that scale lets one set of gains serve every problem.
    let scale = if template.family().is_eigen() { phi_scale(&inits) } else { 1.0 };
    let scaled = Scaled { inner: &objective, scale };
    let unit_inits: Vec<Vec<f64>> = inits.iter().map(|phi| phi.iter().map(|v| v / scale).collect()).collect();
    let mut outcome = spsa_optimize(&scaled, &unit_inits, schedule, seed)?;
    let rescale = |phi: &mut Vec<f64>| phi.iter_mut().for_each(|v| *v *= scale);
    rescale(&mut outcome.best_phi);
    for r in &mut outcome.restarts {
        rescale(&mut r.initial_phi);
        rescale(&mut r.best_phi);
    }
    for t in &mut outcome.trace {
        rescale(&mut t.phi);
    }
    Ok((template.with_phi(outcome.best_phi.clone())?, outcome))
}

/// Root-mean-square entry of a set of parameter vectors, or 1 when they are
/// all zero.
fn phi_scale(inits: &[Vec<f64>]) -> f64 {
    let (sum, n) = inits
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    let rms = if n > 0 { (sum / n as f64).sqrt() } else { 0.0 };
    if rms > 0.0 && rms.is_finite() {
        rms
    } else {
        1.0
    }
}

/// `inner` evaluated at `scale · u`.
struct Scaled<'a> {
    inner: &'a dyn Objective,
    scale: f64,
}

impl Scaled<'_> {
    fn unscale(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|v| v * self.scale).collect()
    }
}

impl Objective for Scaled<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn evaluate(&self, u: &[f64], seed: u64) -> Result<f64> {
        self.inner.evaluate(&self.unscale(u), seed)
    }

    fn evaluate_batch(&self, u: &[f64], seed: u64, batch: usize) -> Result<f64> {
        self.inner.evaluate_batch(&self.unscale(u), seed, batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter_core::Covariance;
    use crate::observability::Aggregation;
    use crate::policy::{ParamLayout, PolicyFamily};
    use nalgebra::DMatrix;

    struct Linear(Vec<f64>);
    impl Objective for Linear {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn evaluate(&self, phi: &[f64], _seed: u64) -> Result<f64> {
            Ok(self.0.iter().zip(phi).map(|(c, p)| c * p).sum())
        }
    }

    struct Bowl(Vec<f64>);
    impl Objective for Bowl {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn evaluate(&self, phi: &[f64], _seed: u64) -> Result<f64> {
            Ok(self.0.iter().zip(phi).map(|(c, p)| (p - c).powi(2)).sum())
        }
    }

    fn scalar_problem(pd: f64) -> StoppingProblem {
        let m = |v| DMatrix::from_element(1, 1, v);
        let model = TargetModel::new(m(1.0), m(1.0), m(1.0), m(1.0), m(1.0), pd, 1.0).unwrap();
        let s = |v| Covariance::scalar(v).unwrap();
        StoppingProblem::new(
            vec![model.clone(), model],
            vec![1.0, 0.0],
            CostWeights::new(vec![0.0, 0.0], vec![1.0, 1.0], 0.8, Aggregation::AvgDiff).unwrap(),
            Belief::from_posteriors(vec![s(20.0), s(1.5)], 0).unwrap(),
            30,
        )
        .unwrap()
    }

    #[test]
    fn anchored_inits_neither_stop_at_once_nor_run_to_the_bound() {
        let problem = scalar_problem(0.75);
        for family in [PolicyFamily::EigenMax, PolicyFamily::EigenSum] {
            let layout = ParamLayout::PER_TARGET;
            let template = PolicyParams::from_phi(family, layout, 2, 1, vec![0.0; crate::policy::param_dim(family, layout, 2, 1)]).unwrap();
            for phi in anchored_inits(&problem, &template, 6, 32, 4).unwrap() {
                let params = template.with_phi(phi).unwrap();
                assert_eq!(decide(&problem.initial, &params), Action::Continue);
                let paths = sample_paths(&problem, &params, 8, 64).unwrap();
                let mean_tau = paths.iter().map(|p| p.0 as f64).sum::<f64>() / paths.len() as f64;
                assert!(mean_tau > 1.0 && mean_tau < problem.tau_max as f64, "{family:?}: {mean_tau}");
            }
        }
    }

    #[test]
    fn quadform_inits_are_uniform_angles() {
        let problem = scalar_problem(0.75);
        let layout = ParamLayout::PER_TARGET;
        let template = PolicyParams::from_phi(PolicyFamily::QuadForm, layout, 2, 1, vec![]).unwrap();
        assert_eq!(anchored_inits(&problem, &template, 3, 8, 1).unwrap(), vec![Vec::<f64>::new(); 3]);
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let g = spsa_gradient(&Linear(vec![0.0; 3]), &[0.3, 0.1, -2.0], 4, &SpsaSchedule::default(), 9).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn bowl_gradient_vanishes_at_center() {
        for n in 0..10 {
            let g = spsa_gradient(&Bowl(vec![0.0, 0.0]), &[0.0, 0.0], n, &SpsaSchedule::default(), 1).unwrap();
            assert_eq!(g, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn linear_gradient_is_projection() {
        let c = vec![1.5, -0.5, 2.0];
        let sched = SpsaSchedule::default();
        let g = spsa_gradient(&Linear(c.clone()), &[0.0; 3], 2, &sched, 5).unwrap();
        let d = rademacher(3, 5, 2);
        let cd: f64 = c.iter().zip(&d).map(|(a, b)| a * b).sum();
        for (gi, di) in g.iter().zip(&d) {
            assert!((gi - cd * di).abs() < 1e-12);
        }
    }

    #[test]
    fn bowl_converges() {
        let sched = SpsaSchedule {
            epsilon: 1.0,
            n_iterations: 2000,
            n_restarts: 1,
            smoothing_window: 1,
            ..SpsaSchedule::default()
        };
        let out = spsa_optimize(&Bowl(vec![1.0, -2.0]), &[vec![0.0, 0.0]], &sched, 3).unwrap();
        assert!((out.best_phi[0] - 1.0).abs() < 1e-2 && (out.best_phi[1] + 2.0).abs() < 1e-2);
        assert_eq!(out.trace.len(), 2000);
    }

    #[test]
    fn zero_iterations_pick_best_init() {
        let sched = SpsaSchedule {
            n_iterations: 0,
            ..SpsaSchedule::default()
        };
        let inits = vec![vec![3.0], vec![0.5], vec![-1.0]];
        let out = spsa_optimize(&Bowl(vec![0.0]), &inits, &sched, 0).unwrap();
        assert_eq!(out.best_phi, vec![0.5]);
    }

    #[test]
    fn schedule_ranges_enforced() {
        let bad = SpsaSchedule {
            gamma: 0.4,
            ..SpsaSchedule::default()
        };
        assert!(bad.validate().is_err());
        let bad = SpsaSchedule {
            zeta: 0.5,
            ..SpsaSchedule::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn immediate_and_never_stop() {
        let problem = scalar_problem(0.75);
        let r = rollout(&problem, &FixedTime(1), 4).unwrap();
        assert_eq!(r.tau, 1);
        assert!(!r.truncated);
        assert_eq!(r.sample_cost, problem.stopping_cost(&problem.initial).unwrap());
        let never = PolicyParams::from_phi(PolicyFamily::EigenSum, ParamLayout::PER_TARGET, 2, 1, vec![0.0; 4]).unwrap();
        let r = rollout(&problem, &never, 4).unwrap();
        assert_eq!(r.tau, 30);
        assert!(r.truncated);
        let last = r.belief_trajectory.last().unwrap();
        assert_eq!(r.sample_cost, 29.0 * 0.8 + problem.stopping_cost(last).unwrap());
    }

    #[test]
    fn certain_detection_is_seed_free() {
        let problem = scalar_problem(1.0);
        let a = evaluate_cost(&problem, &FixedTime(5), 1, 4).unwrap();
        let b = evaluate_cost(&problem, &FixedTime(5), 99, 4).unwrap();
        assert_eq!(a, b);
        let mut pa = 20.0f64;
        let mut pl = 1.5f64;
        for _ in 0..4 {
            pa = pa + 1.0 - pa * pa / (pa + 1.0);
            pl += 1.0;
        }
        assert!((a - (4.0 * 0.8 + pa.ln() - pl.ln())).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_matches_rollout() {
        let problem = scalar_problem(0.75);
        let r = rollout(&problem, &FixedTime(6), batch_seed(11, 0)).unwrap();
        assert_eq!(evaluate_cost(&problem, &FixedTime(6), 11, 1).unwrap(), r.sample_cost);
    }

    #[test]
    fn periodic_bounds() {
        let problem = scalar_problem(0.75);
        assert!(periodic_policy_cost(&problem, 0, 1, 1).is_err());
        assert!(periodic_policy_cost(&problem, 31, 1, 1).is_err());
        assert_eq!(periodic_sweep(&problem, 5, 1, 3).unwrap().len(), 5);
    }

    #[test]
    fn sweep_matches_individual_fixed_times() {
        let problem = scalar_problem(0.75);
        let sweep = periodic_sweep(&problem, 8, 5, 20).unwrap();
        for (i, est) in sweep.iter().enumerate() {
            let direct = evaluate_cost_stats(&problem, &FixedTime(i + 1), 5, 20).unwrap();
            assert!((est.mean - direct.mean).abs() < 1e-12);
            assert!((est.std_err - direct.std_err).abs() < 1e-12);
        }
    }
}
