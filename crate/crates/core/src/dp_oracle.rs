//! Value iteration for the scalar two-target stopping problem.
//!
//! With one-dimensional states and two targets the belief is a handful of
//! positive scalars, so the Bellman equation can be solved on a log-spaced
//! grid. The result is an independent reference for the structure of the
//! optimal policy and for the costs reached by the parametrized policies.
//!
//! Everything here is written in closed scalar form on purpose, without
//! going through the matrix code of the other modules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter_core::{Covariance, TargetModel};
use crate::observability::{Belief, CostWeights};
use crate::optimizer::{StopRule, StoppingProblem};
use crate::policy::Action;

/// Scalar linear-Gaussian target with missed detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarTarget {
    pub f: f64,
    pub h: f64,
    pub q: f64,
    pub r: f64,
    pub detection_prob: f64,
}

impl ScalarTarget {
    fn validate(&self, field: &str) -> Result<()> {
        if !(self.q > 0.0) || !(self.r > 0.0) {
            return Err(Error::invalid(field, "q and r must be positive"));
        }
        if !(0.0..=1.0).contains(&self.detection_prob) || !self.f.is_finite() || !self.h.is_finite() {
            return Err(Error::invalid(field, "detection probability must lie in [0, 1] and f, h be finite"));
        }
        Ok(())
    }

    fn predict(&self, p: f64) -> f64 {
        self.f * self.f * p + self.q
    }

    fn correct(&self, p: f64, priority: f64) -> f64 {
        let r = self.r / priority;
        let fph = self.f * p * self.h;
        self.predict(p) - fph * fph / (self.h * self.h * p + r)
    }
}

/// Log-spaced grid on `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl LogGrid {
    pub fn new(min: f64, max: f64, points: usize) -> Result<Self> {
        let g = LogGrid { min, max, points };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.max > self.min) || self.points < 1 {
            return Err(Error::invalid("grid", "need 0 < min < max and at least one point"));
        }
        Ok(())
    }

    pub fn value(&self, i: usize) -> f64 {
        if self.points == 1 {
            return self.min;
        }
        let t = i as f64 / (self.points - 1) as f64;
        (self.min.ln() + t * (self.max.ln() - self.min.ln())).exp()
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.value(i)).collect()
    }

    /// Lower cell index and weight of the upper neighbour, clamped to the
    /// grid.
    fn locate(&self, v: f64) -> (usize, f64) {
        if self.points == 1 {
            return (0, 0.0);
        }
        let n = self.points - 1;
        let t = (v.ln() - self.min.ln()) / (self.max.ln() - self.min.ln()) * n as f64;
        let t = t.clamp(0.0, n as f64);
        let i = (t.floor() as usize).min(n - 1);
        (i, t - i as f64)
    }

    fn contains(&self, v: f64) -> bool {
        let tol = 1e-12 * self.max;
        v >= self.min * (1.0 - 1e-12) && v <= self.max + tol
    }
}

/// Scalar stopping problem for a leader and one other target.
///
/// With `alpha ≡ 0` priors do not enter the cost and the table is over
/// `(P^a, P^o)`. Otherwise the table is four-dimensional over
/// `(P^a, P̄^a, P^o, P̄^o)` and `prior_grid` must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarStopModel {
    pub leader: ScalarTarget,
    pub other: ScalarTarget,
    /// Priorities of leader and other.
    pub priorities: [f64; 2],
    /// Two entries: leader first.
    pub weights: CostWeights,
    pub grid: LogGrid,
    pub prior_grid: Option<LogGrid>,
}

/// Full scalar belief `(P^a, P̄^a, P^o, P̄^o)`.
pub type ScalarBelief = [f64; 4];

impl ScalarStopModel {
    /// `f = h = q = r = 1`, detection 0.75 for both, all resources to the
    /// leader, entropy weights `β = 1` and operating cost 0.8 on a 128×128
    /// grid over `[1e-2, 1e3]`.
    pub fn reference() -> Self {
        let t = ScalarTarget {
            f: 1.0,
            h: 1.0,
            q: 1.0,
            r: 1.0,
            detection_prob: 0.75,
        };
        ScalarStopModel {
            leader: t,
            other: t,
            priorities: [1.0, 0.0],
            weights: CostWeights {
                alpha: vec![0.0, 0.0],
                beta: vec![1.0, 1.0],
                operating_cost: 0.8,
                aggregation: crate::observability::Aggregation::AvgDiff,
            },
            grid: LogGrid {
                min: 1e-2,
                max: 1e3,
                points: 128,
            },
            prior_grid: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.leader.validate("leader")?;
        self.other.validate("other")?;
        self.weights.validate()?;
        if self.weights.num_targets() != 2 {
            return Err(Error::invalid("weights", "exactly two targets are required"));
        }
        crate::optimizer::validate_priorities(&self.priorities)?;
        self.grid.validate()?;
        if self.uses_priors() {
            self.prior_grid
                .ok_or_else(|| Error::invalid("prior_grid", "required when alpha is nonzero"))?
                .validate()?;
        }
        Ok(())
    }

    pub fn uses_priors(&self) -> bool {
        self.weights.alpha.iter().any(|a| *a != 0.0)
    }

    fn axes(&self) -> Vec<LogGrid> {
        match (self.uses_priors(), self.prior_grid) {
            (true, Some(pg)) => vec![self.grid, pg, self.grid, pg],
            _ => vec![self.grid, self.grid],
        }
    }

    fn to_coords(&self, b: &ScalarBelief) -> Vec<f64> {
        if self.uses_priors() {
            b.to_vec()
        } else {
            vec![b[0], b[2]]
        }
    }

    fn belief_at(&self, c: &[f64]) -> ScalarBelief {
        if c.len() == 4 {
            [c[0], c[1], c[2], c[3]]
        } else {
            [c[0], c[0], c[1], c[1]]
        }
    }

    /// `−α^a log P̄^a + β^a log P^a + α^o log P̄^o − β^o log P^o`.
    pub fn stopping_cost(&self, b: &ScalarBelief) -> f64 {
        let (a, be) = (&self.weights.alpha, &self.weights.beta);
        -a[0] * b[1].ln() + be[0] * b[0].ln() + a[1] * b[3].ln() - be[1] * b[2].ln()
    }

    /// Successor beliefs with their probabilities.
    pub fn successors(&self, b: &ScalarBelief) -> Vec<(ScalarBelief, f64)> {
        let branches = |t: &ScalarTarget, nu: f64, p: f64| -> Vec<(f64, f64)> {
            let pd = if nu > 0.0 { t.detection_prob } else { 0.0 };
            let mut out = Vec::with_capacity(2);
            if pd > 0.0 {
                out.push((t.correct(p, nu), pd));
            }
            if pd < 1.0 {
                out.push((t.predict(p), 1.0 - pd));
            }
            out
        };
        let prior_a = self.leader.predict(b[1]);
        let prior_o = self.other.predict(b[3]);
        let mut out = Vec::with_capacity(4);
        for (pa, qa) in branches(&self.leader, self.priorities[0], b[0]) {
            for (po, qo) in branches(&self.other, self.priorities[1], b[2]) {
                out.push(([pa, prior_a, po, prior_o], qa * qo));
            }
        }
        out
    }

    /// `c_ν − C̄(P) + Σ_z q_z C̄(next(P, z))`.
    pub fn running_cost(&self, b: &ScalarBelief) -> f64 {
        let expected: f64 = self
            .successors(b)
            .iter()
            .map(|(n, q)| q * self.stopping_cost(n))
            .sum();
        self.weights.operating_cost - self.stopping_cost(b) + expected
    }

    /// The same problem in matrix form, started at `initial`.
    pub fn stopping_problem(&self, initial: &ScalarBelief, tau_max: usize) -> Result<StoppingProblem> {
        let m = |v: f64| nalgebra::DMatrix::from_element(1, 1, v);
        let model = |t: &ScalarTarget| TargetModel::new(m(t.f), m(1.0), m(t.h), m(t.q), m(t.r), t.detection_prob, 1.0);
        let c = |v: f64| Covariance::scalar(v);
        StoppingProblem::new(
            vec![model(&self.leader)?, model(&self.other)?],
            self.priorities.to_vec(),
            self.weights.clone(),
            Belief::new(vec![c(initial[0])?, c(initial[2])?], vec![c(initial[1])?, c(initial[3])?], 0)?,
            tau_max,
        )
    }

    fn num_states(&self) -> usize {
        self.axes().iter().map(|g| g.points).product()
    }

    fn unflatten(&self, mut s: usize) -> Vec<usize> {
        self.axes()
            .iter()
            .map(|g| {
                let i = s % g.points;
                s /= g.points;
                i
            })
            .collect()
    }

    fn state_belief(&self, s: usize) -> ScalarBelief {
        let axes = self.axes();
        let coords: Vec<f64> = self.unflatten(s).iter().zip(&axes).map(|(i, g)| g.value(*i)).collect();
        self.belief_at(&coords)
    }

    /// Multilinear interpolation corners `(flat index, weight)` of `b`,
    /// clamped to the grid.
    fn corners(&self, b: &ScalarBelief) -> Vec<(usize, f64)> {
        let axes = self.axes();
        let coords = self.to_coords(b);
        let mut out = vec![(0usize, 1.0f64)];
        let mut stride = 1;
        for (g, v) in axes.iter().zip(coords) {
            let (i, w) = g.locate(v);
            let mut next = Vec::with_capacity(out.len() * 2);
            for (idx, wt) in &out {
                next.push((idx + i * stride, wt * (1.0 - w)));
                if w > 0.0 {
                    next.push((idx + (i + 1) * stride, wt * w));
                }
            }
            out = next;
            stride *= g.points;
        }
        out
    }

    fn interpolate(&self, values: &[f64], b: &ScalarBelief) -> f64 {
        self.corners(b).iter().map(|(i, w)| w * values[*i]).sum()
    }

    fn in_grid(&self, b: &ScalarBelief) -> bool {
        self.axes().iter().zip(self.to_coords(b)).all(|(g, v)| g.contains(v))
    }
}

/// Converged value function and continuation values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub model: ScalarStopModel,
    /// `V = min(0, Q(·, continue))` in shifted coordinates.
    pub values: Vec<f64>,
    /// `Q(·, continue)`; `Q(·, stop)` is identically zero.
    pub continue_values: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves `V(P) = min{0, C(P) + Σ_z q_z V(next(P, z))}` from
/// `V₀ = −C̄` until the sup-norm change falls below `tol`.
pub fn value_iterate(model: &ScalarStopModel, tol: f64, max_iters: usize) -> Result<QTable> {
    model.validate()?;
    let n = model.num_states();
    let mut running = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n + 1);
    let mut stencil: Vec<(u32, f64)> = Vec::new();
    let mut values = Vec::with_capacity(n);
    offsets.push(0);
    for s in 0..n {
        let b = model.state_belief(s);
        running.push(model.running_cost(&b));
        values.push(-model.stopping_cost(&b));
        for (next, q) in model.successors(&b) {
            for (i, w) in model.corners(&next) {
                stencil.push((i as u32, q * w));
            }
        }
        offsets.push(stencil.len());
    }

    let mut continue_values = vec![0.0; n];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        residual = 0.0;
        let mut next_values = vec![0.0; n];
        for s in 0..n {
            let expect: f64 = stencil[offsets[s]..offsets[s + 1]]
                .iter()
                .map(|(i, w)| w * values[*i as usize])
                .sum();
            let q = running[s] + expect;
            continue_values[s] = q;
            let v = q.min(0.0);
            residual = f64::max(residual, (v - values[s]).abs());
            next_values[s] = v;
        }
        values = next_values;
        if !residual.is_finite() {
            return Err(Error::Numerical("value iteration diverged".into()));
        }
        if residual < tol {
            // Continuation values consistent with the returned fixed point.
            for s in 0..n {
                continue_values[s] = running[s]
                    + stencil[offsets[s]..offsets[s + 1]]
                        .iter()
                        .map(|(i, w)| w * values[*i as usize])
                        .sum::<f64>();
            }
            return Ok(QTable {
                model: model.clone(),
                values,
                continue_values,
                iterations,
                residual,
            });
        }
    }
    Err(Error::Convergence { iterations, residual })
}

impl QTable {
    /// A table with given continuation values, for constructing fixtures.
    pub fn from_continue_values(model: ScalarStopModel, continue_values: Vec<f64>) -> Result<Self> {
        model.validate()?;
        if continue_values.len() != model.num_states() {
            return Err(Error::dim("QTable", format!("expected {} values", model.num_states())));
        }
        Ok(QTable {
            values: continue_values.iter().map(|q| q.min(0.0)).collect(),
            continue_values,
            model,
            iterations: 0,
            residual: 0.0,
        })
    }

    /// Stop when continuing costs at least as much as stopping.
    pub fn action(&self, s: usize) -> Action {
        if self.continue_values[s] >= 0.0 {
            Action::Stop
        } else {
            Action::Continue
        }
    }

    /// `Q(P, continue)` at an arbitrary belief, with successors clamped to
    /// the grid.
    pub fn continue_value(&self, b: &ScalarBelief) -> f64 {
        let m = &self.model;
        m.running_cost(b)
            + m.successors(b)
                .iter()
                .map(|(n, q)| q * m.interpolate(&self.values, n))
                .sum::<f64>()
    }

    fn posterior_index(&self, ia: usize, io: usize) -> Option<usize> {
        if self.model.uses_priors() {
            None
        } else {
            Some(ia + io * self.model.grid.points)
        }
    }

    /// Largest Bellman residual over the grid.
    pub fn bellman_residual(&self) -> f64 {
        let m = &self.model;
        (0..m.num_states())
            .map(|s| {
                let b = m.state_belief(s);
                let q = m.running_cost(&b)
                    + m.successors(&b)
                        .iter()
                        .map(|(n, q)| q * m.interpolate(&self.values, n))
                        .sum::<f64>();
                (q.min(0.0) - self.values[s]).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// For every grid value of the other target's covariance, the least leader
/// covariance at which continuing is optimal.
///
/// A column where stopping is optimal everywhere maps to the grid maximum;
/// a column where continuing is optimal everywhere maps to the grid minimum.
pub fn extract_threshold(table: &QTable) -> Result<Vec<(f64, f64)>> {
    if table.model.uses_priors() {
        return Err(Error::invalid("qtable", "thresholds are defined for the two-dimensional table only"));
    }
    let g = table.model.grid;
    Ok((0..g.points)
        .map(|io| {
            let first = (0..g.points).find(|&ia| table.action(table.posterior_index(ia, io).unwrap()) == Action::Continue);
            (g.value(io), first.map_or(g.max, |ia| g.value(ia)))
        })
        .collect())
}

/// Counts adjacent grid pairs where the action moves toward Stop as the
/// leader covariance grows, or toward Continue as the other covariance
/// grows. Four-dimensional tables are checked along the posterior axes at
/// every prior grid point.
pub fn check_monotone_policy(table: &QTable) -> usize {
    let axes = table.model.axes();
    let n: usize = axes.iter().map(|g| g.points).product();
    let (leader_axis, other_axis) = if axes.len() == 4 { (0, 2) } else { (0, 1) };
    let stride = |axis: usize| axes[..axis].iter().map(|g| g.points).product::<usize>();
    let mut count = 0;
    for s in 0..n {
        let idx = table.model.unflatten(s);
        if idx[leader_axis] + 1 < axes[leader_axis].points {
            let up = s + stride(leader_axis);
            if table.action(up) < table.action(s) {
                count += 1;
            }
        }
        if idx[other_axis] + 1 < axes[other_axis].points {
            let up = s + stride(other_axis);
            if table.action(up) > table.action(s) {
                count += 1;
            }
        }
    }
    count
}

/// Optimal expected cost from `initial` in original coordinates.
pub fn optimal_cost(table: &QTable, initial: &ScalarBelief) -> Result<f64> {
    if !table.model.in_grid(initial) {
        return Err(Error::Domain(format!("belief {initial:?} lies outside the grid")));
    }
    Ok(table.model.interpolate(&table.values, initial) + table.model.stopping_cost(initial))
}

/// Stops exactly when the table says continuing is not cheaper.
#[derive(Debug, Clone)]
pub struct GreedyPolicy<'a> {
    pub table: &'a QTable,
}

impl StopRule for GreedyPolicy<'_> {
    fn decide(&self, belief: &Belief, _epoch: usize) -> Action {
        let a = belief.leader;
        let o = 1 - a;
        let s = |c: &Covariance| c.matrix()[(0, 0)];
        let b = [s(&belief.posterior[a]), s(&belief.prior[a]), s(&belief.posterior[o]), s(&belief.prior[o])];
        if self.table.continue_value(&b) >= 0.0 {
            Action::Stop
        } else {
            Action::Continue
        }
    }
}
