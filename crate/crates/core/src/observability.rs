//! Mutual-information stopping costs.
//!
//! For Gaussian beliefs the stochastic observability of a target reduces to
//! `α log|P̄| − β log|P|`, with `P̄` the measurement-free predicted
//! covariance and `P` the tracked posterior. The stopping cost compares the
//! leader (highest-priority target) against an aggregate over the others.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter_core::{lyapunov_update, riccati_update, Covariance, DetectionOutcome, TargetModel};

/// How the non-leader terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Largest mutual information among the other targets.
    MaxDiff,
    /// Smallest mutual information among the other targets.
    MinDiff,
    /// Plain sum over the other targets.
    AvgDiff,
}

/// Per-target weights and the radar operating cost.
///
/// With `alpha ≡ 0` and [`Aggregation::AvgDiff`] the stopping cost is the
/// conditional-entropy difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub operating_cost: f64,
    pub aggregation: Aggregation,
}

impl CostWeights {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>, operating_cost: f64, aggregation: Aggregation) -> Result<Self> {
        let w = CostWeights {
            alpha,
            beta,
            operating_cost,
            aggregation,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() != self.beta.len() {
            return Err(Error::invalid("weights", "alpha and beta differ in length"));
        }
        if self.alpha.len() < 2 {
            return Err(Error::invalid("weights", "at least two targets are required"));
        }
        if self.alpha.iter().chain(&self.beta).any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("weights", "alpha and beta must be finite and nonnegative"));
        }
        if !(self.operating_cost > 0.0) || !self.operating_cost.is_finite() {
            return Err(Error::invalid("operating_cost", "must be positive"));
        }
        Ok(())
    }

    pub fn num_targets(&self) -> usize {
        self.alpha.len()
    }

    /// Swaps entries 0 and `leader`, so that role-based weights (entry 0 for
    /// the leader, the rest for everyone else) follow a changing leader.
    pub fn rotated_to_leader(&self, leader: usize) -> Self {
        let mut w = self.clone();
        w.alpha.swap(0, leader);
        w.beta.swap(0, leader);
        w
    }
}

/// Posterior and prior covariances of every target plus the leader index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Belief {
    pub posterior: Vec<Covariance>,
    pub prior: Vec<Covariance>,
    pub leader: usize,
}

impl Belief {
    pub fn new(posterior: Vec<Covariance>, prior: Vec<Covariance>, leader: usize) -> Result<Self> {
        let b = Belief {
            posterior,
            prior,
            leader,
        };
        b.validate()?;
        Ok(b)
    }

    /// A belief whose priors start equal to the posteriors.
    pub fn from_posteriors(posterior: Vec<Covariance>, leader: usize) -> Result<Self> {
        let prior = posterior.clone();
        Self::new(posterior, prior, leader)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.posterior.len();
        if n < 2 {
            return Err(Error::invalid("belief", "at least two targets are required"));
        }
        if self.prior.len() != n {
            return Err(Error::invalid("belief", "prior and posterior lists differ in length"));
        }
        if self.leader >= n {
            return Err(Error::invalid("belief.leader", format!("{} out of range for {n} targets", self.leader)));
        }
        for (p, q) in self.posterior.iter().zip(&self.prior) {
            if p.dim() != q.dim() {
                return Err(Error::dim("Belief", "prior and posterior dimensions differ"));
            }
        }
        Ok(())
    }

    pub fn num_targets(&self) -> usize {
        self.posterior.len()
    }

    /// One epoch of tracking: Riccati on posteriors for the given outcomes,
    /// Lyapunov on priors. Targets with zero priority get the Lyapunov update.
    pub fn step(
        &self,
        models: &[TargetModel],
        priorities: &[f64],
        outcomes: &[DetectionOutcome],
    ) -> Result<Belief> {
        let n = self.num_targets();
        if models.len() != n || priorities.len() != n || outcomes.len() != n {
            return Err(Error::dim("Belief::step", "models, priorities and outcomes must match the target count"));
        }
        let mut posterior = Vec::with_capacity(n);
        let mut prior = Vec::with_capacity(n);
        for l in 0..n {
            posterior.push(update_posterior(&self.posterior[l], outcomes[l], &models[l], priorities[l])?);
            prior.push(lyapunov_update(&self.prior[l], &models[l])?);
        }
        Ok(Belief {
            posterior,
            prior,
            leader: self.leader,
        })
    }
}

/// Riccati update for measured targets, Lyapunov for unmeasured ones.
pub fn update_posterior(
    p: &Covariance,
    outcome: DetectionOutcome,
    model: &TargetModel,
    priority: f64,
) -> Result<Covariance> {
    if priority > 0.0 {
        riccati_update(p, outcome, model, priority)
    } else {
        lyapunov_update(p, model)
    }
}

/// `α log|P̄| − β log|P|`.
pub fn mutual_information(prior: &Covariance, posterior: &Covariance, alpha: f64, beta: f64) -> Result<f64> {
    Ok(alpha * prior.log_det()? - beta * posterior.log_det()?)
}

/// Combines the per-target mutual information terms of the non-leaders.
pub(crate) fn aggregate(aggregation: Aggregation, others: impl Iterator<Item = f64>) -> f64 {
    match aggregation {
        Aggregation::MaxDiff => others.fold(f64::NEG_INFINITY, f64::max),
        Aggregation::MinDiff => others.fold(f64::INFINITY, f64::min),
        Aggregation::AvgDiff => others.sum(),
    }
}

/// Stopping cost `−I^a + Agg_{l≠a} I^l` with `I^l` the weighted mutual
/// information of target `l`.
pub fn stopping_cost(belief: &Belief, weights: &CostWeights) -> Result<f64> {
    let n = belief.num_targets();
    if weights.num_targets() != n {
        return Err(Error::dim("stopping_cost", format!("{} weights for {n} targets", weights.num_targets())));
    }
    let mut info = Vec::with_capacity(n);
    for l in 0..n {
        info.push(mutual_information(&belief.prior[l], &belief.posterior[l], weights.alpha[l], weights.beta[l])?);
    }
    let a = belief.leader;
    let others = info.iter().enumerate().filter(|(l, _)| *l != a).map(|(_, v)| *v);
    Ok(-info[a] + aggregate(weights.aggregation, others))
}

/// Joint detect/miss outcomes with nonzero probability, paired with their
/// probabilities. Targets that cannot be measured or whose detection is
/// certain contribute a single branch.
pub fn outcome_branches(models: &[TargetModel], priorities: &[f64]) -> Vec<(Vec<DetectionOutcome>, f64)> {
    let mut branches = vec![(Vec::with_capacity(models.len()), 1.0)];
    for (model, &nu) in models.iter().zip(priorities) {
        let pd = if nu > 0.0 { model.detection_prob } else { 0.0 };
        let mut next = Vec::with_capacity(branches.len() * 2);
        for (outcomes, prob) in branches {
            for (outcome, q) in [(DetectionOutcome::DETECTED, pd), (DetectionOutcome::MISSED, 1.0 - pd)] {
                if q > 0.0 {
                    let mut o = outcomes.clone();
                    o.push(outcome);
                    next.push((o, prob * q));
                }
            }
        }
        branches = next;
    }
    branches
}

/// `c_ν − C̄(P) + Σ_z q_z C̄(next(P, z))`, the per-epoch cost after the
/// value function is shifted by the stopping cost.
pub fn transformed_running_cost(
    belief: &Belief,
    weights: &CostWeights,
    models: &[TargetModel],
    priorities: &[f64],
) -> Result<f64> {
    let mut expected = 0.0;
    for (outcomes, q) in outcome_branches(models, priorities) {
        let next = belief.step(models, priorities, &outcomes)?;
        expected += q * stopping_cost(&next, weights)?;
    }
    Ok(weights.operating_cost - stopping_cost(belief, weights)? + expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn scalar(v: f64) -> Covariance {
        Covariance::scalar(v).unwrap()
    }

    fn scalar_model(f: f64, q: f64, pd: f64) -> TargetModel {
        let m = |v| DMatrix::from_element(1, 1, v);
        TargetModel::new(m(f), m(1.0), m(1.0), m(q), m(1.0), pd, 1.0).unwrap()
    }

    fn weights(alpha: Vec<f64>, beta: Vec<f64>, c: f64, agg: Aggregation) -> CostWeights {
        CostWeights::new(alpha, beta, c, agg).unwrap()
    }

    #[test]
    fn mutual_information_examples() {
        let p = Covariance::from_diagonal(&[2.0, 3.0]).unwrap();
        assert_eq!(mutual_information(&p, &p, 0.7, 0.7).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert_relative_eq!(mutual_information(&scalar(e), &scalar(1.0), 1.0, 1.0).unwrap(), 1.0, epsilon = 1e-15);
        let singular = Covariance::from_diagonal(&[1.0, 0.0]).unwrap();
        assert!(matches!(mutual_information(&singular, &p, 1.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn aggregations_agree_for_two_targets() {
        let b = Belief::new(vec![scalar(2.0), scalar(5.0)], vec![scalar(3.0), scalar(7.0)], 0).unwrap();
        let costs: Vec<f64> = [Aggregation::MaxDiff, Aggregation::MinDiff, Aggregation::AvgDiff]
            .into_iter()
            .map(|agg| stopping_cost(&b, &weights(vec![0.3, 0.2], vec![1.0, 2.0], 1.0, agg)).unwrap())
            .collect();
        assert_eq!(costs[0], costs[1]);
        assert_eq!(costs[1], costs[2]);
    }

    #[test]
    fn identical_targets_cancel() {
        let p = Covariance::from_diagonal(&[2.0, 3.0]).unwrap();
        let pb = Covariance::from_diagonal(&[4.0, 3.5]).unwrap();
        let b = Belief::new(vec![p.clone(), p], vec![pb.clone(), pb], 1).unwrap();
        let w = weights(vec![0.4, 0.4], vec![0.4, 0.4], 1.0, Aggregation::AvgDiff);
        assert_eq!(stopping_cost(&b, &w).unwrap(), 0.0);
    }

    #[test]
    fn entropy_form_when_alpha_vanishes() {
        let b = Belief::new(
            vec![scalar(2.0), scalar(5.0), scalar(0.5)],
            vec![scalar(30.0), scalar(70.0), scalar(9.0)],
            0,
        )
        .unwrap();
        let w = weights(vec![0.0; 3], vec![1.5, 0.5, 2.0], 1.0, Aggregation::AvgDiff);
        let direct = 1.5 * 2f64.ln() - (0.5 * 5f64.ln() + 2.0 * 0.5f64.ln());
        assert_relative_eq!(stopping_cost(&b, &w).unwrap(), direct, epsilon = 1e-14);
    }

    #[test]
    fn static_model_has_zero_running_cost() {
        let models = vec![scalar_model(1.0, 0.0, 0.0), scalar_model(1.0, 0.0, 0.0)];
        let b = Belief::new(vec![scalar(2.0), scalar(3.0)], vec![scalar(4.0), scalar(5.0)], 0).unwrap();
        let mut w = weights(vec![0.2, 0.1], vec![1.0, 1.0], 1.0, Aggregation::AvgDiff);
        w.operating_cost = 0.0;
        assert_eq!(transformed_running_cost(&b, &w, &models, &[0.5, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn certain_detection_single_branch() {
        // f = q = h = r = 1, Δ = 1, ν = (1, 1): R(P) = P + 1 − P²/(P + 1).
        let models = vec![scalar_model(1.0, 1.0, 1.0), scalar_model(1.0, 1.0, 1.0)];
        let pr = [1.0, 1.0];
        let b = Belief::new(vec![scalar(1.0), scalar(2.0)], vec![scalar(1.0), scalar(2.0)], 0).unwrap();
        let w = weights(vec![0.5, 0.5], vec![1.0, 1.0], 0.8, Aggregation::AvgDiff);
        assert_eq!(outcome_branches(&models, &pr).len(), 1);
        let ricc = |p: f64| p + 1.0 - p * p / (p + 1.0);
        let cbar = |pa: f64, pba: f64, pl: f64, pbl: f64| {
            -(0.5 * pba.ln() - pa.ln()) + (0.5 * pbl.ln() - pl.ln())
        };
        let expected = 0.8 - cbar(1.0, 1.0, 2.0, 2.0) + cbar(ricc(1.0), 2.0, ricc(2.0), 3.0);
        assert_relative_eq!(transformed_running_cost(&b, &w, &models, &pr).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn branch_probabilities_sum_to_one() {
        let models = vec![scalar_model(1.0, 1.0, 0.75), scalar_model(1.0, 1.0, 0.3), scalar_model(1.0, 1.0, 0.9)];
        let branches = outcome_branches(&models, &[0.5, 0.5, 0.0]);
        assert_eq!(branches.len(), 4);
        assert_relative_eq!(branches.iter().map(|b| b.1).sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_priority_targets_follow_lyapunov() {
        let models = vec![scalar_model(1.1, 0.5, 0.8), scalar_model(1.1, 0.5, 0.8)];
        let b = Belief::from_posteriors(vec![scalar(2.0), scalar(3.0)], 0).unwrap();
        let next = b.step(&models, &[1.0, 0.0], &[DetectionOutcome::DETECTED; 2]).unwrap();
        assert_eq!(next.posterior[1], next.prior[1]);
        assert!(next.posterior[0].matrix()[(0, 0)] < next.prior[0].matrix()[(0, 0)]);
    }

    #[test]
    fn belief_validation() {
        assert!(Belief::from_posteriors(vec![scalar(1.0)], 0).is_err());
        assert!(Belief::from_posteriors(vec![scalar(1.0), scalar(1.0)], 2).is_err());
        assert!(CostWeights::new(vec![0.1, 0.1], vec![0.1, -0.1], 1.0, Aggregation::AvgDiff).is_err());
        assert!(CostWeights::new(vec![0.1, 0.1], vec![0.1, 0.1], 0.0, Aggregation::AvgDiff).is_err());
    }
}
