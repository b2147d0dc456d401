//! Parametrized stopping policies that are monotone in the Loewner order.
//!
//! Every family compares a linear statistic of the belief with the fixed
//! threshold 1 and stops when the statistic reaches it. The leader's
//! posterior enters with a negative sign and the other targets' posteriors
//! with a positive sign (priors the other way round), so nonnegative eigen
//! weights or unit quadratic-form directions give a policy that moves toward
//! Continue as the leader's covariance grows and toward Stop as the others'
//! covariances grow.
//!
//! The optimizer works on an unconstrained vector `phi`. Eigen families use
//! `θ = φ²` componentwise; the quadratic-form family uses `m − 1` spherical
//! angles per unit vector.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter_core::Covariance;
use crate::observability::Belief;
use crate::rng;

/// Norm tolerance for quadratic-form directions.
pub const UNIT_NORM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyFamily {
    EigenMax,
    EigenMin,
    EigenSum,
    QuadForm,
}

impl PolicyFamily {
    pub const ALL: [PolicyFamily; 4] = [
        PolicyFamily::EigenMax,
        PolicyFamily::EigenMin,
        PolicyFamily::EigenSum,
        PolicyFamily::QuadForm,
    ];

    pub fn is_eigen(self) -> bool {
        !matches!(self, PolicyFamily::QuadForm)
    }

    /// Unconstrained parameters per weight vector for state dimension `m`.
    pub fn params_per_vector(self, m: usize) -> usize {
        if self.is_eigen() {
            m
        } else {
            m.saturating_sub(1)
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyFamily::EigenMax => "eigen-max",
            PolicyFamily::EigenMin => "eigen-min",
            PolicyFamily::EigenSum => "eigen-sum",
            PolicyFamily::QuadForm => "quadform",
        }
    }
}

impl std::str::FromStr for PolicyFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid("family", format!("unknown policy family `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Stop = 1,
    Continue = 2,
}

/// Which targets share a weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sharing {
    /// One weight vector pair per target, indexed by target.
    PerTarget,
    /// One pair for whichever target leads, one shared by all the others.
    SharedOthers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamLayout {
    pub sharing: Sharing,
    /// Use the posterior weights for the priors as well.
    pub tie_prior_weights: bool,
}

impl ParamLayout {
    pub const PER_TARGET: ParamLayout = ParamLayout {
        sharing: Sharing::PerTarget,
        tie_prior_weights: false,
    };

    fn num_slots(self, num_targets: usize) -> usize {
        match self.sharing {
            Sharing::PerTarget => num_targets,
            Sharing::SharedOthers => 2,
        }
    }

    fn slot(self, target: usize, leader: usize) -> usize {
        match self.sharing {
            Sharing::PerTarget => target,
            Sharing::SharedOthers => usize::from(target != leader),
        }
    }
}

impl Default for ParamLayout {
    fn default() -> Self {
        ParamLayout::PER_TARGET
    }
}

/// Serialized form of [`PolicyParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub family: PolicyFamily,
    #[serde(default)]
    pub layout: ParamLayout,
    pub num_targets: usize,
    pub state_dim: usize,
    pub phi: Vec<f64>,
}

/// Policy weights together with the unconstrained vector they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicySpec", into = "PolicySpec")]
pub struct PolicyParams {
    family: PolicyFamily,
    layout: ParamLayout,
    num_targets: usize,
    state_dim: usize,
    phi: Vec<f64>,
    theta: Vec<DVector<f64>>,
    theta_bar: Vec<DVector<f64>>,
}

/// Number of unconstrained parameters for a family and layout.
pub fn param_dim(family: PolicyFamily, layout: ParamLayout, num_targets: usize, state_dim: usize) -> usize {
    let vectors = if layout.tie_prior_weights { 1 } else { 2 };
    layout.num_slots(num_targets) * vectors * family.params_per_vector(state_dim)
}

impl PolicyParams {
    pub fn from_phi(
        family: PolicyFamily,
        layout: ParamLayout,
        num_targets: usize,
        state_dim: usize,
        phi: Vec<f64>,
    ) -> Result<Self> {
        if num_targets < 2 || state_dim == 0 {
            return Err(Error::invalid("policy", "need at least two targets and a nonempty state"));
        }
        let dim = param_dim(family, layout, num_targets, state_dim);
        if phi.len() != dim {
            return Err(Error::dim("PolicyParams::from_phi", format!("expected {dim} parameters, got {}", phi.len())));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("phi", "non-finite parameter"));
        }
        let k = family.params_per_vector(state_dim);
        let map = |chunk: &[f64]| {
            if family.is_eigen() {
                reparam_positive(chunk)
            } else {
                reparam_spherical(chunk, state_dim)
            }
        };
        let slots = layout.num_slots(num_targets);
        let mut theta = Vec::with_capacity(slots);
        let mut theta_bar = Vec::with_capacity(slots);
        let mut offset = 0;
        for _ in 0..slots {
            let t = map(&phi[offset..offset + k]);
            offset += k;
            let tb = if layout.tie_prior_weights {
                t.clone()
            } else {
                let tb = map(&phi[offset..offset + k]);
                offset += k;
                tb
            };
            theta.push(t);
            theta_bar.push(tb);
        }
        Ok(PolicyParams {
            family,
            layout,
            num_targets,
            state_dim,
            phi,
            theta,
            theta_bar,
        })
    }

    /// Builds parameters from weight vectors (one pair per slot of the
    /// layout), checking the family's invariants.
    pub fn from_theta(
        family: PolicyFamily,
        layout: ParamLayout,
        num_targets: usize,
        theta: Vec<DVector<f64>>,
        theta_bar: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let params = Self::from_theta_unchecked(family, layout, num_targets, theta, theta_bar)?;
        params.check_invariants()?;
        let phi = params.theta_to_phi();
        Self::from_phi(family, layout, num_targets, params.state_dim, phi)
            .map(|p| PolicyParams { theta: params.theta, theta_bar: params.theta_bar, ..p })
    }

    /// Like [`PolicyParams::from_theta`] without the sign or norm checks.
    /// Intended for constructing deliberately invalid fixtures; `phi` is
    /// left empty.
    pub fn from_theta_unchecked(
        family: PolicyFamily,
        layout: ParamLayout,
        num_targets: usize,
        theta: Vec<DVector<f64>>,
        theta_bar: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let slots = layout.num_slots(num_targets);
        if num_targets < 2 {
            return Err(Error::invalid("policy", "need at least two targets"));
        }
        if theta.len() != slots || theta_bar.len() != slots {
            return Err(Error::dim("PolicyParams::from_theta", format!("expected {slots} weight vectors")));
        }
        let state_dim = theta[0].len();
        if state_dim == 0 || theta.iter().chain(&theta_bar).any(|t| t.len() != state_dim) {
            return Err(Error::dim("PolicyParams::from_theta", "weight vectors differ in length"));
        }
        Ok(PolicyParams {
            family,
            layout,
            num_targets,
            state_dim,
            phi: Vec::new(),
            theta,
            theta_bar,
        })
    }

    fn check_invariants(&self) -> Result<()> {
        for t in self.theta.iter().chain(&self.theta_bar) {
            if self.family.is_eigen() {
                if t.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::invalid("theta", "eigen-family weights must be nonnegative"));
                }
            } else if (t.norm() - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid("theta", "quadratic-form weights must have unit norm"));
            }
        }
        Ok(())
    }

    fn theta_to_phi(&self) -> Vec<f64> {
        let mut phi = Vec::new();
        for (t, tb) in self.theta.iter().zip(&self.theta_bar) {
            let vectors: &[&DVector<f64>] = if self.layout.tie_prior_weights { &[t] } else { &[t, tb] };
            for v in vectors {
                if self.family.is_eigen() {
                    phi.extend(v.iter().map(|x| x.sqrt()));
                } else {
                    phi.extend(spherical_angles(v));
                }
            }
        }
        phi
    }

    pub fn family(&self) -> PolicyFamily {
        self.family
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn num_targets(&self) -> usize {
        self.num_targets
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    /// Posterior weights applied to `target` when `leader` leads.
    pub fn theta(&self, target: usize, leader: usize) -> &DVector<f64> {
        &self.theta[self.layout.slot(target, leader)]
    }

    /// Prior weights applied to `target` when `leader` leads.
    pub fn theta_bar(&self, target: usize, leader: usize) -> &DVector<f64> {
        &self.theta_bar[self.layout.slot(target, leader)]
    }

    /// Same family and layout with a new unconstrained vector.
    pub fn with_phi(&self, phi: Vec<f64>) -> Result<Self> {
        Self::from_phi(self.family, self.layout, self.num_targets, self.state_dim, phi)
    }
}

impl TryFrom<PolicySpec> for PolicyParams {
    type Error = Error;

    fn try_from(spec: PolicySpec) -> Result<Self> {
        PolicyParams::from_phi(spec.family, spec.layout, spec.num_targets, spec.state_dim, spec.phi)
    }
}

impl From<PolicyParams> for PolicySpec {
    fn from(p: PolicyParams) -> Self {
        PolicySpec {
            family: p.family,
            layout: p.layout,
            num_targets: p.num_targets,
            state_dim: p.state_dim,
            phi: p.phi,
        }
    }
}

/// `θ(i) = φ(i)²`.
pub fn reparam_positive(phi: &[f64]) -> DVector<f64> {
    DVector::from_iterator(phi.len(), phi.iter().map(|p| p * p))
}

/// Unit vector in `R^m` from `m − 1` spherical angles.
///
/// Panics if `angles.len() + 1 != m`.
pub fn reparam_spherical(angles: &[f64], m: usize) -> DVector<f64> {
    assert_eq!(angles.len() + 1, m, "spherical reparametrization needs m - 1 angles");
    let mut theta = DVector::zeros(m);
    let mut sin_prod = 1.0;
    for (i, a) in angles.iter().enumerate() {
        theta[i] = sin_prod * a.cos();
        sin_prod *= a.sin();
    }
    theta[m - 1] = sin_prod;
    theta
}

/// Inverse of [`reparam_spherical`] for a unit vector.
pub fn spherical_angles(theta: &DVector<f64>) -> Vec<f64> {
    let m = theta.len();
    let mut angles = Vec::with_capacity(m.saturating_sub(1));
    for i in 0..m.saturating_sub(1) {
        if i + 2 == m {
            angles.push(theta[m - 1].atan2(theta[m - 2]));
        } else {
            let tail = theta.rows(i + 1, m - i - 1).norm();
            angles.push(tail.atan2(theta[i]));
        }
    }
    angles
}

fn eigen_term(theta: &DVector<f64>, p: &Covariance) -> f64 {
    theta.iter().zip(p.eigenvalues_sorted()).map(|(t, l)| t * l).sum()
}

fn quad_term(theta: &DVector<f64>, p: &Covariance) -> f64 {
    p.quad_form(theta)
}

/// Left-hand side of the stopping inequality.
pub fn decision_statistic(belief: &Belief, params: &PolicyParams) -> f64 {
    let a = belief.leader;
    let term: fn(&DVector<f64>, &Covariance) -> f64 = if params.family.is_eigen() { eigen_term } else { quad_term };
    let leader =
        -term(params.theta(a, a), &belief.posterior[a]) + term(params.theta_bar(a, a), &belief.prior[a]);
    let others = (0..belief.num_targets()).filter(|&l| l != a).map(|l| {
        term(params.theta(l, a), &belief.posterior[l]) - term(params.theta_bar(l, a), &belief.prior[l])
    });
    let agg = match params.family {
        PolicyFamily::EigenMax => others.fold(f64::NEG_INFINITY, f64::max),
        PolicyFamily::EigenMin => others.fold(f64::INFINITY, f64::min),
        PolicyFamily::EigenSum | PolicyFamily::QuadForm => others.sum(),
    };
    leader + agg
}

/// Stop when the statistic reaches 1 (ties stop).
pub fn decide(belief: &Belief, params: &PolicyParams) -> Action {
    if decision_statistic(belief, params) >= 1.0 {
        Action::Stop
    } else {
        Action::Continue
    }
}

pub fn decide_eigen(belief: &Belief, params: &PolicyParams) -> Result<Action> {
    if !params.family.is_eigen() {
        return Err(Error::invalid("family", "decide_eigen needs an eigen family"));
    }
    Ok(decide(belief, params))
}

pub fn decide_quadform(belief: &Belief, params: &PolicyParams) -> Result<Action> {
    if params.family.is_eigen() {
        return Err(Error::invalid("family", "decide_quadform needs the quadform family"));
    }
    Ok(decide(belief, params))
}

/// Which covariance of a belief a monotonicity probe perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BeliefSlot {
    LeaderPosterior,
    LeaderPrior,
    OtherPosterior(usize),
    OtherPrior(usize),
}

impl BeliefSlot {
    /// Growing this covariance may only move the decision toward Continue.
    pub fn pushes_toward_continue(self) -> bool {
        matches!(self, BeliefSlot::LeaderPosterior | BeliefSlot::OtherPrior(_))
    }
}

/// Belief sampler for [`verify_monotone`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonotoneSampler {
    pub leader: usize,
    /// Standard deviation of the Gaussian factors used to build covariances.
    pub scale: f64,
    /// Standard deviation of the perturbation factor `A` in `P + AAᵀ`.
    pub perturbation_scale: f64,
    pub seed: u64,
}

impl Default for MonotoneSampler {
    fn default() -> Self {
        MonotoneSampler {
            leader: 0,
            scale: 1.0,
            perturbation_scale: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneViolation {
    pub sample: usize,
    pub slot: BeliefSlot,
    pub before: Action,
    pub after: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub samples: usize,
    /// Pairs whose two decisions differ.
    pub decisive: usize,
    pub violations: Vec<MonotoneViolation>,
}

impl MonotonicityReport {
    pub fn is_monotone(&self) -> bool {
        self.violations.is_empty()
    }
}

fn random_covariance<R: Rng>(rng: &mut R, m: usize, scale: f64, jitter: f64) -> Covariance {
    let a = nalgebra::DMatrix::<f64>::from_fn(m, m, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    Covariance::from_symmetric(&a * a.transpose() + nalgebra::DMatrix::identity(m, m) * jitter)
}

fn scaled(belief: &Belief, c: f64) -> Belief {
    let s = |v: &Vec<Covariance>| v.iter().map(|p| Covariance::from_symmetric(p.matrix() * c)).collect();
    Belief {
        posterior: s(&belief.posterior),
        prior: s(&belief.prior),
        leader: belief.leader,
    }
}

/// Samples belief pairs ordered in one slot and reports decision flips in
/// the wrong direction.
///
/// Each sampled pair is rescaled by a common positive factor so that, when
/// possible, the threshold falls between the two statistics; all four
/// families are positively homogeneous, so this only concentrates samples
/// near the decision boundary where violations are observable.
pub fn verify_monotone(params: &PolicyParams, sampler: &MonotoneSampler, n_samples: usize) -> MonotonicityReport {
    let l = params.num_targets();
    let m = params.state_dim();
    let a = sampler.leader.min(l - 1);
    let mut rng = rng::stream(sampler.seed, "verify-monotone", 0);
    let mut violations = Vec::new();
    let mut decisive = 0;
    for sample in 0..n_samples {
        let draw = |rng: &mut rng::StreamRng| random_covariance(rng, m, sampler.scale, 1e-3);
        let posterior: Vec<Covariance> = (0..l).map(|_| draw(&mut rng)).collect();
        let prior: Vec<Covariance> = (0..l).map(|_| draw(&mut rng)).collect();
        let base = Belief {
            posterior,
            prior,
            leader: a,
        };
        let other = (a + 1 + rng.random_range(0..l - 1)) % l;
        let slot = match rng.random_range(0..4) {
            0 => BeliefSlot::LeaderPosterior,
            1 => BeliefSlot::LeaderPrior,
            2 => BeliefSlot::OtherPosterior(other),
            _ => BeliefSlot::OtherPrior(other),
        };
        let bump = nalgebra::DMatrix::<f64>::from_fn(m, m, |_, _| {
            sampler.perturbation_scale * rng.sample::<f64, _>(StandardNormal)
        });
        let mut grown = base.clone();
        let target = match slot {
            BeliefSlot::LeaderPosterior => &mut grown.posterior[a],
            BeliefSlot::LeaderPrior => &mut grown.prior[a],
            BeliefSlot::OtherPosterior(o) => &mut grown.posterior[o],
            BeliefSlot::OtherPrior(o) => &mut grown.prior[o],
        };
        *target = target.plus_outer(&bump).expect("conforming perturbation");

        let s0 = decision_statistic(&base, params);
        let s1 = decision_statistic(&grown, params);
        let mid = 0.5 * (s0 + s1);
        let (b0, b1) = if mid > 0.0 && s0 != s1 {
            (scaled(&base, 1.0 / mid), scaled(&grown, 1.0 / mid))
        } else {
            (base, grown)
        };
        let before = decide(&b0, params);
        let after = decide(&b1, params);
        if before == after {
            continue;
        }
        decisive += 1;
        let wrong = if slot.pushes_toward_continue() {
            before == Action::Continue && after == Action::Stop
        } else {
            before == Action::Stop && after == Action::Continue
        };
        if wrong {
            violations.push(MonotoneViolation {
                sample,
                slot,
                before,
                after,
            });
        }
    }
    MonotonicityReport {
        samples: n_samples,
        decisive,
        violations,
    }
}
