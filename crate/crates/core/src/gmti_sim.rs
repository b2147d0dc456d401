//! Ground moving target indicator (GMTI) radar simulation.
//!
//! Targets move with nearly constant velocity on the ground; the airborne
//! platform measures range, azimuth and range rate. The micro-manager's
//! decision problem uses the linearized model: the observation matrix is the
//! measurement Jacobian at the current estimate, held fixed over a
//! scheduling interval.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix4, Matrix4x2, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter_core::{Covariance, DetectionOutcome, TargetModel};
use crate::linearization::jacobian_h;
use crate::observability::{update_posterior, Belief, CostWeights};
use crate::optimizer::{validate_priorities, StoppingProblem, DEFAULT_TAU_MAX};
use crate::policy::{decide, Action, PolicyParams};
use crate::rng;

/// Number of orbit locations.
pub const ORBIT_LOCATIONS: usize = 72;

/// Ground target state `(x, ẋ, y, ẏ)` in metres and metres per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct TargetState(pub Vector4<f64>);

impl TargetState {
    pub fn new(x: f64, vx: f64, y: f64, vy: f64) -> Self {
        TargetState(Vector4::new(x, vx, y, vy))
    }
}

impl From<[f64; 4]> for TargetState {
    fn from(a: [f64; 4]) -> Self {
        TargetState(Vector4::from(a))
    }
}

impl From<TargetState> for [f64; 4] {
    fn from(s: TargetState) -> Self {
        s.0.into()
    }
}

/// Platform kinematics `(ξ_x, ξ̇_x, ξ_y, ξ̇_y)` and constant altitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformState {
    pub kinematics: [f64; 4],
    pub altitude: f64,
}

impl PlatformState {
    pub fn new(kinematics: [f64; 4], altitude: f64) -> Result<Self> {
        if !(altitude > 0.0) || kinematics.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("platform", "altitude must be positive and kinematics finite"));
        }
        Ok(PlatformState { kinematics, altitude })
    }

    pub fn position(&self) -> (f64, f64) {
        (self.kinematics[0], self.kinematics[2])
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.kinematics[1], self.kinematics[3])
    }

    /// Constant-velocity motion over `dt` seconds.
    pub fn advanced(&self, dt: f64) -> Self {
        let [x, vx, y, vy] = self.kinematics;
        PlatformState {
            kinematics: [x + vx * dt, vx, y + vy * dt, vy],
            altitude: self.altitude,
        }
    }
}

/// Platform altitude giving depression angle `depression_deg` at the origin.
pub fn altitude_from_depression(x: f64, y: f64, depression_deg: f64) -> f64 {
    x.hypot(y) * depression_deg.to_radians().tan()
}

/// Measurement noise standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorNoise {
    /// Range, m.
    pub range: f64,
    /// Azimuth, degrees.
    pub azimuth_deg: f64,
    /// Range rate, m/s.
    pub range_rate: f64,
}

impl SensorNoise {
    pub fn covariance(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            self.range.powi(2),
            self.azimuth_deg.to_radians().powi(2),
            self.range_rate.powi(2),
        ]))
    }
}

/// Constant-velocity kinematics for sampling period `period`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrices {
    pub transition: Matrix4<f64>,
    pub noise_gain: Matrix4x2<f64>,
    pub process_noise: Matrix4<f64>,
    pub measurement_noise: DMatrix<f64>,
}

pub fn system_matrices(period: f64, accel_std_x: f64, accel_std_y: f64, sensor: &SensorNoise) -> SystemMatrices {
    let t = period;
    let transition = Matrix4::new(
        1.0, t, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, t, //
        0.0, 0.0, 0.0, 1.0,
    );
    let noise_gain = Matrix4x2::new(
        t * t / 2.0, 0.0, //
        t, 0.0, //
        0.0, t * t / 2.0, //
        0.0, t,
    );
    let (sx, sy) = (accel_std_x.powi(2), accel_std_y.powi(2));
    let (t2, t3, t4) = (t * t, t * t * t, t * t * t * t);
    let process_noise = Matrix4::new(
        t4 / 4.0 * sx, t3 / 2.0 * sx, 0.0, 0.0, //
        t3 / 2.0 * sx, t2 * sx, 0.0, 0.0, //
        0.0, 0.0, t4 / 4.0 * sy, t3 / 2.0 * sy, //
        0.0, 0.0, t3 / 2.0 * sy, t2 * sy,
    );
    SystemMatrices {
        transition,
        noise_gain,
        process_noise,
        measurement_noise: sensor.covariance(),
    }
}

/// Range (m), azimuth (rad) and range rate (m/s) of a target.
pub fn nonlinear_h(s: &TargetState, xi: &PlatformState) -> Result<Vector3<f64>> {
    let [px, pvx, py, pvy] = xi.kinematics;
    let (dx, dvx, dy, dvy) = (s.0[0] - px, s.0[1] - pvx, s.0[2] - py, s.0[3] - pvy);
    let range = (dx * dx + dy * dy + xi.altitude * xi.altitude).sqrt();
    if range == 0.0 || (dx == 0.0 && dy == 0.0) {
        return Err(Error::Domain("target coincides with the platform ground projection".into()));
    }
    Ok(Vector3::new(range, dy.atan2(dx), (dx * dvx + dy * dvy) / range))
}

/// `F s + G w` with `w ~ N(0, σ_p² I)` driving the accelerations.
pub fn propagate_truth<R: Rng>(s: &TargetState, sys: &SystemMatrices, sigma_p: f64, rng: &mut R) -> TargetState {
    let w = nalgebra::Vector2::new(
        sigma_p * rng.sample::<f64, _>(StandardNormal),
        sigma_p * rng.sample::<f64, _>(StandardNormal),
    );
    TargetState(sys.transition * s.0 + sys.noise_gain * w)
}

/// One radar look: `None` on a missed detection (always for zero priority),
/// otherwise `h(s, ξ) + v / √(νΔ)` with `v ~ N(0, R_base)`.
///
/// The detection uniform is drawn first; noise is drawn only on detection.
pub fn measure<R: Rng>(
    s: &TargetState,
    xi: &PlatformState,
    model: &TargetModel,
    priority: f64,
    rng: &mut R,
) -> Result<Option<Vector3<f64>>> {
    let u: f64 = rng.random();
    if !(priority > 0.0) || u >= model.detection_prob {
        return Ok(None);
    }
    let h = nonlinear_h(s, xi)?;
    let chol = model
        .measurement_noise
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("measurement noise is not positive definite".into()))?;
    let v = nalgebra::DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
    let noise = chol.l() * v / (priority * model.integration_count).sqrt();
    Ok(Some(h + Vector3::new(noise[0], noise[1], noise[2])))
}

/// Platform state at orbit location `n ∈ 1..=72` (5° apart).
pub fn platform_orbit_state(n: usize, radius: f64, speed: f64, altitude: f64) -> Result<PlatformState> {
    if !(1..=ORBIT_LOCATIONS).contains(&n) {
        return Err(Error::invalid("location", format!("{n} is outside 1..={ORBIT_LOCATIONS}")));
    }
    orbit_state_at_angle((n as f64 * 5.0).to_radians(), radius, speed, altitude)
}

fn orbit_state_at_angle(angle: f64, radius: f64, speed: f64, altitude: f64) -> Result<PlatformState> {
    PlatformState::new(
        [radius * angle.cos(), -speed * angle.sin(), radius * angle.sin(), speed * angle.cos()],
        altitude,
    )
}

/// Platform trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PlatformSpec {
    ConstantVelocity {
        kinematics: [f64; 4],
        altitude: f64,
    },
    /// Counter-clockwise circle about the origin, starting at `start_location`.
    Orbit {
        radius: f64,
        speed: f64,
        altitude: f64,
        start_location: usize,
    },
}

impl PlatformSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PlatformSpec::ConstantVelocity { kinematics, altitude } => {
                PlatformState::new(kinematics, altitude).map(|_| ())
            }
            PlatformSpec::Orbit {
                radius,
                speed,
                altitude,
                start_location,
            } => {
                if !(radius > 0.0 && speed > 0.0 && altitude > 0.0) {
                    return Err(Error::invalid("platform", "orbit radius, speed and altitude must be positive"));
                }
                platform_orbit_state(start_location, radius, speed, altitude).map(|_| ())
            }
        }
    }

    /// Platform state `t` seconds into the scenario.
    pub fn state_at(&self, t: f64) -> PlatformState {
        match *self {
            PlatformSpec::ConstantVelocity { kinematics, altitude } => {
                PlatformState { kinematics, altitude }.advanced(t)
            }
            PlatformSpec::Orbit {
                radius,
                speed,
                altitude,
                start_location,
            } => {
                let angle = (start_location as f64 * 5.0).to_radians() + speed / radius * t;
                orbit_state_at_angle(angle, radius, speed, altitude).expect("validated orbit")
            }
        }
    }

    /// Nearest orbit location in `1..=72`, or `None` for a straight track.
    pub fn location_at(&self, t: f64) -> Option<usize> {
        match *self {
            PlatformSpec::ConstantVelocity { .. } => None,
            PlatformSpec::Orbit {
                radius,
                speed,
                start_location,
                ..
            } => {
                let deg = start_location as f64 * 5.0 + (speed / radius * t).to_degrees();
                let idx = (deg / 5.0).round() as i64;
                Some((idx - 1).rem_euclid(ORBIT_LOCATIONS as i64) as usize + 1)
            }
        }
    }

    /// Seconds needed to move between adjacent orbit locations.
    pub fn segment_time(&self) -> Option<f64> {
        match *self {
            PlatformSpec::ConstantVelocity { .. } => None,
            PlatformSpec::Orbit { radius, speed, .. } => Some(2.0 * PI * radius / (ORBIT_LOCATIONS as f64 * speed)),
        }
    }
}

/// How the macro-manager allocates priority.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriorityRule {
    /// The configured priority vector; the leader is its largest entry.
    Fixed { priorities: Vec<f64> },
    /// All resources to the target with the largest uncertainty.
    MostUncertain,
}

/// Leader and priority vector for the next scheduling interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub leader: usize,
    pub priorities: Vec<f64>,
}

fn argmax(xs: &[f64]) -> usize {
    // First index wins ties.
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Chooses the leader from per-target uncertainty scores (log-determinants
/// or mean-square errors).
pub fn macro_select_priority(uncertainty: &[f64], rule: &PriorityRule) -> Result<Allocation> {
    let n = uncertainty.len();
    if n < 2 {
        return Err(Error::invalid("targets", "at least two targets are required"));
    }
    match rule {
        PriorityRule::Fixed { priorities } => {
            if priorities.len() != n {
                return Err(Error::invalid("priorities", format!("{} entries for {n} targets", priorities.len())));
            }
            validate_priorities(priorities)?;
            Ok(Allocation {
                leader: argmax(priorities),
                priorities: priorities.clone(),
            })
        }
        PriorityRule::MostUncertain => {
            let leader = argmax(uncertainty);
            let mut priorities = vec![0.0; n];
            priorities[leader] = 1.0;
            Ok(Allocation { leader, priorities })
        }
    }
}

pub fn log_dets(covariances: &[Covariance]) -> Result<Vec<f64>> {
    covariances.iter().map(Covariance::log_det).collect()
}

/// Mean of the squared component errors.
pub fn mse(estimate: &TargetState, truth: &TargetState) -> f64 {
    (estimate.0 - truth.0).norm_squared() / 4.0
}

/// Initial truth, estimate and covariance of one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub truth: TargetState,
    pub estimate: TargetState,
    pub covariance: Covariance,
}

/// A complete tracking scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Sampling period, s.
    pub period: f64,
    /// Acceleration noise of the tracking model, m/s² per axis.
    pub accel_std: [f64; 2],
    pub sensor: SensorNoise,
    pub detection_prob: f64,
    pub integration_count: f64,
    pub targets: Vec<TargetSpec>,
    pub platform: PlatformSpec,
    pub priority_rule: PriorityRule,
    pub weights: CostWeights,
    /// Weights are indexed by role (entry 0 for the leader) rather than by
    /// target.
    pub role_based_weights: bool,
    pub tau_max: usize,
    /// Acceleration noise of the simulated true tracks, m/s².
    pub truth_accel_std: f64,
}

/// Default initial covariance: 10 m position and 5 m/s velocity deviation.
pub fn default_initial_covariance() -> Covariance {
    Covariance::from_diagonal(&[100.0, 25.0, 100.0, 25.0]).expect("diagonal PSD")
}

const FLYBY_TARGETS: [([f64; 4], [f64; 4]); 4] = [
    ([130.0, 5.5, 84.0, 8.1], [100.0, 3.0, 40.0, 7.0]),
    ([-47.88, -2.38, 210.41, 0.418], [-20.0, -4.0, 200.0, 1.0]),
    ([55.84, 2.37, 121.74, 9.56], [50.0, 2.0, 95.0, 10.0]),
    ([-55.13, 5.75, -68.41, -6.10], [-70.0, 5.0, -50.0, -6.0]),
];

fn flyby_targets() -> Vec<TargetSpec> {
    FLYBY_TARGETS
        .iter()
        .map(|(est, truth)| TargetSpec {
            truth: TargetState::from(*truth),
            estimate: TargetState::from(*est),
            covariance: default_initial_covariance(),
        })
        .collect()
}

const NOMINAL_SENSOR: SensorNoise = SensorNoise {
    range: 20.0,
    azimuth_deg: 0.5,
    range_rate: 5.0,
};

/// Straight fly-by past four targets with a fixed priority vector.
pub fn build_flyby_scenario() -> Scenario {
    Scenario {
        name: "flyby".into(),
        period: 0.1,
        accel_std: [0.5, 0.5],
        sensor: NOMINAL_SENSOR,
        detection_prob: 0.75,
        integration_count: 100.0,
        targets: flyby_targets(),
        platform: PlatformSpec::ConstantVelocity {
            kinematics: [10_000.0, 53.0, -30_000.0, 85.0],
            altitude: altitude_from_depression(10_000.0, -30_000.0, 15.0),
        },
        priority_rule: PriorityRule::Fixed {
            priorities: vec![0.6, 0.39, 0.008, 0.002],
        },
        weights: CostWeights {
            alpha: vec![0.05; 4],
            beta: vec![5.0, 0.05, 0.05, 0.05],
            operating_cost: 0.8,
            aggregation: crate::observability::Aggregation::AvgDiff,
        },
        role_based_weights: false,
        tau_max: DEFAULT_TAU_MAX,
        truth_accel_std: 1.5,
    }
}

/// Orbiting platform that gives all resources to the most uncertain target.
pub fn build_persistent_scenario() -> Scenario {
    Scenario {
        name: "persistent".into(),
        period: 0.1,
        accel_std: [0.5, 0.5],
        sensor: NOMINAL_SENSOR,
        detection_prob: 0.9,
        integration_count: 100.0,
        targets: flyby_targets(),
        platform: PlatformSpec::Orbit {
            radius: 30_000.0,
            speed: 250.0,
            altitude: 5_000.0,
            start_location: ORBIT_LOCATIONS,
        },
        priority_rule: PriorityRule::MostUncertain,
        weights: CostWeights {
            alpha: vec![0.25, 0.0, 0.0, 0.0],
            beta: vec![0.25, 1.0, 1.0, 1.0],
            operating_cost: 0.8,
            aggregation: crate::observability::Aggregation::AvgDiff,
        },
        role_based_weights: true,
        tau_max: DEFAULT_TAU_MAX,
        truth_accel_std: 1.5,
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let n = self.targets.len();
        if n < 2 {
            return Err(Error::invalid("targets", "at least two targets are required"));
        }
        if !(self.period > 0.0) {
            return Err(Error::invalid("period", "must be positive"));
        }
        if self.accel_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("accel_std", "must be positive"));
        }
        if ![self.sensor.range, self.sensor.azimuth_deg, self.sensor.range_rate]
            .iter()
            .all(|s| *s > 0.0)
        {
            return Err(Error::invalid("sensor", "noise deviations must be positive"));
        }
        if !(0.0..=1.0).contains(&self.detection_prob) {
            return Err(Error::invalid("detection_prob", "must lie in [0, 1]"));
        }
        if !(self.integration_count >= 1.0) {
            return Err(Error::invalid("integration_count", "must be at least 1"));
        }
        for (l, t) in self.targets.iter().enumerate() {
            if t.covariance.dim() != 4 {
                return Err(Error::invalid(format!("targets[{l}].covariance"), "must be 4x4"));
            }
            t.covariance
                .log_det()
                .map_err(|_| Error::invalid(format!("targets[{l}].covariance"), "must be positive definite"))?;
            if t.truth.0.iter().chain(t.estimate.0.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("targets[{l}]"), "states must be finite"));
            }
        }
        self.platform.validate()?;
        if let PriorityRule::Fixed { priorities } = &self.priority_rule {
            if priorities.len() != n {
                return Err(Error::invalid("priority_rule.priorities", format!("{} entries for {n} targets", priorities.len())));
            }
            validate_priorities(priorities).map_err(|e| match e {
                Error::Validation { reason, .. } => Error::invalid("priority_rule.priorities", reason),
                other => other,
            })?;
        }
        if self.weights.num_targets() != n {
            return Err(Error::invalid("weights", format!("{} entries for {n} targets", self.weights.num_targets())));
        }
        self.weights.validate()?;
        if self.tau_max < 1 {
            return Err(Error::invalid("tau_max", "must be at least 1"));
        }
        if !(self.truth_accel_std >= 0.0) {
            return Err(Error::invalid("truth_accel_std", "must be nonnegative"));
        }
        Ok(())
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn system(&self) -> SystemMatrices {
        system_matrices(self.period, self.accel_std[0], self.accel_std[1], &self.sensor)
    }

    pub fn truth_system(&self) -> SystemMatrices {
        system_matrices(self.period, self.truth_accel_std, self.truth_accel_std, &self.sensor)
    }

    /// Linearized model for a target estimated at `estimate` seen from `xi`.
    pub fn target_model(&self, estimate: &TargetState, xi: &PlatformState) -> Result<TargetModel> {
        let sys = self.system();
        let h = jacobian_h(estimate, xi)?;
        TargetModel::new(
            DMatrix::from_column_slice(4, 4, sys.transition.as_slice()),
            DMatrix::from_column_slice(4, 2, sys.noise_gain.as_slice()),
            DMatrix::from_column_slice(3, 4, h.as_slice()),
            DMatrix::from_column_slice(4, 4, sys.process_noise.as_slice()),
            sys.measurement_noise,
            self.detection_prob,
            self.integration_count,
        )
    }

    /// Cost weights once `leader` is known.
    pub fn weights_for(&self, leader: usize) -> CostWeights {
        if self.role_based_weights {
            self.weights.rotated_to_leader(leader)
        } else {
            self.weights.clone()
        }
    }

    /// Priority allocation from the current covariances.
    pub fn allocate(&self, covariances: &[Covariance]) -> Result<Allocation> {
        macro_select_priority(&log_dets(covariances)?, &self.priority_rule)
    }

    /// The micro-manager's stopping problem at time `t` given estimates and
    /// covariances.
    pub fn stopping_problem_at(
        &self,
        t: f64,
        estimates: &[TargetState],
        covariances: &[Covariance],
    ) -> Result<StoppingProblem> {
        let xi = self.platform.state_at(t);
        let alloc = self.allocate(covariances)?;
        let models = estimates
            .iter()
            .map(|e| self.target_model(e, &xi))
            .collect::<Result<Vec<_>>>()?;
        StoppingProblem::new(
            models,
            alloc.priorities,
            self.weights_for(alloc.leader),
            Belief::from_posteriors(covariances.to_vec(), alloc.leader)?,
            self.tau_max,
        )
    }

    /// The stopping problem at the start of the scenario.
    pub fn stopping_problem(&self) -> Result<StoppingProblem> {
        self.validate()?;
        let estimates: Vec<TargetState> = self.targets.iter().map(|t| t.estimate).collect();
        let covariances: Vec<Covariance> = self.targets.iter().map(|t| t.covariance.clone()).collect();
        self.stopping_problem_at(0.0, &estimates, &covariances)
    }
}

/// Which parameters the micro-manager uses in each cycle.
#[derive(Debug, Clone, PartialEq)]
pub enum CyclePolicy {
    Global(PolicyParams),
    /// One parameter set per orbit location (index 0 is location 1).
    PerLocation(Vec<PolicyParams>),
    /// Stop after a fixed number of epochs.
    Periodic(usize),
}

impl CyclePolicy {
    fn decide(&self, belief: &Belief, epoch: usize, location: Option<usize>) -> Result<Action> {
        match self {
            CyclePolicy::Global(p) => Ok(decide(belief, p)),
            CyclePolicy::PerLocation(ps) => {
                let loc = location.ok_or_else(|| Error::invalid("policy", "per-location policies need an orbiting platform"))?;
                let p = ps
                    .get(loc - 1)
                    .ok_or_else(|| Error::invalid("policy", format!("no parameters for location {loc}")))?;
                Ok(decide(belief, p))
            }
            CyclePolicy::Periodic(k) => Ok(if epoch >= *k { Action::Stop } else { Action::Continue }),
        }
    }
}

/// One (epoch, target) row of a macro-cycle trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub cycle: usize,
    pub epoch: usize,
    pub target: usize,
    pub leader: usize,
    pub log_det_p: f64,
    pub log_det_pbar: f64,
    pub detected: bool,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroTrace {
    pub rows: Vec<TraceRow>,
    pub stop_times: Vec<usize>,
    pub leaders: Vec<usize>,
    /// Orbit location at the start of each cycle.
    pub locations: Vec<Option<usize>>,
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// Alternates macro-manager allocation and micro-manager tracking for
/// `n_cycles` scheduling intervals.
///
/// Every epoch simulates the true tracks, takes one radar look per target,
/// updates the extended Kalman filter and then asks the policy whether to
/// stop. Priors are reset to the posteriors at the start of each cycle.
pub fn run_macro_cycles(scenario: &Scenario, policy: &CyclePolicy, n_cycles: usize, seed: u64) -> Result<MacroTrace> {
    scenario.validate()?;
    let n = scenario.num_targets();
    let truth_sys = scenario.truth_system();
    let sys = scenario.system();
    let mut truth_rng = rng::stream(seed, "truth", 0);
    let mut radar_rng = rng::stream(seed, "radar", 0);

    let mut truths: Vec<TargetState> = scenario.targets.iter().map(|t| t.truth).collect();
    let mut estimates: Vec<TargetState> = scenario.targets.iter().map(|t| t.estimate).collect();
    let mut posteriors: Vec<Covariance> = scenario.targets.iter().map(|t| t.covariance.clone()).collect();
    let mut time = 0.0;
    let mut trace = MacroTrace {
        rows: Vec::new(),
        stop_times: Vec::new(),
        leaders: Vec::new(),
        locations: Vec::new(),
    };

    for cycle in 0..n_cycles {
        let problem = scenario.stopping_problem_at(time, &estimates, &posteriors)?;
        let location = scenario.platform.location_at(time);
        let leader = problem.initial.leader;
        trace.leaders.push(leader);
        trace.locations.push(location);
        let mut belief = problem.initial.clone();
        let mut epoch = 1;
        loop {
            let xi = scenario.platform.state_at(time);
            let mut outcomes = Vec::with_capacity(n);
            for l in 0..n {
                let model = &problem.models[l];
                let nu = problem.priorities[l];
                let z = measure(&truths[l], &xi, model, nu, &mut radar_rng)?;
                let p = belief.posterior[l].matrix();
                let mut updated = estimates[l].0;
                if let Some(z) = z {
                    let h = &model.observation;
                    let s = h * p * h.transpose() + model.effective_noise(nu);
                    let chol = s
                        .cholesky()
                        .ok_or_else(|| Error::Numerical("innovation covariance is singular".into()))?;
                    let predicted = nonlinear_h(&estimates[l], &xi)?;
                    let mut innov = nalgebra::DVector::from_column_slice((z - predicted).as_slice());
                    innov[1] = wrap_angle(innov[1]);
                    let gain_t = chol.solve(&(h * p));
                    let correction = gain_t.transpose() * innov;
                    updated += Vector4::from_column_slice(correction.as_slice());
                }
                estimates[l] = TargetState(sys.transition * updated);
                truths[l] = propagate_truth(&truths[l], &truth_sys, scenario.truth_accel_std, &mut truth_rng);
                outcomes.push(DetectionOutcome { detected: z.is_some() });
            }
            let mut next = belief.clone();
            for (l, &outcome) in outcomes.iter().enumerate() {
                next.posterior[l] =
                    update_posterior(&belief.posterior[l], outcome, &problem.models[l], problem.priorities[l])?;
                next.prior[l] = crate::filter_core::lyapunov_update(&belief.prior[l], &problem.models[l])?;
            }
            belief = next;
            time += scenario.period;

            let at_bound = epoch >= scenario.tau_max;
            let action = if at_bound {
                Action::Stop
            } else {
                policy.decide(&belief, epoch, location)?
            };
            for (l, outcome) in outcomes.iter().enumerate() {
                trace.rows.push(TraceRow {
                    cycle,
                    epoch,
                    target: l,
                    leader,
                    log_det_p: belief.posterior[l].log_det()?,
                    log_det_pbar: belief.prior[l].log_det()?,
                    detected: outcome.detected,
                    action,
                });
            }
            if action == Action::Stop {
                trace.stop_times.push(epoch);
                break;
            }
            epoch += 1;
        }
        posteriors = belief.posterior;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix2;

    #[test]
    fn system_matrix_entries() {
        let sys = system_matrices(0.1, 0.5, 0.5, &NOMINAL_SENSOR);
        assert_eq!(sys.transition[(0, 1)], 0.1);
        assert_relative_eq!(sys.process_noise[(0, 0)], 0.25 * 1e-4 * 0.25, epsilon = 1e-18);
        assert_relative_eq!(sys.measurement_noise[(0, 0)], 400.0);
        assert_relative_eq!(sys.measurement_noise[(1, 1)], (0.5 * PI / 180.0).powi(2), epsilon = 1e-18);
        assert_relative_eq!(sys.measurement_noise[(2, 2)], 25.0);
        let g = sys.noise_gain;
        assert!((g * (Matrix2::identity() * 0.25) * g.transpose() - sys.process_noise).amax() < 1e-18);
        let degenerate = system_matrices(0.0, 0.5, 0.5, &NOMINAL_SENSOR);
        assert_eq!(degenerate.transition, Matrix4::identity());
        assert_eq!(degenerate.process_noise, Matrix4::zeros());
    }

    #[test]
    fn measurement_geometry() {
        let xi = PlatformState {
            kinematics: [0.0, 0.0, 0.0, 0.0],
            altitude: 0.0,
        };
        let z = nonlinear_h(&TargetState::new(250.0, 3.0, 0.0, 3.0), &xi).unwrap();
        assert_eq!(z[0], 250.0);
        assert_eq!(z[1], 0.0);
        let still = PlatformState::new([0.0, 1.0, 0.0, 2.0], 100.0).unwrap();
        assert_eq!(nonlinear_h(&TargetState::new(5.0, 1.0, 7.0, 2.0), &still).unwrap()[2], 0.0);
        assert!(nonlinear_h(&TargetState::new(0.0, 0.0, 0.0, 0.0), &xi).is_err());
    }

    #[test]
    fn azimuth_is_continuous_across_negative_x_axis() {
        let xi = PlatformState::new([0.0; 4], 100.0).unwrap();
        let above = nonlinear_h(&TargetState::new(-100.0, 0.0, 1e-6, 0.0), &xi).unwrap()[1];
        let below = nonlinear_h(&TargetState::new(-100.0, 0.0, -1e-6, 0.0), &xi).unwrap()[1];
        assert!(wrap_angle(above - below).abs() < 1e-7);
    }

    #[test]
    fn deterministic_truth_without_noise() {
        let sys = system_matrices(0.1, 0.5, 0.5, &NOMINAL_SENSOR);
        let mut r = rng::stream(0, "t", 0);
        let s = TargetState::new(1.0, 2.0, 3.0, 4.0);
        assert_eq!(propagate_truth(&s, &sys, 0.0, &mut r).0, sys.transition * s.0);
        assert_eq!(propagate_truth(&TargetState::new(0.0, 0.0, 0.0, 0.0), &sys, 0.0, &mut r).0, Vector4::zeros());
    }

    #[test]
    fn orbit_formula() {
        let p = platform_orbit_state(18, 30_000.0, 250.0, 5_000.0).unwrap();
        assert!(p.kinematics[0].abs() < 1e-9);
        assert_relative_eq!(p.kinematics[1], -250.0);
        assert_relative_eq!(p.kinematics[2], 30_000.0);
        assert!(p.kinematics[3].abs() < 1e-9);
        let p = platform_orbit_state(72, 30_000.0, 250.0, 5_000.0).unwrap();
        assert_relative_eq!(p.kinematics[0], 30_000.0);
        assert!(p.kinematics[1].abs() < 1e-9);
        assert!(platform_orbit_state(0, 1.0, 1.0, 1.0).is_err());
        assert!(platform_orbit_state(73, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn orbit_locations_advance_per_segment() {
        let spec = build_persistent_scenario().platform;
        let seg = spec.segment_time().unwrap();
        assert_relative_eq!(seg, 10.47, epsilon = 0.01);
        assert_eq!(spec.location_at(0.0), Some(72));
        assert_eq!(spec.location_at(seg), Some(1));
        assert_eq!(spec.location_at(18.0 * seg), Some(18));
        let p = spec.state_at(18.0 * seg);
        let q = platform_orbit_state(18, 30_000.0, 250.0, 5_000.0).unwrap();
        for i in 0..4 {
            assert!((p.kinematics[i] - q.kinematics[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn priority_rules() {
        let two = vec![
            Covariance::from_diagonal(&[2.0, 2.0]).unwrap(),
            Covariance::identity(2),
        ];
        let a = macro_select_priority(&log_dets(&two).unwrap(), &PriorityRule::MostUncertain).unwrap();
        assert_eq!(a.leader, 0);
        assert_eq!(a.priorities, vec![1.0, 0.0]);
        let fixed = PriorityRule::Fixed {
            priorities: vec![0.6, 0.39, 0.008, 0.002],
        };
        assert_eq!(macro_select_priority(&[0.0; 4], &fixed).unwrap().leader, 0);
        let bad = PriorityRule::Fixed {
            priorities: vec![0.6, 0.3],
        };
        assert!(macro_select_priority(&[0.0; 2], &bad).is_err());
    }

    #[test]
    fn flyby_errors_pick_target_one() {
        let s = build_flyby_scenario();
        let errors: Vec<f64> = s.targets.iter().map(|t| mse(&t.estimate, &t.truth)).collect();
        assert_relative_eq!(errors[0], 710.865, epsilon = 1e-9);
        let a = macro_select_priority(&errors, &PriorityRule::MostUncertain).unwrap();
        assert_eq!(a.leader, 0);
    }

    #[test]
    fn scenarios_validate() {
        let f = build_flyby_scenario();
        f.validate().unwrap();
        assert_eq!(f.detection_prob, 0.75);
        assert_eq!(f.weights.operating_cost, 0.8);
        let p = build_persistent_scenario();
        p.validate().unwrap();
        assert_eq!(p.detection_prob, 0.9);
        let prob = p.stopping_problem().unwrap();
        assert_eq!(prob.priorities, vec![1.0, 0.0, 0.0, 0.0]);
        let prob = f.stopping_problem().unwrap();
        assert_eq!(prob.initial.leader, 0);
    }

    #[test]
    fn zero_cycles_is_empty() {
        let s = build_flyby_scenario();
        let t = run_macro_cycles(&s, &CyclePolicy::Periodic(1), 0, 1).unwrap();
        assert!(t.rows.is_empty() && t.stop_times.is_empty());
    }

    #[test]
    fn unmeasured_targets_stay_on_predictor() {
        let s = build_persistent_scenario();
        let t = run_macro_cycles(&s, &CyclePolicy::Periodic(5), 3, 2).unwrap();
        for r in &t.rows {
            if r.target != r.leader {
                assert!(!r.detected);
                assert_eq!(r.log_det_p, r.log_det_pbar);
            }
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_relative_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-15);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
    }
}
