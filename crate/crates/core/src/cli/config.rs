//! Run configuration files.
//!
//! A configuration is one JSON document. Only `seed` is mandatory; every
//! other section falls back to its default, and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dp_oracle::{ScalarBelief, ScalarStopModel};
use crate::error::{Error, Result};
use crate::gmti_sim::Scenario;
use crate::linearization::LinearizationSetup;
use crate::optimizer::SpsaSchedule;
use crate::policy::{ParamLayout, PolicyFamily};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySetup {
    pub family: PolicyFamily,
    #[serde(default)]
    pub layout: ParamLayout,
}

impl Default for PolicySetup {
    fn default() -> Self {
        PolicySetup {
            family: PolicyFamily::EigenMax,
            layout: ParamLayout::PER_TARGET,
        }
    }
}

/// Operating costs and detection probabilities of the sensitivity grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityGrid {
    pub operating_costs: Vec<f64>,
    pub detection_probs: Vec<f64>,
}

impl Default for SensitivityGrid {
    fn default() -> Self {
        SensitivityGrid {
            operating_costs: vec![0.2, 0.4, 0.8, 1.6],
            detection_probs: vec![0.6, 0.75, 0.9],
        }
    }
}

/// Random perturbations of the scenario's initial condition.
///
/// Each target's covariance is scaled by a factor drawn log-uniformly from
/// `covariance_scale`, and its estimate is redrawn around the truth with
/// that covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConditionSet {
    pub count: usize,
    pub covariance_scale: [f64; 2],
}

impl Default for InitialConditionSet {
    fn default() -> Self {
        InitialConditionSet {
            count: 10,
            covariance_scale: [0.25, 4.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersistentRun {
    pub cycles: usize,
    /// Policies are optimized at every `location_stride`-th orbit location;
    /// the others use the nearest optimized one.
    pub location_stride: usize,
}

impl Default for PersistentRun {
    fn default() -> Self {
        PersistentRun {
            cycles: 40,
            location_stride: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpRun {
    pub model: ScalarStopModel,
    /// `(P^a, P̄^a, P^o, P̄^o)` at which the optimal cost is reported.
    pub initial: ScalarBelief,
    #[serde(default = "default_dp_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_dp_iterations")]
    pub max_iterations: usize,
}

fn default_dp_tolerance() -> f64 {
    1e-8
}

fn default_dp_iterations() -> usize {
    100_000
}

impl Default for DpRun {
    fn default() -> Self {
        DpRun {
            model: ScalarStopModel::reference(),
            initial: [20.0, 20.0, 1.5, 1.5],
            tolerance: default_dp_tolerance(),
            max_iterations: default_dp_iterations(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyRun {
    pub samples: usize,
    /// Dimension of the sampled covariances.
    pub state_dim: usize,
    pub num_targets: usize,
}

impl Default for VerifyRun {
    fn default() -> Self {
        VerifyRun {
            samples: 1000,
            state_dim: 4,
            num_targets: 4,
        }
    }
}

fn default_evaluation_rollouts() -> usize {
    1000
}

/// Everything a command needs besides its command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    #[serde(default)]
    pub policy: PolicySetup,
    #[serde(default)]
    pub spsa: SpsaSchedule,
    /// Rollouts behind every reported cost.
    #[serde(default = "default_evaluation_rollouts")]
    pub evaluation_rollouts: usize,
    #[serde(default)]
    pub sensitivity: SensitivityGrid,
    #[serde(default)]
    pub initial_conditions: InitialConditionSet,
    #[serde(default)]
    pub persistent: PersistentRun,
    #[serde(default)]
    pub linearization: LinearizationSetup,
    #[serde(default)]
    pub dp: DpRun,
    #[serde(default)]
    pub verify: VerifyRun,
}

/// Command-line values that replace configuration entries.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub operating_cost: Option<f64>,
    pub detection_prob: Option<f64>,
    pub tau_max: Option<usize>,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            scenario: None,
            policy: PolicySetup::default(),
            spsa: SpsaSchedule::default(),
            evaluation_rollouts: default_evaluation_rollouts(),
            sensitivity: SensitivityGrid::default(),
            initial_conditions: InitialConditionSet::default(),
            persistent: PersistentRun::default(),
            linearization: LinearizationSetup::default(),
            dp: DpRun::default(),
            verify: VerifyRun::default(),
        }
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(c) = o.operating_cost {
            if let Some(s) = self.scenario.as_mut() {
                s.weights.operating_cost = c;
            }
            self.dp.model.weights.operating_cost = c;
        }
        if let Some(pd) = o.detection_prob {
            if let Some(s) = self.scenario.as_mut() {
                s.detection_prob = pd;
            }
            self.dp.model.leader.detection_prob = pd;
            self.dp.model.other.detection_prob = pd;
        }
        if let Some(t) = o.tau_max {
            if let Some(s) = self.scenario.as_mut() {
                s.tau_max = t;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.scenario {
            s.validate()?;
        }
        self.spsa.validate()?;
        if self.evaluation_rollouts == 0 {
            return Err(Error::invalid("evaluation_rollouts", "must be at least 1"));
        }
        let g = &self.sensitivity;
        if g.operating_costs.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::invalid("sensitivity.operating_costs", "must be positive"));
        }
        if g.detection_probs.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(Error::invalid("sensitivity.detection_probs", "must lie in (0, 1]"));
        }
        let ic = &self.initial_conditions;
        if !(ic.covariance_scale[0] > 0.0 && ic.covariance_scale[1] >= ic.covariance_scale[0]) {
            return Err(Error::invalid("initial_conditions.covariance_scale", "need 0 < low <= high"));
        }
        if self.persistent.location_stride == 0 {
            return Err(Error::invalid("persistent.location_stride", "must be at least 1"));
        }
        self.dp.model.validate()?;
        if !(self.dp.tolerance > 0.0) {
            return Err(Error::invalid("dp.tolerance", "must be positive"));
        }
        if self.verify.num_targets < 2 || self.verify.state_dim == 0 {
            return Err(Error::invalid("verify", "need at least two targets and a nonempty state"));
        }
        Ok(())
    }

    /// The scenario section, required by the tracking commands.
    pub fn scenario(&self) -> Result<&Scenario> {
        self.scenario
            .as_ref()
            .ok_or_else(|| Error::invalid("scenario", "this command needs a scenario section"))
    }

    /// Hex SHA-256 of the canonical JSON form, overrides included.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("configuration serializes")))
    }
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    RunConfig::from_json(&text, &path.display().to_string())
}
