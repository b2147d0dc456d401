//! How linear and how time-invariant the GMTI measurement map is.
//!
//! Two ratios are computed along a nominal constant-velocity path:
//!
//! - `D`: relative change of the Jacobian after `k` steps,
//!   `‖J(s̄_k, ξ_k) − J(s̄_0, ξ_0)‖₂ / ‖J(s̄_k, ξ_k)‖₂`.
//! - `E`: second-order Taylor term over the first-order term for a noisy
//!   true track `s_k`, with the Hessian taken at `γ s_k + (1 − γ) s̄_k`.

use nalgebra::{Matrix3x4, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmti_sim::{altitude_from_depression, propagate_truth, system_matrices, PlatformState, SensorNoise, SystemMatrices, TargetState};
use crate::rng;

/// Bound on `E` for the linear model to be acceptable.
pub const E_BOUND: f64 = 0.02;
/// Bound on `D` for the time-invariant model to be acceptable.
pub const D_BOUND: f64 = 0.06;

fn relative(s: &TargetState, xi: &PlatformState) -> (f64, f64, f64, f64) {
    let [px, pvx, py, pvy] = xi.kinematics;
    (s.0[0] - px, s.0[1] - pvx, s.0[2] - py, s.0[3] - pvy)
}

/// Closed-form Jacobian of range, azimuth and range rate with respect to
/// `(x, ẋ, y, ẏ)`.
pub fn jacobian_h(s: &TargetState, xi: &PlatformState) -> Result<Matrix3x4<f64>> {
    let (dx, dvx, dy, dvy) = relative(s, xi);
    let ground = dx * dx + dy * dy;
    let r2 = ground + xi.altitude * xi.altitude;
    if r2 == 0.0 || ground == 0.0 {
        return Err(Error::Domain("jacobian at the platform ground projection".into()));
    }
    let r = r2.sqrt();
    let r3 = r2 * r;
    Ok(Matrix3x4::new(
        dx / r,
        0.0,
        dy / r,
        0.0,
        -dy / ground,
        0.0,
        dx / ground,
        0.0,
        dvx / r - (dx * dy * dvy + dx * dx * dvx) / r3,
        dx / r,
        dvy / r - (dx * dy * dvx + dy * dy * dvy) / r3,
        dy / r,
    ))
}

/// Second derivatives of each measurement component, as three symmetric
/// 4×4 matrices, by central differences of [`jacobian_h`].
pub fn hessian_h(s: &TargetState, xi: &PlatformState) -> Result<[Matrix4<f64>; 3]> {
    let mut hess = [Matrix4::zeros(); 3];
    for j in 0..4 {
        let h = 1e-3 * s.0[j].abs().max(1.0);
        let mut plus = *s;
        let mut minus = *s;
        plus.0[j] += h;
        minus.0[j] -= h;
        let dj = (jacobian_h(&plus, xi)? - jacobian_h(&minus, xi)?) / (2.0 * h);
        for (i, m) in hess.iter_mut().enumerate() {
            for k in 0..4 {
                m[(k, j)] = dj[(i, k)];
            }
        }
    }
    for m in hess.iter_mut() {
        *m = (*m + m.transpose()) * 0.5;
    }
    Ok(hess)
}

fn spectral_norm(m: &Matrix3x4<f64>) -> f64 {
    m.singular_values().max()
}

/// Nominal path `s̄_{k+1} = F s̄_k` with the platform moving at constant
/// velocity, for `steps + 1` epochs.
pub fn nominal_path(
    s0: &TargetState,
    xi0: &PlatformState,
    sys: &SystemMatrices,
    period: f64,
    steps: usize,
) -> (Vec<TargetState>, Vec<PlatformState>) {
    let mut states = Vec::with_capacity(steps + 1);
    let mut platforms = Vec::with_capacity(steps + 1);
    let mut s = *s0;
    for k in 0..=steps {
        states.push(s);
        platforms.push(xi0.advanced(k as f64 * period));
        s = TargetState(sys.transition * s.0);
    }
    (states, platforms)
}

/// Relative change of the Jacobian between epochs 0 and `k`.
pub fn metric_d(nominal: &[TargetState], platform: &[PlatformState], k: usize) -> Result<f64> {
    if k >= nominal.len() || k >= platform.len() {
        return Err(Error::invalid("k", format!("path has only {} epochs", nominal.len().min(platform.len()))));
    }
    let jk = jacobian_h(&nominal[k], &platform[k])?;
    let j0 = jacobian_h(&nominal[0], &platform[0])?;
    Ok(spectral_norm(&(jk - j0)) / spectral_norm(&jk))
}

/// Ratio of the second-order to the first-order Taylor term.
pub fn metric_e(truth: &TargetState, nominal: &TargetState, xi: &PlatformState, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid("gamma", "must lie in [0, 1]"));
    }
    let delta: Vector4<f64> = truth.0 - nominal.0;
    let zeta = TargetState(nominal.0 + delta * gamma);
    let hess = hessian_h(&zeta, xi)?;
    let second = Vector3::from_fn(|i, _| (delta.transpose() * hess[i] * delta)[(0, 0)]);
    let first = jacobian_h(nominal, xi)? * delta;
    let denom = first.norm();
    if denom == 0.0 {
        return Err(Error::Domain("true and nominal states coincide to first order".into()));
    }
    Ok(0.5 * second.norm() / denom)
}

/// Geometry and sampling plan for [`validate_linearization`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearizationSetup {
    pub platform: PlatformState,
    pub period: f64,
    pub accel_std: [f64; 2],
    pub sensor: SensorNoise,
    pub initial_states: Vec<TargetState>,
    pub labels: Vec<String>,
    /// Acceleration noise of the true tracks.
    pub truth_accel_std: f64,
    pub steps: Vec<usize>,
    pub gammas: Vec<f64>,
    /// Noisy tracks averaged per `E` entry.
    pub realizations: usize,
}

impl Default for LinearizationSetup {
    fn default() -> Self {
        let (px, py) = (-35_000.0, -15_000.0);
        LinearizationSetup {
            platform: PlatformState {
                kinematics: [px, 100.0, py, 20.0],
                altitude: altitude_from_depression(px, py, 15.0),
            },
            period: 0.1,
            accel_std: [0.5, 0.5],
            sensor: SensorNoise {
                range: 20.0,
                azimuth_deg: 0.5,
                range_rate: 5.0,
            },
            initial_states: vec![
                TargetState::new(100.0, 3.0, 40.0, 7.0),
                TargetState::new(-20.0, -4.0, 200.0, 1.0),
                TargetState::new(50.0, 2.0, 95.0, 10.0),
                TargetState::new(-70.0, 5.0, -50.0, -6.0),
                TargetState::new(150.0, -15.0, 10.0, 0.0),
            ],
            labels: ["a", "b", "c", "d", "e"].map(String::from).to_vec(),
            truth_accel_std: 1.5,
            steps: vec![10, 50, 100],
            gammas: vec![0.1, 0.8],
            realizations: 100,
        }
    }
}

/// A table entry above its bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityFlag {
    pub metric: String,
    pub state: usize,
    pub step: usize,
    pub value: f64,
    pub bound: f64,
}

/// `D` per (initial state, step) and `E` per (γ, initial state, step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub labels: Vec<String>,
    pub steps: Vec<usize>,
    pub gammas: Vec<f64>,
    pub d: Vec<Vec<f64>>,
    pub e: Vec<Vec<Vec<f64>>>,
    pub flags: Vec<LinearityFlag>,
}

impl LinearityReport {
    pub fn is_linear(&self) -> bool {
        self.flags.is_empty()
    }
}

/// Evaluates `D` and the realization-averaged `E` over the setup's grid and
/// flags entries above [`D_BOUND`] or [`E_BOUND`].
///
/// `E` is undefined at step 0, where it is reported as 0.
pub fn validate_linearization(setup: &LinearizationSetup, seed: u64) -> Result<LinearityReport> {
    if setup.realizations == 0 {
        return Err(Error::invalid("realizations", "must be at least 1"));
    }
    if setup.labels.len() != setup.initial_states.len() {
        return Err(Error::invalid("labels", "one label per initial state is required"));
    }
    let sys = system_matrices(setup.period, setup.accel_std[0], setup.accel_std[1], &setup.sensor);
    let truth_sys = system_matrices(setup.period, setup.truth_accel_std, setup.truth_accel_std, &setup.sensor);
    let horizon = setup.steps.iter().copied().max().unwrap_or(0);
    let mut d = Vec::new();
    let mut e = vec![Vec::new(); setup.gammas.len()];
    let mut flags = Vec::new();

    for (i, s0) in setup.initial_states.iter().enumerate() {
        let (nominal, platform) = nominal_path(s0, &setup.platform, &sys, setup.period, horizon);
        let mut row = Vec::new();
        for &k in &setup.steps {
            let v = metric_d(&nominal, &platform, k)?;
            if v > D_BOUND {
                flags.push(LinearityFlag {
                    metric: "D".into(),
                    state: i,
                    step: k,
                    value: v,
                    bound: D_BOUND,
                });
            }
            row.push(v);
        }
        d.push(row);

        let mut sums = vec![vec![0.0; setup.steps.len()]; setup.gammas.len()];
        for r in 0..setup.realizations {
            let mut rng = rng::stream(seed, "linearization-truth", ((i as u64) << 32) | r as u64);
            let mut truth = *s0;
            for k in 0..=horizon {
                if let Some(col) = setup.steps.iter().position(|&sk| sk == k) {
                    if k > 0 {
                        for (g, gamma) in setup.gammas.iter().enumerate() {
                            sums[g][col] += metric_e(&truth, &nominal[k], &platform[k], *gamma)?;
                        }
                    }
                }
                truth = propagate_truth(&truth, &truth_sys, setup.truth_accel_std, &mut rng);
            }
        }
        for (g, gamma_sums) in sums.into_iter().enumerate() {
            let means: Vec<f64> = gamma_sums.iter().map(|s| s / setup.realizations as f64).collect();
            for (col, v) in means.iter().enumerate() {
                if *v > E_BOUND {
                    flags.push(LinearityFlag {
                        metric: format!("E(gamma={})", setup.gammas[g]),
                        state: i,
                        step: setup.steps[col],
                        value: *v,
                        bound: E_BOUND,
                    });
                }
            }
            e[g].push(means);
        }
    }
    Ok(LinearityReport {
        labels: setup.labels.clone(),
        steps: setup.steps.clone(),
        gammas: setup.gammas.clone(),
        d,
        e,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmti_sim::nonlinear_h;
    use approx::assert_relative_eq;

    fn platform() -> PlatformState {
        LinearizationSetup::default().platform
    }

    #[test]
    fn altitude_matches_depression_geometry() {
        assert_relative_eq!(platform().altitude, 10203.2, epsilon = 0.05);
    }

    #[test]
    fn jacobian_structure() {
        let xi = PlatformState::new([0.0, 0.0, 0.0, 0.0], 1000.0).unwrap();
        let j = jacobian_h(&TargetState::new(400.0, 0.0, 0.0, 0.0), &xi).unwrap();
        let r = (400.0f64.powi(2) + 1000.0f64.powi(2)).sqrt();
        assert_relative_eq!(j[(0, 0)], 400.0 / r);
        assert_eq!([j[(0, 1)], j[(0, 2)], j[(0, 3)]], [0.0; 3]);
        assert_eq!(j[(2, 0)], 0.0);
        assert_eq!(j[(2, 2)], 0.0);
        let j = jacobian_h(&TargetState::new(120.0, 4.0, -80.0, 2.0), &platform()).unwrap();
        assert_eq!(j[(1, 1)], 0.0);
        assert_eq!(j[(1, 3)], 0.0);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let xi = platform();
        let s = TargetState::new(120.0, 4.0, -80.0, 2.0);
        let j = jacobian_h(&s, &xi).unwrap();
        for c in 0..4 {
            let h = 1e-4 * s.0[c].abs().max(1.0);
            let mut p = s;
            let mut m = s;
            p.0[c] += h;
            m.0[c] -= h;
            let fd = (nonlinear_h(&p, &xi).unwrap() - nonlinear_h(&m, &xi).unwrap()) / (2.0 * h);
            for i in 0..3 {
                let scale = j.row(i).amax();
                assert!((fd[i] - j[(i, c)]).abs() <= 1e-5 * scale, "row {i} col {c}");
            }
        }
    }

    #[test]
    fn hessian_slices_are_symmetric_and_match_calculus() {
        let xi = PlatformState::new([0.0; 4], 800.0).unwrap();
        let s = TargetState::new(600.0, 1.0, 0.0, 0.0);
        let h = hessian_h(&s, &xi).unwrap();
        let r = 1000.0;
        assert_relative_eq!(h[0][(2, 2)], 1.0 / r, max_relative = 1e-6);
        for m in &h {
            assert!((m - m.transpose()).amax() <= 1e-12 * m.amax().max(1e-300));
        }
    }

    #[test]
    fn d_vanishes_at_start() {
        let setup = LinearizationSetup::default();
        let sys = system_matrices(0.1, 0.5, 0.5, &setup.sensor);
        let (n, p) = nominal_path(&setup.initial_states[0], &setup.platform, &sys, 0.1, 5);
        assert_eq!(metric_d(&n, &p, 0).unwrap(), 0.0);
        assert!(metric_d(&n, &p, 6).is_err());
    }

    #[test]
    fn e_scales_linearly_with_offset() {
        let xi = platform();
        let nominal = TargetState::new(100.0, 3.0, 40.0, 7.0);
        let dir = Vector4::new(3.0, -1.0, 2.0, 0.5);
        let e1 = metric_e(&TargetState(nominal.0 + dir), &nominal, &xi, 0.1).unwrap();
        let e2 = metric_e(&TargetState(nominal.0 + dir * 0.5), &nominal, &xi, 0.1).unwrap();
        assert!((e2 / e1 - 0.5).abs() < 0.05);
        assert!(metric_e(&nominal, &nominal, &xi, 0.1).is_err());
    }
}
