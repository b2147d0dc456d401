//! Covariance algebra for Kalman tracking with missed detections.
//!
//! The decision problem only ever looks at covariances, so this module works
//! on them alone: the Lyapunov (predictor) and measurement-dependent Riccati
//! updates, the Loewner partial order, and the determinant ratios whose
//! monotonicity drives the structure of the optimal stopping policy.
//!
//! Inversions go through Cholesky solves. Every update result is
//! re-symmetrized as `(A + Aᵀ)/2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative asymmetry accepted by [`Covariance::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalue floor, relative to the largest eigenvalue, for numerical PSD.
pub const PSD_TOL: f64 = 1e-10;
/// Default Loewner tolerance, relative to the trace of the left operand.
pub const LOEWNER_REL_TOL: f64 = 1e-9;

/// A symmetric positive-semidefinite matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Covariance(DMatrix<f64>);

impl Covariance {
    /// Validates symmetry and numerical positive semidefiniteness.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::dim(
                "Covariance::new",
                format!("{}x{} is not square", m.nrows(), m.ncols()),
            ));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("covariance", "non-finite entry"));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let asym = (&m - m.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::invalid(
                "covariance",
                format!("asymmetry {asym:e} exceeds tolerance"),
            ));
        }
        let c = Covariance(symmetrize(m));
        let eig = c.eigenvalues_sorted();
        let top = eig.first().copied().unwrap_or(0.0).max(0.0);
        if let Some(&low) = eig.last() {
            if low < -PSD_TOL * top || (top == 0.0 && low < 0.0) {
                return Err(Error::invalid(
                    "covariance",
                    format!("eigenvalue {low:e} is negative"),
                ));
            }
        }
        Ok(c)
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn identity(m: usize) -> Self {
        Covariance(DMatrix::identity(m, m))
    }

    /// 1×1 covariance.
    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, v))
    }

    /// Wraps a matrix known to be symmetric PSD by construction; only
    /// symmetrizes.
    pub(crate) fn from_symmetric(m: DMatrix<f64>) -> Self {
        Covariance(symmetrize(m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Natural log-determinant; fails unless the matrix is positive definite.
    pub fn log_det(&self) -> Result<f64> {
        let chol = self
            .0
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Domain("log-determinant of a singular covariance".into()))?;
        Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    }

    pub fn det(&self) -> f64 {
        self.0.determinant()
    }

    /// `xᵀ P x`.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.0 * x))
    }

    /// Eigenvalues in decreasing order.
    pub fn eigenvalues_sorted(&self) -> Vec<f64> {
        eigenvalues_sorted(self)
    }

    /// `self + A Aᵀ`, which dominates `self` in the Loewner order.
    pub fn plus_outer(&self, a: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() != self.dim() {
            return Err(Error::dim(
                "Covariance::plus_outer",
                format!("factor has {} rows, covariance is {}", a.nrows(), self.dim()),
            ));
        }
        Ok(Covariance::from_symmetric(&self.0 + a * a.transpose()))
    }
}

impl TryFrom<Vec<Vec<f64>>> for Covariance {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("covariance rows", "ragged or non-square rows"));
        }
        Covariance::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }
}

impl From<Covariance> for Vec<Vec<f64>> {
    fn from(c: Covariance) -> Self {
        c.0.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Whether a missed detection (`z = ∅`) occurred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub detected: bool,
}

impl DetectionOutcome {
    pub const DETECTED: Self = DetectionOutcome { detected: true };
    pub const MISSED: Self = DetectionOutcome { detected: false };
}

/// Linear-Gaussian target model with missed detections.
///
/// The effective measurement noise for a target with priority `ν` is
/// `R_base / (ν Δ)`, with `Δ` the number of fast-time observations
/// integrated per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetModel {
    pub transition: DMatrix<f64>,
    pub noise_gain: DMatrix<f64>,
    pub observation: DMatrix<f64>,
    pub process_noise: DMatrix<f64>,
    pub measurement_noise: DMatrix<f64>,
    pub detection_prob: f64,
    pub integration_count: f64,
}

impl TargetModel {
    pub fn new(
        transition: DMatrix<f64>,
        noise_gain: DMatrix<f64>,
        observation: DMatrix<f64>,
        process_noise: DMatrix<f64>,
        measurement_noise: DMatrix<f64>,
        detection_prob: f64,
        integration_count: f64,
    ) -> Result<Self> {
        let model = TargetModel {
            transition,
            noise_gain,
            observation,
            process_noise,
            measurement_noise,
            detection_prob,
            integration_count,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.transition.nrows();
        if !self.transition.is_square() {
            return Err(Error::dim("TargetModel", "F must be square"));
        }
        if self.noise_gain.nrows() != m {
            return Err(Error::dim("TargetModel", "G must have m rows"));
        }
        if self.observation.ncols() != m {
            return Err(Error::dim("TargetModel", "H must have m columns"));
        }
        let mz = self.observation.nrows();
        if self.process_noise.shape() != (m, m) {
            return Err(Error::dim("TargetModel", "Q must be m×m"));
        }
        if self.measurement_noise.shape() != (mz, mz) {
            return Err(Error::dim("TargetModel", "R must be m_z×m_z"));
        }
        Covariance::new(self.process_noise.clone())
            .map_err(|e| Error::invalid("process_noise", e.to_string()))?;
        if self.measurement_noise.clone().cholesky().is_none()
            || (&self.measurement_noise - self.measurement_noise.transpose()).amax()
                > SYMMETRY_TOL * self.measurement_noise.amax()
        {
            return Err(Error::invalid(
                "measurement_noise",
                "must be symmetric positive definite",
            ));
        }
        if !(0.0..=1.0).contains(&self.detection_prob) {
            return Err(Error::invalid("detection_prob", "must lie in [0, 1]"));
        }
        if !(self.integration_count >= 1.0) {
            return Err(Error::invalid("integration_count", "must be at least 1"));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.transition.nrows()
    }

    /// `R_base / (ν Δ)`.
    pub fn effective_noise(&self, priority: f64) -> DMatrix<f64> {
        &self.measurement_noise / (priority * self.integration_count)
    }

    fn check_dim(&self, p: &Covariance, context: &'static str) -> Result<()> {
        if p.dim() != self.state_dim() {
            return Err(Error::dim(
                context,
                format!("covariance is {}×{}, model state is {}", p.dim(), p.dim(), self.state_dim()),
            ));
        }
        Ok(())
    }
}

/// Kalman predictor update `F P Fᵀ + Q`.
pub fn lyapunov_update(p: &Covariance, model: &TargetModel) -> Result<Covariance> {
    model.check_dim(p, "lyapunov_update")?;
    let f = &model.transition;
    Ok(Covariance::from_symmetric(
        f * p.matrix() * f.transpose() + &model.process_noise,
    ))
}

/// Measurement-dependent Riccati update.
///
/// A missed detection reduces to [`lyapunov_update`]. `priority` must be
/// strictly positive; zero-priority targets are never measured and should be
/// propagated with the Lyapunov update.
pub fn riccati_update(
    p: &Covariance,
    outcome: DetectionOutcome,
    model: &TargetModel,
    priority: f64,
) -> Result<Covariance> {
    if !outcome.detected {
        return lyapunov_update(p, model);
    }
    model.check_dim(p, "riccati_update")?;
    if !(priority > 0.0) {
        return Err(Error::Domain(format!(
            "riccati_update needs a positive priority, got {priority}"
        )));
    }
    let f = &model.transition;
    let h = &model.observation;
    let pm = p.matrix();
    let innovation = h * pm * h.transpose() + model.effective_noise(priority);
    let chol = innovation
        .cholesky()
        .ok_or_else(|| Error::Numerical("innovation covariance is singular".into()))?;
    let cross = f * pm * h.transpose();
    let gain_term = chol.solve(&cross.transpose());
    Ok(Covariance::from_symmetric(
        f * pm * f.transpose() + &model.process_noise - cross * gain_term,
    ))
}

/// `P ⪰ Q` up to `tol`: the smallest eigenvalue of `P − Q` is at least `-tol`.
pub fn loewner_geq(p: &Covariance, q: &Covariance, tol: f64) -> bool {
    if p.dim() != q.dim() {
        return false;
    }
    let diff = symmetrize(p.matrix() - q.matrix());
    diff.symmetric_eigenvalues().min() >= -tol
}

/// Scale-aware default tolerance for comparisons against `p`.
pub fn default_loewner_tol(p: &Covariance) -> f64 {
    LOEWNER_REL_TOL * p.trace().abs().max(f64::MIN_POSITIVE)
}

pub fn eigenvalues_sorted(p: &Covariance) -> Vec<f64> {
    let mut ev: Vec<f64> = p.matrix().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

fn require_positive_definite(p: &Covariance, context: &str) -> Result<f64> {
    p.log_det()
        .map_err(|_| Error::Domain(format!("{context}: det(P) must be positive")))
}

fn det_ratio(updated: &Covariance, log_det_p: f64) -> Result<f64> {
    match updated.matrix().clone().cholesky() {
        Some(chol) => {
            let ld = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            Ok((ld - log_det_p).exp())
        }
        // Singular numerator (e.g. F = 0 with singular Q): fall back to LU.
        None => Ok(updated.det() / log_det_p.exp()),
    }
}

/// `det(L(P)) / det(P)`, decreasing in `P` for any `F`.
pub fn det_ratio_lyapunov(p: &Covariance, model: &TargetModel) -> Result<f64> {
    let ld = require_positive_definite(p, "det_ratio_lyapunov")?;
    det_ratio(&lyapunov_update(p, model)?, ld)
}

/// `det(R(P, detected)) / det(P)`, decreasing in `P` for any `F`.
pub fn det_ratio_riccati(p: &Covariance, model: &TargetModel, priority: f64) -> Result<f64> {
    let ld = require_positive_definite(p, "det_ratio_riccati")?;
    det_ratio(
        &riccati_update(p, DetectionOutcome::DETECTED, model, priority)?,
        ld,
    )
}

/// Residual of `det(Z) det(X + Y Z⁻¹ W) = det(X) det(Z + W X⁻¹ Y)`.
pub fn schur_det_identity_check(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    w: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<f64> {
    if !x.is_square() || !z.is_square() {
        return Err(Error::dim("schur_det_identity_check", "X and Z must be square"));
    }
    if y.shape() != (x.nrows(), z.nrows()) || w.shape() != (z.nrows(), x.nrows()) {
        return Err(Error::dim(
            "schur_det_identity_check",
            "Y must be n×k and W k×n for X n×n, Z k×k",
        ));
    }
    let x_inv = x
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Domain("X is singular".into()))?;
    let z_inv = z
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Domain("Z is singular".into()))?;
    let lhs = z.determinant() * (x + y * z_inv * w).determinant();
    let rhs = x.determinant() * (z + w * x_inv * y).determinant();
    Ok((lhs - rhs).abs())
}
