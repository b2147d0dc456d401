//! Riccati and Lyapunov updates on a pair of ordered covariances, and the
//! determinant ratios that shrink as the covariance grows.

use monotone_stopping::filter_core::{
    det_ratio_lyapunov, det_ratio_riccati, loewner_geq, lyapunov_update, riccati_update, Covariance, DetectionOutcome,
    TargetModel,
};
use monotone_stopping::Result;
use nalgebra::DMatrix;

fn main() -> Result<()> {
    let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
    let g = DMatrix::identity(2, 2) * 0.1;
    let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let model = TargetModel::new(f, g, h, DMatrix::identity(2, 2), DMatrix::from_element(1, 1, 4.0), 0.8, 1.0)?;

    let small = Covariance::from_diagonal(&[2.0, 1.0])?;
    let large = small.plus_outer(&DMatrix::from_row_slice(2, 1, &[1.0, 0.5]))?;
    println!("large ⪰ small: {}", loewner_geq(&large, &small, 1e-12));

    for (name, p) in [("small", &small), ("large", &large)] {
        let hit = riccati_update(p, DetectionOutcome::DETECTED, &model, 1.0)?;
        let miss = lyapunov_update(p, &model)?;
        println!(
            "{name}: trace {:.3} -> detected {:.3}, missed {:.3}; det ratios lyapunov {:.4} riccati {:.4}",
            p.trace(),
            hit.trace(),
            miss.trace(),
            det_ratio_lyapunov(p, &model)?,
            det_ratio_riccati(p, &model, 1.0)?,
        );
    }
    Ok(())
}
