//! The four policy families on one belief, and a monotonicity check of each.

use monotone_stopping::filter_core::Covariance;
use monotone_stopping::observability::Belief;
use monotone_stopping::policy::{
    decide, decision_statistic, param_dim, verify_monotone, MonotoneSampler, ParamLayout, PolicyFamily, PolicyParams,
};
use monotone_stopping::Result;

fn main() -> Result<()> {
    let (l, m) = (3, 2);
    let belief = Belief::new(
        vec![
            Covariance::from_diagonal(&[0.5, 0.2])?,
            Covariance::from_diagonal(&[3.0, 1.0])?,
            Covariance::from_diagonal(&[2.0, 2.0])?,
        ],
        vec![
            Covariance::from_diagonal(&[1.0, 0.4])?,
            Covariance::from_diagonal(&[3.0, 1.0])?,
            Covariance::from_diagonal(&[2.0, 2.0])?,
        ],
        0,
    )?;
    for family in PolicyFamily::ALL {
        let layout = ParamLayout::PER_TARGET;
        let phi: Vec<f64> = (0..param_dim(family, layout, l, m)).map(|i| 0.3 + 0.1 * i as f64).collect();
        let params = PolicyParams::from_phi(family, layout, l, m, phi)?;
        let report = verify_monotone(&params, &MonotoneSampler::default(), 500);
        println!(
            "{:<9} statistic {:>8.4} -> {:?}; {} decisive pairs, {} violations",
            family.name(),
            decision_statistic(&belief, &params),
            decide(&belief, &params),
            report.decisive,
            report.violations.len()
        );
    }
    Ok(())
}
