//! Mutual-information stopping cost and the transformed running cost for a
//! three-target belief under each aggregation.

use monotone_stopping::filter_core::{Covariance, TargetModel};
use monotone_stopping::observability::{
    stopping_cost, transformed_running_cost, Aggregation, Belief, CostWeights,
};
use monotone_stopping::Result;
use nalgebra::DMatrix;

fn main() -> Result<()> {
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    let model = TargetModel::new(one(1.0), one(1.0), one(1.0), one(1.0), one(1.0), 0.75, 1.0)?;
    let models = vec![model.clone(), model.clone(), model];
    let belief = Belief::new(
        vec![Covariance::scalar(4.0)?, Covariance::scalar(2.0)?, Covariance::scalar(0.5)?],
        vec![Covariance::scalar(6.0)?, Covariance::scalar(2.5)?, Covariance::scalar(3.0)?],
        0,
    )?;
    for agg in [Aggregation::MaxDiff, Aggregation::MinDiff, Aggregation::AvgDiff] {
        let w = CostWeights::new(vec![0.5, 0.5, 0.5], vec![1.0, 1.0, 1.0], 0.8, agg)?;
        println!(
            "{agg:?}: stop now {:.4}, continue-minus-stop {:.4}",
            stopping_cost(&belief, &w)?,
            transformed_running_cost(&belief, &w, &models, &[1.0, 0.0, 0.0])?
        );
    }
    Ok(())
}
