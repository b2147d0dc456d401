//! SPSA on the scalar two-target problem, compared with fixed stopping times.

use monotone_stopping::dp_oracle::ScalarStopModel;
use monotone_stopping::optimizer::{evaluate_cost_stats, optimize_policy, periodic_sweep, SpsaSchedule};
use monotone_stopping::policy::{param_dim, ParamLayout, PolicyFamily, PolicyParams};
use monotone_stopping::Result;

fn main() -> Result<()> {
    let model = ScalarStopModel::reference();
    let problem = model.stopping_problem(&[20.0, 20.0, 1.5, 1.5], 200)?;
    let (family, layout) = (PolicyFamily::EigenSum, ParamLayout::PER_TARGET);
    let template = PolicyParams::from_phi(family, layout, 2, 1, vec![0.0; param_dim(family, layout, 2, 1)])?;
    let schedule = SpsaSchedule {
        n_iterations: 300,
        n_restarts: 4,
        initial_step: Some(0.5),
        ..SpsaSchedule::default()
    };
    let (params, outcome) = optimize_policy(&problem, &template, &schedule, 1)?;
    let est = evaluate_cost_stats(&problem, &params, 2, 4000)?;
    println!("policy phi {:?}", params.phi());
    println!("training cost {:.4}, evaluated {:.4} ± {:.4}", outcome.best_cost, est.mean, est.std_err);
    for (k, e) in periodic_sweep(&problem, 6, 2, 4000)?.iter().enumerate() {
        println!("stop at epoch {}: {:.4} ± {:.4}", k + 1, e.mean, e.std_err);
    }
    Ok(())
}
