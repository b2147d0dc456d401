//! Fly-by scenario: train an eigen-max policy and compare it with every
//! fixed stopping time on the same rollouts.

use monotone_stopping::gmti_sim::build_flyby_scenario;
use monotone_stopping::optimizer::{evaluate_cost_stats, optimize_policy, periodic_sweep, SpsaSchedule};
use monotone_stopping::policy::{param_dim, ParamLayout, PolicyFamily, PolicyParams};
use monotone_stopping::Result;

fn main() -> Result<()> {
    let problem = build_flyby_scenario().stopping_problem()?;
    let (family, layout) = (PolicyFamily::EigenMax, ParamLayout::PER_TARGET);
    let (l, m) = (problem.num_targets(), problem.state_dim());
    let template = PolicyParams::from_phi(family, layout, l, m, vec![0.0; param_dim(family, layout, l, m)])?;
    let schedule = SpsaSchedule {
        n_iterations: 300,
        n_restarts: 6,
        ..SpsaSchedule::default()
    };
    let (params, _) = optimize_policy(&problem, &template, &schedule, 3)?;
    let policy = evaluate_cost_stats(&problem, &params, 4, 500)?;
    let sweep = periodic_sweep(&problem, 60, 4, 500)?;
    let (k, best) = sweep.iter().enumerate().min_by(|a, b| a.1.mean.total_cmp(&b.1.mean)).unwrap();
    println!("optimized policy: {:.3} ± {:.3}", policy.mean, policy.std_err);
    println!("best fixed stopping time {}: {:.3} ± {:.3}", k + 1, best.mean, best.std_err);
    Ok(())
}
