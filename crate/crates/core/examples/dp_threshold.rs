//! Value iteration on the scalar problem: switching curve and optimal cost.

use monotone_stopping::dp_oracle::{check_monotone_policy, extract_threshold, optimal_cost, value_iterate, ScalarStopModel};
use monotone_stopping::Result;

fn main() -> Result<()> {
    let model = ScalarStopModel::reference();
    let table = value_iterate(&model, 1e-8, 100_000)?;
    println!(
        "{} iterations, Bellman residual {:.2e}, {} monotonicity violations",
        table.iterations,
        table.bellman_residual(),
        check_monotone_policy(&table)
    );
    println!("P_other      g(P_other)");
    for (p, g) in extract_threshold(&table)?.iter().step_by(16) {
        println!("{p:>9.4}  {g:>9.4}");
    }
    println!("optimal cost from (20, 1.5): {:.4}", optimal_cost(&table, &[20.0, 20.0, 1.5, 1.5])?);
    Ok(())
}
