//! Jacobian change D and Taylor ratio E for the five reference states.

use monotone_stopping::linearization::{validate_linearization, LinearizationSetup};
use monotone_stopping::Result;

fn main() -> Result<()> {
    let setup = LinearizationSetup {
        realizations: 20,
        ..LinearizationSetup::default()
    };
    let rep = validate_linearization(&setup, 7)?;
    println!("state  D(k={:?})", rep.steps);
    for (label, row) in rep.labels.iter().zip(&rep.d) {
        println!("{label:>5}  {row:.4?}");
    }
    for (g, gamma) in rep.gammas.iter().enumerate() {
        println!("E, gamma = {gamma}");
        for (label, row) in rep.labels.iter().zip(&rep.e[g]) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.2e}")).collect();
            println!("{label:>5}  {}", cells.join("  "));
        }
    }
    println!("within bounds: {}", rep.is_linear());
    Ok(())
}
