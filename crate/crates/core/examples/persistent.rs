//! Persistent surveillance: a few macro cycles with a periodic
//! micro-manager, printing the leader and log-determinants per cycle.

use monotone_stopping::gmti_sim::{build_persistent_scenario, run_macro_cycles, CyclePolicy};
use monotone_stopping::Result;

fn main() -> Result<()> {
    let scenario = build_persistent_scenario();
    let trace = run_macro_cycles(&scenario, &CyclePolicy::Periodic(20), 8, 5)?;
    for (c, leader) in trace.leaders.iter().enumerate() {
        let last: Vec<String> = trace
            .rows
            .iter()
            .filter(|r| r.cycle == c && r.epoch == trace.stop_times[c])
            .map(|r| format!("{:.2}", r.log_det_p))
            .collect();
        println!(
            "cycle {c}: leader {} at location {}, stopped at {}, log|P| = [{}]",
            leader + 1,
            trace.locations[c].map_or("-".to_string(), |l| l.to_string()),
            trace.stop_times[c],
            last.join(", ")
        );
    }
    Ok(())
}
