//! Closed-loop cost and solver time of both certified policies against
//! the tube MPC baseline.

use dmpsc::bench::{compare_controllers, CompareConfig};
use dmpsc::certifier::Artifacts;
use dmpsc::netmodel::{build_chain_benchmark, ChainParams};
use dmpsc::terminal::TerminalOptions;
use dmpsc::tube::TubeOptions;

fn main() -> dmpsc::Result<()> {
    let model = build_chain_benchmark(&ChainParams::benchmark())?;
    let artifacts = Artifacts::synthesize(&model, &TubeOptions::default(), &TerminalOptions::default())?;
    let runs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let summary = compare_controllers(
        &model,
        &artifacts,
        &CompareConfig {
            runs,
            ..CompareConfig::default()
        },
    )?;
    for v in &summary.variants {
        println!(
            "{:<14} cost median {:8.3} [{:.3}, {:.3}]  solver ms median {:7.1}",
            v.name, v.cost.median, v.cost.q1, v.cost.q3, v.solve_time.median
        );
    }
    Ok(())
}
