//! The linear policy drives mass 2 past its upper bound; the certifier
//! keeps it inside while leaving the other masses alone.

use dmpsc::bench::{approach_scenario, make_policy, simulate, Controller, PolicySpec, SimConfig};
use dmpsc::certifier::Artifacts;
use dmpsc::netmodel::{build_chain_benchmark, ChainParams};
use dmpsc::terminal::TerminalOptions;
use dmpsc::tube::TubeOptions;

fn main() -> dmpsc::Result<()> {
    let model = build_chain_benchmark(&ChainParams::benchmark())?;
    let artifacts = Artifacts::synthesize(&model, &TubeOptions::default(), &TerminalOptions::default())?;
    let seed = 0;
    let x0 = approach_scenario(&model, seed);
    let config = SimConfig {
        seed,
        ..SimConfig::default()
    };
    for controller in [Controller::Raw, Controller::Certified] {
        let mut policy = make_policy(&PolicySpec::linear(), &model)?;
        let trace = simulate(&model, &artifacts, policy.as_mut(), controller, &x0, &config, None)?;
        let peak = trace.states().iter().map(|x| x[2]).fold(f64::MIN, f64::max);
        let changed = trace
            .steps
            .iter()
            .filter(|s| (s.u_cert[1] - s.u_l[1]).abs() > 1e-6)
            .count();
        println!(
            "{controller:>9}: max p_2 = {peak:.4}, violations {}, cost {:.3}, mass 2 input changed at {changed} steps",
            trace.state_violations, trace.total_cost
        );
    }
    Ok(())
}
