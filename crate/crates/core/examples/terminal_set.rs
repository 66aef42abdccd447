//! Terminal ellipsoids, their sampled invariance and the level update.

use dmpsc::certifier::NUMERIC_BACKOFF;
use dmpsc::certifier::back_off;
use dmpsc::netmodel::{build_chain_benchmark, ChainParams};
use dmpsc::terminal::{sample_terminal_properties, synthesize_terminal, update_alpha, TerminalOptions};
use dmpsc::tube::{synthesize_tube, tighten_constraints, TubeOptions};
use nalgebra::DVector;

fn main() -> dmpsc::Result<()> {
    let model = build_chain_benchmark(&ChainParams::benchmark())?;
    let tube = synthesize_tube(&model, &TubeOptions::default())?;
    let tightened = back_off(&tighten_constraints(&model, &tube)?, NUMERIC_BACKOFF)?;
    let terminal = synthesize_terminal(&model, &tightened, &TerminalOptions::default())?;
    println!("alpha_bar = {:.6}", terminal.alpha_bar);
    println!("decrease margin = {:.3e} (nonpositive means Lyapunov decrease)", terminal.decrease_margin(&model));

    let report = sample_terminal_properties(&model, &tightened, &terminal, 2000, 3)?;
    println!(
        "boundary samples: {} invariance, {} state, {} input violations",
        report.invariance_violations, report.state_violations, report.input_violations
    );

    // levels move with the terminal state but their sum never grows
    let z: Vec<DVector<f64>> = (0..model.num_subsystems())
        .map(|i| DVector::from_element(model.neighborhood_dim(i), 0.05))
        .collect();
    let next = update_alpha(&terminal, &terminal.alpha0, &z)?;
    println!(
        "sum of levels: {:.6} -> {:.6}",
        terminal.alpha0.iter().sum::<f64>(),
        next.iter().sum::<f64>()
    );
    Ok(())
}
