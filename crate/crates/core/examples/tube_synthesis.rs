//! Synthesizes the structured tube, checks it two ways and tightens the
//! constraints.

use dmpsc::netmodel::{build_chain_benchmark, ChainParams};
use dmpsc::tube::{rpi_certificate, synthesize_tube, tighten_constraints, verify_rpi_monte_carlo, TubeOptions};

fn main() -> dmpsc::Result<()> {
    let model = build_chain_benchmark(&ChainParams::benchmark())?;
    let tube = synthesize_tube(&model, &TubeOptions::default())?;
    println!("tau = {:.4}, objective = {:.3}", tube.tau_global, tube.objective);

    let cert = rpi_certificate(&model, &tube);
    println!("S-procedure: max eigenvalue {:.2e}, level {:.9}", cert.max_eigenvalue, cert.level);

    let report = verify_rpi_monte_carlo(&model, &tube, 10_000, 1, 1e-9);
    println!("Monte Carlo: {} of {} samples left the tube", report.violations, report.samples);
    let bad = verify_rpi_monte_carlo(&model, &tube.with_scaled_shape(100.0), 10_000, 1, 1e-9);
    println!("shrunk 100x: {} of {} samples left the tube", bad.violations, bad.samples);

    let tightened = tighten_constraints(&model, &tube)?;
    let rows = tightened.state[1].offsets();
    println!("mass 2 tightened state offsets: {:.4?}", rows.as_slice());
    Ok(())
}
