//! Certifies one aggressive proposal on the chain and shows how much it was
//! changed.

use dmpsc::certifier::{certify, init_session, Artifacts, CertRequest, CertSettings};
use dmpsc::netmodel::{build_chain_benchmark, ChainParams};
use dmpsc::terminal::TerminalOptions;
use dmpsc::tube::TubeOptions;
use nalgebra::DVector;

fn main() -> dmpsc::Result<()> {
    let model = build_chain_benchmark(&ChainParams::benchmark())?;
    let artifacts = Artifacts::synthesize(&model, &TubeOptions::default(), &TerminalOptions::default())?;
    let mut x = DVector::zeros(model.total_state_dim());
    x[2] = -0.2;
    x[3] = 0.3;
    let session = init_session(&model, &artifacts, &x, CertSettings::default())?;

    // full throttle on mass 2, toward its tight upper bound
    let mut u_l = DVector::zeros(model.total_input_dim());
    u_l[1] = 5.0;
    let result = certify(&model, &artifacts, &session, &CertRequest { x, u_l: u_l.clone() })?;
    println!("proposed u_2 = {:.3}, certified u_2 = {:.3}", u_l[1], result.u_cert[1]);
    println!("objective {:.4}, status {}, {:.1} ms", result.objective, result.status, 1e3 * result.solve_time);
    println!("budgets after negotiation: {:.4?}", result.beta_tilde);
    Ok(())
}
