//! Builds the 9-mass chain, checks it and round-trips it through JSON.

use dmpsc::netmodel::{build_chain_benchmark, ChainParams, NetworkModel};
use nalgebra::DVector;

fn main() -> dmpsc::Result<()> {
    let model = build_chain_benchmark(&ChainParams::benchmark())?;
    println!(
        "{} subsystems, {} states, {} inputs",
        model.num_subsystems(),
        model.total_state_dim(),
        model.total_input_dim()
    );
    for i in [0, 1, 4] {
        println!("N_{} = {:?}", i + 1, model.neighborhood(i).iter().map(|j| j + 1).collect::<Vec<_>>());
    }
    println!("validation: {}", if model.validate().is_admissible() { "ok" } else { "issues" });

    let json = model.to_json_string()?;
    let back = NetworkModel::from_json_str(&json)?;
    assert_eq!(back.total_state_dim(), model.total_state_dim());
    println!("JSON round trip: {} bytes", json.len());

    // one undisturbed step with a push on the second mass
    let x = DVector::zeros(model.total_state_dim());
    let mut u = DVector::zeros(model.total_input_dim());
    u[1] = 1.0;
    let w = DVector::zeros(model.total_disturbance_dim());
    let next = model.step_truth(&x, &u, &w)?;
    println!("after one step: p_2 = {:.3}, v_2 = {:.3}", next[2], next[3]);
    Ok(())
}
