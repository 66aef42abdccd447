//! The small conic modeling layer: a projection onto a disk with a
//! PSD-constrained matrix variable on the side.

use dmpsc::conic::{Affine, Constraint, Program, SolverSettings};

fn main() -> dmpsc::Result<()> {
    let mut p = Program::new();
    let x = p.add_vars("x", 2, None);
    // ‖x‖ ≤ 1
    p.push(Constraint::soc(Affine::constant(1.0), vec![Affine::var(x[0]), Affine::var(x[1])]));
    // closest point to (2, 1)
    p.minimize_square(&(Affine::var(x[0]) - Affine::constant(2.0)), 1.0);
    p.minimize_square(&(Affine::var(x[1]) - Affine::constant(1.0)), 1.0);
    // largest root determinant of a 2x2 matrix with unit diagonal bound
    let m = p.add_sym_matrix("M", 2, None);
    for k in 0..2 {
        p.push(Constraint::nonneg(vec![Affine::constant(1.0) - m[k][k].clone()]));
    }
    let t = p.add_root_det("M", &m, None);
    p.minimize_linear(t, -1.0);

    let sol = p.solve(&SolverSettings::default())?;
    println!("x = ({:.4}, {:.4}), det(M)^(1/2) = {:.4}", sol.x[x[0]], sol.x[x[1]], sol.x[t]);
    println!("{} iterations, status {:?}", sol.iterations, sol.status);
    Ok(())
}
