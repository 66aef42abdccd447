//! Structured ellipsoidal terminal sets with time-varying local levels.
//!
//! The terminal set is `{z : Σ_i z_iᵀ P_{f,i} z_i ≤ ᾱ}` with a structured
//! terminal law `v_i = K_{f,i} z_{N_i}`. Each subsystem tracks a local level
//! `α_i(t)` that moves by the quadratic form of its relaxation matrix
//! `Γ_{N_i}`; the matrices sum to the (negative semidefinite) one-step
//! decrease of the terminal Lyapunov function.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conic::{Affine, Constraint, Program, SolverSettings};
use crate::error::{Error, Result};
use crate::linalg;
use crate::netmodel::{Ellipsoid, NetworkModel, Polytope, MEMBERSHIP_SLACK};
use crate::tube::{assemble_gain, cancel_coupling_exactly, TightenedConstraints};

#[derive(Clone, Debug)]
pub struct TerminalOptions {
    /// Strict decrease: `A_clᵀ P_f A_cl − P_f ⪯ −μ P_f`.
    pub decrease_rate: f64,
    pub solver: SolverSettings,
}

impl Default for TerminalOptions {
    fn default() -> Self {
        Self {
            decrease_rate: 1e-3,
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TerminalIngredients {
    /// `P_{f,i}`.
    #[serde(with = "linalg::rows_serde_vec")]
    pub shapes: Vec<DMatrix<f64>>,
    /// `K_{f,i}` acting on `z_{N_i}`.
    #[serde(with = "linalg::rows_serde_vec")]
    pub gains: Vec<DMatrix<f64>>,
    /// `Γ_{N_i}`.
    #[serde(with = "linalg::rows_serde_vec")]
    pub relaxations: Vec<DMatrix<f64>>,
    /// `ᾱ`.
    pub alpha_bar: f64,
    /// `α_i(0) = ᾱ / M`.
    pub alpha0: Vec<f64>,
}

impl TerminalIngredients {
    /// Completes shapes and gains with the exact relaxation matrices, the
    /// largest admissible level and the uniform initial split.
    pub fn from_parts(
        model: &NetworkModel,
        tightened: &TightenedConstraints,
        shapes: Vec<DMatrix<f64>>,
        gains: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let count = model.num_subsystems();
        if shapes.len() != count || gains.len() != count {
            return Err(Error::Dimension("one terminal block per subsystem expected".into()));
        }
        let relaxations = (0..count)
            .map(|i| {
                let a_cl = model.neighborhood_dynamics(i)
                    + &model.subsystem(i).input_matrix * &gains[i];
                let own = model.neighborhood_offset(i, i).expect("i ∈ N_i");
                let nd = model.neighborhood_dim(i);
                let mut lifted = DMatrix::zeros(nd, nd);
                lifted
                    .view_mut((own, own), shapes[i].shape())
                    .copy_from(&shapes[i]);
                linalg::symmetrize(&(a_cl.transpose() * &shapes[i] * &a_cl - lifted))
            })
            .collect();
        let mut out = Self {
            shapes,
            gains,
            relaxations,
            alpha_bar: 0.0,
            alpha0: vec![0.0; count],
        };
        out.alpha_bar = out.max_admissible_level(model, tightened)?;
        out.alpha0 = vec![out.alpha_bar / count as f64; count];
        Ok(out)
    }

    pub fn global_shape(&self) -> DMatrix<f64> {
        linalg::block_diag(&self.shapes)
    }

    pub fn global_gain(&self, model: &NetworkModel) -> DMatrix<f64> {
        assemble_gain(model, &self.gains)
    }

    /// `diag_{j∈N_i} P_{f,j}⁻¹`.
    fn neighborhood_inverse_shape(&self, model: &NetworkModel, i: usize) -> Result<DMatrix<f64>> {
        let blocks = model
            .neighborhood(i)
            .iter()
            .map(|&j| linalg::spd_inverse(&self.shapes[j]))
            .collect::<Result<Vec<_>>>()?;
        Ok(linalg::block_diag(&blocks))
    }

    /// Largest `α` with `{Σ z_iᵀP_{f,i}z_i ≤ α}` inside the tightened state
    /// sets and mapped by `K_f` into the tightened input sets.
    pub fn max_admissible_level(
        &self,
        model: &NetworkModel,
        tightened: &TightenedConstraints,
    ) -> Result<f64> {
        let mut level = f64::INFINITY;
        for i in 0..model.num_subsystems() {
            let e_n = self.neighborhood_inverse_shape(model, i)?;
            let xs = &tightened.state[i];
            let us = &tightened.input[i];
            let rows = (0..xs.num_rows())
                .map(|r| (xs.rows().row(r).transpose(), xs.offsets()[r]))
                .chain((0..us.num_rows()).map(|r| {
                    ((us.rows().row(r) * &self.gains[i]).transpose(), us.offsets()[r])
                }));
            for (c, h) in rows {
                let spread = linalg::quad_form(&e_n, &c);
                if spread > 0.0 {
                    level = level.min(h * h / spread);
                }
            }
        }
        if !level.is_finite() || level <= 0.0 {
            return Err(Error::TerminalInfeasible(format!(
                "no positive terminal level (got {level})"
            )));
        }
        Ok(level)
    }

    /// Largest eigenvalue of `A_clᵀ P_f A_cl − P_f`; nonpositive iff the
    /// decrease certificate holds.
    pub fn decrease_margin(&self, model: &NetworkModel) -> f64 {
        let (a, b, _) = model.global_dynamics();
        let a_cl = &a + &b * self.global_gain(model);
        let p = self.global_shape();
        linalg::max_eigenvalue(&(a_cl.transpose() * &p * &a_cl - p))
    }

    /// Largest eigenvalue of `Σ_i W_iᵀ Γ_{N_i} W_i`.
    pub fn assembled_relaxation_margin(&self, model: &NetworkModel) -> f64 {
        let n = model.total_state_dim();
        let mut sum = DMatrix::zeros(n, n);
        for (i, g) in self.relaxations.iter().enumerate() {
            let w = model.neighborhood_lift(i);
            sum += w.transpose() * g * w;
        }
        linalg::max_eigenvalue(&sum)
    }

    /// `Σ_i z_iᵀ P_{f,i} z_i`.
    pub fn level(&self, model: &NetworkModel, z: &DVector<f64>) -> f64 {
        (0..self.shapes.len())
            .map(|i| linalg::quad_form(&self.shapes[i], &model.local_state(z, i)))
            .sum()
    }
}

/// Synthesizes block-diagonal `P_f`, structured `K_f` and relaxations
/// by maximizing `Σ det(P_{f,i}⁻¹)^{1/n_i}` under the decrease and
/// containment LMIs.
///
/// The program is posed in coordinates where every subsystem's tightest
/// state row has unit width; otherwise a narrow subsystem gets a shape whose
/// decrease margin sits below solver accuracy.
pub fn synthesize_terminal(
    model: &NetworkModel,
    tightened: &TightenedConstraints,
    options: &TerminalOptions,
) -> Result<TerminalIngredients> {
    let sigma: Vec<f64> = tightened
        .state
        .iter()
        .map(|xs| {
            let width = (0..xs.num_rows())
                .map(|r| xs.offsets()[r].powi(2) / xs.rows().row(r).norm_squared())
                .fold(f64::INFINITY, f64::min);
            if width.is_finite() && width > 0.0 { width.sqrt() } else { 1.0 }
        })
        .collect();
    if sigma.len() != model.num_subsystems() {
        return Err(Error::Dimension("one tightened state set per subsystem expected".into()));
    }
    let (scaled_model, scaled_tightened) = rescale_states(model, tightened, &sigma)?;
    let (scaled_shapes, scaled_gains) =
        solve_terminal_program(&scaled_model, &scaled_tightened, options)?;
    let shapes: Vec<DMatrix<f64>> = scaled_shapes
        .iter()
        .zip(&sigma)
        .map(|(p, s)| p / (s * s))
        .collect();
    let gains = (0..model.num_subsystems())
        .map(|i| {
            let mut gain = scaled_gains[i].clone();
            for &j in model.neighborhood(i) {
                let off = model.neighborhood_offset(i, j).unwrap();
                let mut block = gain.columns_mut(off, model.state_dim(j));
                block /= sigma[j];
            }
            cancel_coupling_exactly(model, i, &mut gain);
            gain
        })
        .collect();
    let ingredients = TerminalIngredients::from_parts(model, tightened, shapes, gains)?;
    let margin = ingredients.decrease_margin(model);
    if margin > 0.0 {
        return Err(Error::TerminalInfeasible(format!(
            "extracted terminal law does not decrease P_f (margin {margin:.3e})"
        )));
    }
    Ok(ingredients)
}

/// The model and tightened sets in coordinates `x̃_i = x_i / σ_i`.
fn rescale_states(
    model: &NetworkModel,
    tightened: &TightenedConstraints,
    sigma: &[f64],
) -> Result<(NetworkModel, TightenedConstraints)> {
    let scale_columns = |i: usize, rows: &DMatrix<f64>| {
        let mut out = rows.clone();
        for &j in model.neighborhood(i) {
            let off = model.neighborhood_offset(i, j).unwrap();
            let mut block = out.columns_mut(off, model.state_dim(j));
            block *= sigma[j];
        }
        out
    };
    let subs = model
        .subsystems()
        .iter()
        .enumerate()
        .map(|(i, sub)| {
            let mut sub = sub.clone();
            for (&j, a) in sub.coupling.iter_mut() {
                *a *= sigma[j] / sigma[i];
            }
            sub.input_matrix /= sigma[i];
            sub.disturbance_matrix /= sigma[i];
            sub.state_constraints = Polytope::new(
                scale_columns(i, sub.state_constraints.rows()),
                sub.state_constraints.offsets().clone(),
            )?;
            Ok(sub)
        })
        .collect::<Result<Vec<_>>>()?;
    let state = tightened
        .state
        .iter()
        .enumerate()
        .map(|(i, xs)| Polytope::new(scale_columns(i, xs.rows()), xs.offsets().clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        NetworkModel::new(subs)?,
        TightenedConstraints {
            state,
            input: tightened.input.clone(),
        },
    ))
}

/// Per-subsystem blocks `(P_{f,i}, K_{f,i})`.
type ShapesAndGains = (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>);

/// Solves the terminal SDP and returns `P_{f,i}` and `K_{f,i}`.
fn solve_terminal_program(
    model: &NetworkModel,
    tightened: &TightenedConstraints,
    options: &TerminalOptions,
) -> Result<ShapesAndGains> {
    let count = model.num_subsystems();
    let n = model.total_state_dim();
    let mut prog = Program::new();
    let e: Vec<Vec<Vec<Affine>>> = (0..count)
        .map(|i| prog.add_sym_matrix(&format!("Ef{i}"), model.state_dim(i), Some(i)))
        .collect();
    let y: Vec<Vec<Vec<Affine>>> = (0..count)
        .map(|i| {
            prog.add_matrix(
                &format!("Y{i}"),
                model.input_dim(i),
                model.neighborhood_dim(i),
                Some(i),
            )
        })
        .collect();
    // E_{N_i} as a grid of expressions
    let e_n = |i: usize| -> Vec<Vec<Affine>> {
        let nd = model.neighborhood_dim(i);
        let mut grid = vec![vec![Affine::zero(); nd]; nd];
        for &j in model.neighborhood(i) {
            let off = model.neighborhood_offset(i, j).unwrap();
            for a in 0..model.state_dim(j) {
                for b in 0..model.state_dim(j) {
                    grid[off + a][off + b] = e[j][a][b].clone();
                }
            }
        }
        grid
    };

    let mut assembled = vec![vec![Affine::zero(); n]; n];
    for i in 0..count {
        let sub = model.subsystem(i);
        let n_i = model.state_dim(i);
        let nd = model.neighborhood_dim(i);
        let own = model.neighborhood_offset(i, i).unwrap();
        let a_n = model.neighborhood_dynamics(i);
        let en = e_n(i);
        let gamma = prog.add_sym_matrix(&format!("Gamma{i}"), nd, Some(i));

        // C_i = A_{N_i} E_{N_i} + B_i Y_i
        let c: Vec<Vec<Affine>> = (0..n_i)
            .map(|r| {
                (0..nd)
                    .map(|col| {
                        let mut acc = Affine::zero();
                        for q in 0..nd {
                            if a_n[(r, q)] != 0.0 {
                                acc.add_scaled(&en[q][col], a_n[(r, q)]);
                            }
                        }
                        for q in 0..model.input_dim(i) {
                            acc.add_scaled(&y[i][q][col], sub.input_matrix[(r, q)]);
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        // neighbor coupling is cancelled by the input, which leaves the
        // closed loop block diagonal
        for &j in model.neighborhood(i) {
            if j == i {
                continue;
            }
            let off = model.neighborhood_offset(i, j).unwrap();
            let rows = (0..n_i)
                .flat_map(|r| (0..model.state_dim(j)).map(move |col| (r, col)))
                .map(|(r, col)| c[r][off + col].clone())
                .collect();
            prog.push(
                Constraint::zero(rows)
                    .labeled(format!("terminal coupling cancellation {i}<-{j}"))
                    .owned_by(i),
            );
        }
        let dim = nd + n_i;
        let mut lmi = vec![vec![Affine::zero(); dim]; dim];
        for r in 0..nd {
            for col in 0..nd {
                lmi[r][col] = gamma[r][col].clone();
            }
        }
        for r in 0..n_i {
            for col in 0..n_i {
                lmi[own + r][own + col] = lmi[own + r][own + col].clone() + e[i][r][col].clone();
                lmi[nd + r][nd + col] = e[i][r][col].clone();
            }
            for col in 0..nd {
                lmi[nd + r][col] = c[r][col].clone();
                lmi[col][nd + r] = c[r][col].clone();
            }
        }
        prog.push(Constraint::psd(&lmi).labeled(format!("terminal decrease {i}")).owned_by(i));

        // accumulate Σ W_iᵀ Γ̃_i W_i
        let globals: Vec<usize> = model
            .neighborhood(i)
            .iter()
            .flat_map(|&j| {
                let o = model.state_offset(j);
                (0..model.state_dim(j)).map(move |k| o + k)
            })
            .collect();
        for (r, &gr) in globals.iter().enumerate() {
            for (col, &gc) in globals.iter().enumerate() {
                assembled[gr][gc] = assembled[gr][gc].clone() + gamma[r][col].clone();
            }
        }

        // state containment at level 1: c E_N cᵀ ≤ h̄²
        let xs = &tightened.state[i];
        for row in 0..xs.num_rows() {
            let mut quad = Affine::constant(xs.offsets()[row].powi(2));
            for a in 0..nd {
                for b in 0..nd {
                    let w = xs.rows()[(row, a)] * xs.rows()[(row, b)];
                    if w != 0.0 {
                        quad.add_scaled(&en[a][b], -w);
                    }
                }
            }
            prog.push(
                Constraint::nonneg(vec![quad])
                    .labeled(format!("terminal state {i}/{row}"))
                    .owned_by(i),
            );
        }
        // input containment: [[ō², O_j Y_i], [·, E_N]] ⪰ 0
        let us = &tightened.input[i];
        for row in 0..us.num_rows() {
            let mut m = vec![vec![Affine::zero(); nd + 1]; nd + 1];
            m[0][0] = Affine::constant(us.offsets()[row].powi(2));
            for col in 0..nd {
                let mut oy = Affine::zero();
                for q in 0..model.input_dim(i) {
                    oy.add_scaled(&y[i][q][col], us.rows()[(row, q)]);
                }
                m[0][col + 1] = oy.clone();
                m[col + 1][0] = oy;
            }
            for a in 0..nd {
                for b in 0..nd {
                    m[a + 1][b + 1] = en[a][b].clone();
                }
            }
            prog.push(Constraint::psd(&m).labeled(format!("terminal input {i}/{row}")).owned_by(i));
        }
        // objective: volume of each block
        let volume = prog.add_root_det(&format!("Ef{i}"), &e[i], Some(i));
        prog.minimize_linear(volume, -1.0);
    }

    // −Σ W_iᵀ Γ̃_i W_i − μ E_f ⪰ 0
    let mut decrease = vec![vec![Affine::zero(); n]; n];
    for r in 0..n {
        for col in 0..n {
            decrease[r][col] = -assembled[r][col].clone();
        }
    }
    for i in 0..count {
        let o = model.state_offset(i);
        for a in 0..model.state_dim(i) {
            for b in 0..model.state_dim(i) {
                decrease[o + a][o + b].add_scaled(&e[i][a][b], -options.decrease_rate);
            }
        }
    }
    prog.push(Constraint::psd(&decrease).labeled("assembled decrease"));

    let sol = prog.solve(&options.solver)?;
    if !sol.is_optimal() {
        return Err(Error::TerminalInfeasible(format!(
            "decrease and containment LMIs infeasible ({:?})",
            sol.status
        )));
    }
    let x = &sol.x;
    let eval = |g: &Vec<Vec<Affine>>| {
        DMatrix::from_fn(g.len(), g.first().map_or(0, |r| r.len()), |r, c| {
            g[r][c].eval(x)
        })
    };
    let shapes = e
        .iter()
        .map(|g| linalg::spd_inverse(&linalg::symmetrize(&eval(g))))
        .collect::<Result<Vec<_>>>()?;
    let gains = (0..count)
        .map(|i| {
            let p_n: Vec<DMatrix<f64>> = model
                .neighborhood(i)
                .iter()
                .map(|&j| shapes[j].clone())
                .collect();
            eval(&y[i]) * linalg::block_diag(&p_n)
        })
        .collect();
    Ok((shapes, gains))
}

/// `α_i(t+1) = max(0, α_i(t) + z_{N_i}ᵀ Γ_{N_i} z_{N_i})`.
pub fn update_alpha(
    ingredients: &TerminalIngredients,
    alpha: &[f64],
    neighborhood_states: &[DVector<f64>],
) -> Result<Vec<f64>> {
    if alpha.len() != ingredients.relaxations.len()
        || neighborhood_states.len() != alpha.len()
    {
        return Err(Error::Dimension("one level and one state per subsystem expected".into()));
    }
    alpha
        .iter()
        .zip(neighborhood_states)
        .zip(&ingredients.relaxations)
        .enumerate()
        .map(|(i, ((&a, z), g))| {
            if a < 0.0 {
                return Err(Error::NegativeLevel(i));
            }
            if z.len() != g.nrows() {
                return Err(Error::Dimension(format!(
                    "neighborhood state {i} has length {}, expected {}",
                    z.len(),
                    g.nrows()
                )));
            }
            Ok((a + linalg::quad_form(g, z)).max(0.0))
        })
        .collect()
}

/// `z_iᵀ P_{f,i} z_i ≤ α_i` up to the membership slack.
pub fn check_terminal_membership(z: &DVector<f64>, shape: &DMatrix<f64>, alpha: f64) -> bool {
    linalg::quad_form(shape, z) <= alpha + MEMBERSHIP_SLACK
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TerminalSampleReport {
    pub samples: usize,
    pub invariance_violations: usize,
    pub state_violations: usize,
    pub input_violations: usize,
}

/// Samples the boundary `Σ z_iᵀP_{f,i}z_i = ᾱ` and checks that the successor
/// under `K_f` stays in the set and that states and inputs meet the
/// tightened constraints.
pub fn sample_terminal_properties(
    model: &NetworkModel,
    tightened: &TightenedConstraints,
    ingredients: &TerminalIngredients,
    samples: usize,
    seed: u64,
) -> Result<TerminalSampleReport> {
    let (a, b, _) = model.global_dynamics();
    let k = ingredients.global_gain(model);
    let a_cl = &a + &b * &k;
    let set = Ellipsoid::new(ingredients.global_shape(), ingredients.alpha_bar)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TerminalSampleReport {
        samples,
        ..Default::default()
    };
    let slack = MEMBERSHIP_SLACK * (1.0 + ingredients.alpha_bar);
    for _ in 0..samples {
        let z = set.sample(&mut rng, true);
        if ingredients.level(model, &(&a_cl * &z)) > ingredients.alpha_bar + slack {
            report.invariance_violations += 1;
        }
        let v = &k * &z;
        for i in 0..model.num_subsystems() {
            if !tightened.state[i].contains(&model.neighborhood_state(&z, i), MEMBERSHIP_SLACK) {
                report.state_violations += 1;
            }
            if !tightened.input[i].contains(&model.local_input(&v, i), MEMBERSHIP_SLACK) {
                report.input_violations += 1;
            }
        }
    }
    Ok(report)
}
