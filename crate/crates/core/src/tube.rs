//! Structured ellipsoidal RPI tubes.
//!
//! The tube `Ω = {e : Σ_i e_iᵀ P_i e_i ≤ 1}` and the distributed error
//! feedback `K_{Ω,i}` are found jointly by a semidefinite program in the
//! variables `E_i = P_i⁻¹` and `K_i = K_{Ω,i} E_{N_i}`. The program encodes
//! the S-procedure form of the RPI implication per subsystem and minimizes
//! the squared tightening of every state and input row.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conic::{Affine, Constraint, Program, SolverSettings};
use crate::error::{Error, Result};
use crate::linalg;
use crate::netmodel::{Ellipsoid, NetworkModel, Polytope};

/// Multiplier value for the global S-procedure term used in the benchmark.
pub const BENCHMARK_TAU: f64 = 0.055;

#[derive(Clone, Debug, PartialEq)]
pub enum TauChoice {
    Fixed(f64),
    /// Grid scan over `(0, 1)` followed by golden-section refinement.
    Auto,
}

impl std::str::FromStr for TauChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Self::Auto);
        }
        let tau: f64 = s.parse().map_err(|_| format!("expected a number or 'auto', got {s:?}"))?;
        if tau > 0.0 && tau < 1.0 {
            Ok(Self::Fixed(tau))
        } else {
            Err(format!("tau must lie in (0, 1), got {tau}"))
        }
    }
}

#[derive(Clone, Debug)]
pub struct TubeOptions {
    pub tau: TauChoice,
    /// Margin subtracted from every strict LMI.
    pub lmi_margin: f64,
    /// Strictness of the multiplier budget.
    pub budget_margin: f64,
    /// Lower bound on the eigenvalues of each `E_i`.
    pub shape_floor: f64,
    /// Each row's tightening is kept below this fraction of its offset so
    /// the tightened sets keep a nonempty interior.
    pub max_tightening_fraction: f64,
    pub solver: SolverSettings,
}

impl Default for TubeOptions {
    fn default() -> Self {
        Self {
            tau: TauChoice::Fixed(BENCHMARK_TAU),
            lmi_margin: 1e-9,
            budget_margin: 1e-7,
            shape_floor: 1e-8,
            max_tightening_fraction: 0.9,
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StructuredTube {
    /// `P_i`.
    #[serde(with = "linalg::rows_serde_vec")]
    pub shapes: Vec<DMatrix<f64>>,
    /// `E_i = P_i⁻¹`.
    #[serde(with = "linalg::rows_serde_vec")]
    pub inverse_shapes: Vec<DMatrix<f64>>,
    /// `K_{Ω,i}` acting on `e_{N_i}`.
    #[serde(with = "linalg::rows_serde_vec")]
    pub gains: Vec<DMatrix<f64>>,
    pub tau_global: f64,
    /// `τ_i q_i`: the local multipliers with the disturbance normalized to
    /// unit level.
    pub tau_local: Vec<f64>,
    /// `hᵀh + oᵀo`.
    pub objective: f64,
    /// Per-subsystem tightening amounts of the state rows.
    pub state_tightening: Vec<Vec<f64>>,
    pub input_tightening: Vec<Vec<f64>>,
}

impl StructuredTube {
    /// Assembled block-diagonal `P`.
    pub fn global_shape(&self) -> DMatrix<f64> {
        linalg::block_diag(&self.shapes)
    }

    /// Assembled `K_Ω` with `u = K_Ω e`.
    pub fn global_gain(&self, model: &NetworkModel) -> DMatrix<f64> {
        assemble_gain(model, &self.gains)
    }

    /// `diag_{j∈N_i} E_j`.
    pub fn neighborhood_inverse_shape(&self, model: &NetworkModel, i: usize) -> DMatrix<f64> {
        let blocks: Vec<DMatrix<f64>> = model
            .neighborhood(i)
            .iter()
            .map(|&j| self.inverse_shapes[j].clone())
            .collect();
        linalg::block_diag(&blocks)
    }

    /// `Σ_i e_iᵀ P_i e_i`.
    pub fn level(&self, model: &NetworkModel, e: &DVector<f64>) -> f64 {
        (0..self.shapes.len())
            .map(|i| linalg::quad_form(&self.shapes[i], &model.local_state(e, i)))
            .sum()
    }

    /// Returns a copy with every `P_i` multiplied by `factor`.
    pub fn with_scaled_shape(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for (p, e) in out.shapes.iter_mut().zip(out.inverse_shapes.iter_mut()) {
            *p *= factor;
            *e /= factor;
        }
        out
    }
}

/// Stacks neighborhood gains `K_i` (m_i × n_{N_i}) into a global matrix.
pub fn assemble_gain(model: &NetworkModel, gains: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(model.total_input_dim(), model.total_state_dim());
    for i in 0..model.num_subsystems() {
        let lifted = &gains[i] * model.neighborhood_lift(i);
        k.view_mut((model.input_offset(i), 0), lifted.shape())
            .copy_from(&lifted);
    }
    k
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TightenedConstraints {
    pub state: Vec<Polytope>,
    pub input: Vec<Polytope>,
}

/// Synthesizes the tube for the multiplier choice in `options`.
pub fn synthesize_tube(model: &NetworkModel, options: &TubeOptions) -> Result<StructuredTube> {
    match options.tau {
        TauChoice::Fixed(tau) => solve_at(model, tau, options)?.ok_or_else(|| {
            Error::TubeInfeasible(format!("no feasible tube for tau = {tau}"))
        }),
        TauChoice::Auto => search_tau(model, options),
    }
}

fn search_tau(model: &NetworkModel, options: &TubeOptions) -> Result<StructuredTube> {
    const GRID: [f64; 11] = [
        0.005, 0.02, 0.055, 0.1, 0.2, 0.3, 0.45, 0.6, 0.75, 0.9, 0.98,
    ];
    // a numerical failure at one grid point only rules out that point
    let attempt = |tau: f64| match solve_at(model, tau, options) {
        Err(Error::Solver(_)) => Ok(None),
        other => other,
    };
    let attempts: Vec<Result<Option<StructuredTube>>> =
        GRID.par_iter().map(|&tau| attempt(tau)).collect();
    let mut best: Option<(usize, StructuredTube)> = None;
    for (k, attempt) in attempts.into_iter().enumerate() {
        if let Some(tube) = attempt? {
            if best.as_ref().is_none_or(|(_, b)| tube.objective < b.objective) {
                best = Some((k, tube));
            }
        }
    }
    let Some((k, mut best)) = best else {
        return Err(Error::TubeInfeasible(format!(
            "no feasible tube on the tau grid {GRID:?}"
        )));
    };

    let mut lo = if k == 0 { 1e-4 } else { GRID[k - 1] };
    let mut hi = if k + 1 == GRID.len() { 0.999 } else { GRID[k + 1] };
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let eval = |tau: f64| -> Result<(f64, Option<StructuredTube>)> {
        Ok(match attempt(tau)? {
            Some(t) => (t.objective, Some(t)),
            None => (f64::INFINITY, None),
        })
    };
    let mut a = hi - ratio * (hi - lo);
    let mut b = lo + ratio * (hi - lo);
    let (mut fa, mut ta) = eval(a)?;
    let (mut fb, mut tb) = eval(b)?;
    for _ in 0..10 {
        if fa < fb {
            hi = b;
            (b, fb, tb) = (a, fa, ta);
            a = hi - ratio * (hi - lo);
            (fa, ta) = eval(a)?;
        } else {
            lo = a;
            (a, fa, ta) = (b, fb, tb);
            b = lo + ratio * (hi - lo);
            (fb, tb) = eval(b)?;
        }
    }
    for t in [ta, tb].into_iter().flatten() {
        if t.objective < best.objective {
            best = t;
        }
    }
    Ok(best)
}

/// Solves the synthesis SDP for one value of the global multiplier.
/// `Ok(None)` means the SDP is infeasible at this value.
pub fn solve_at(
    model: &NetworkModel,
    tau: f64,
    options: &TubeOptions,
) -> Result<Option<StructuredTube>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::TubeInfeasible(format!("tau = {tau} outside (0, 1)")));
    }
    let count = model.num_subsystems();
    let mut prog = Program::new();

    let e: Vec<Vec<Vec<Affine>>> = (0..count)
        .map(|i| prog.add_sym_matrix(&format!("E{i}"), model.state_dim(i), Some(i)))
        .collect();
    let k: Vec<Vec<Vec<Affine>>> = (0..count)
        .map(|i| {
            prog.add_matrix(
                &format!("K{i}"),
                model.input_dim(i),
                model.neighborhood_dim(i),
                Some(i),
            )
        })
        .collect();
    let tau_local: Vec<usize> = (0..count)
        .map(|i| prog.add_var(format!("tau{i}"), Some(i)))
        .collect();
    let mut state_vars = Vec::with_capacity(count);
    let mut input_vars = Vec::with_capacity(count);

    for i in 0..count {
        let sub = model.subsystem(i);
        let n_i = model.state_dim(i);
        let p_i = sub.disturbance_dim();
        let own = model.neighborhood_offset(i, i).expect("i ∈ N_i");

        // B_i K_i restricted to the columns of block j
        let bk = |j: usize, r: usize, c: usize| -> Affine {
            let off = model.neighborhood_offset(i, j).expect("j ∈ N_i");
            let mut acc = Affine::zero();
            for q in 0..model.input_dim(i) {
                acc.add_scaled(&k[i][q][off + c], sub.input_matrix[(r, q)]);
            }
            acc
        };
        // A_ij E_j
        let ae = |j: usize, r: usize, c: usize| -> Affine {
            let a = &sub.coupling[&j];
            let mut acc = Affine::zero();
            for q in 0..a.ncols() {
                acc.add_scaled(&e[j][q][c], a[(r, q)]);
            }
            acc
        };

        for &j in model.neighborhood(i) {
            if j == i {
                continue;
            }
            let rows = (0..n_i)
                .flat_map(|r| (0..model.state_dim(j)).map(move |c| (r, c)))
                .map(|(r, c)| ae(j, r, c) + bk(j, r, c))
                .collect();
            prog.push(
                Constraint::zero(rows)
                    .labeled(format!("coupling cancellation {i}<-{j}"))
                    .owned_by(i),
            );
        }
        let _ = own;

        let dim = 2 * n_i + p_i;
        let mut lmi = vec![vec![Affine::zero(); dim]; dim];
        for r in 0..n_i {
            for c in 0..n_i {
                lmi[r][c] = e[i][r][c].scaled(tau);
                let cl = ae(i, r, c) + bk(i, r, c);
                // C_ii sits in the bottom-left block, its transpose top-right
                lmi[n_i + p_i + r][c] = cl.clone();
                lmi[c][n_i + p_i + r] = cl;
                lmi[n_i + p_i + r][n_i + p_i + c] = e[i][r][c].clone();
            }
        }
        for r in 0..p_i {
            for c in 0..p_i {
                lmi[n_i + r][n_i + c] =
                    Affine::term(tau_local[i], sub.disturbance_set.shape()[(r, c)]);
            }
            // disturbance normalized to the unit level: w = √q_i ŵ
            let scale = sub.disturbance_set.level().sqrt();
            for q in 0..n_i {
                let g = Affine::constant(scale * sub.disturbance_matrix[(q, r)]);
                lmi[n_i + r][n_i + p_i + q] = g.clone();
                lmi[n_i + p_i + q][n_i + r] = g;
            }
        }
        for d in 0..dim {
            lmi[d][d].add_constant(-options.lmi_margin);
        }
        prog.push(Constraint::psd(&lmi).labeled(format!("rpi {i}")).owned_by(i));

        let mut floor = e[i].clone();
        for d in 0..n_i {
            floor[d][d].add_constant(-options.shape_floor);
        }
        prog.push(Constraint::psd(&floor).labeled(format!("shape floor {i}")).owned_by(i));

        let budget = Affine::constant(-(tau - 1.0) / count as f64 - options.budget_margin)
            - Affine::var(tau_local[i]);
        prog.push(
            Constraint::nonneg(vec![Affine::var(tau_local[i]), budget])
                .labeled(format!("multiplier budget {i}"))
                .owned_by(i),
        );

        // state rows: s ≥ H_j E_N H_jᵀ is linear in E
        let xs = &sub.state_constraints;
        let s = prog.add_vars(&format!("s{i}"), xs.num_rows(), Some(i));
        for (row, &sv) in s.iter().enumerate() {
            let mut quad = Affine::zero();
            for &j in model.neighborhood(i) {
                let off = model.neighborhood_offset(i, j).unwrap();
                for a in 0..model.state_dim(j) {
                    for b in 0..model.state_dim(j) {
                        let w = xs.rows()[(row, off + a)] * xs.rows()[(row, off + b)];
                        if w != 0.0 {
                            quad.add_scaled(&e[j][a][b], w);
                        }
                    }
                }
            }
            let cap = (options.max_tightening_fraction * xs.offsets()[row]).powi(2);
            prog.push(
                Constraint::nonneg(vec![
                    Affine::var(sv) - quad,
                    Affine::constant(cap) - Affine::var(sv),
                ])
                .labeled(format!("state support {i}/{row}"))
                .owned_by(i),
            );
            prog.minimize_linear(sv, 1.0);
        }
        state_vars.push(s);

        // input rows: [[t, O_j K_i], [·, E_N]] ⪰ 0
        let us = &sub.input_constraints;
        let nd = model.neighborhood_dim(i);
        let t = prog.add_vars(&format!("t{i}"), us.num_rows(), Some(i));
        for (row, &tv) in t.iter().enumerate() {
            let mut m = vec![vec![Affine::zero(); nd + 1]; nd + 1];
            m[0][0] = Affine::var(tv);
            for c in 0..nd {
                let mut ok = Affine::zero();
                for q in 0..model.input_dim(i) {
                    ok.add_scaled(&k[i][q][c], us.rows()[(row, q)]);
                }
                m[0][c + 1] = ok.clone();
                m[c + 1][0] = ok;
            }
            for &j in model.neighborhood(i) {
                let off = model.neighborhood_offset(i, j).unwrap();
                for a in 0..model.state_dim(j) {
                    for b in 0..model.state_dim(j) {
                        m[off + a + 1][off + b + 1] = e[j][a][b].clone();
                    }
                }
            }
            prog.push(Constraint::psd(&m).labeled(format!("input support {i}/{row}")).owned_by(i));
            let cap = (options.max_tightening_fraction * us.offsets()[row]).powi(2);
            prog.push(
                Constraint::nonneg(vec![Affine::constant(cap) - Affine::var(tv)])
                    .labeled(format!("input cap {i}/{row}"))
                    .owned_by(i),
            );
            prog.minimize_linear(tv, 1.0);
        }
        input_vars.push(t);
    }

    let sol = prog.solve(&options.solver)?;
    if !sol.is_optimal() {
        return Ok(None);
    }
    let x = &sol.x;
    let eval_grid = |g: &Vec<Vec<Affine>>| {
        DMatrix::from_fn(g.len(), g.first().map_or(0, |r| r.len()), |r, c| {
            g[r][c].eval(x)
        })
    };
    let inverse_shapes: Vec<DMatrix<f64>> = e
        .iter()
        .map(|g| linalg::symmetrize(&eval_grid(g)))
        .collect();
    let shapes = inverse_shapes
        .iter()
        .map(linalg::spd_inverse)
        .collect::<Result<Vec<_>>>()?;
    let gains = (0..count)
        .map(|i| {
            let p_n: Vec<DMatrix<f64>> = model
                .neighborhood(i)
                .iter()
                .map(|&j| shapes[j].clone())
                .collect();
            let mut gain = eval_grid(&k[i]) * linalg::block_diag(&p_n);
            cancel_coupling_exactly(model, i, &mut gain);
            gain
        })
        .collect();
    let sqrt_all = |vars: &Vec<Vec<usize>>| -> Vec<Vec<f64>> {
        vars.iter()
            .map(|vs| vs.iter().map(|&v| x[v].max(0.0).sqrt()).collect())
            .collect()
    };
    let mut tube = StructuredTube {
        shapes,
        inverse_shapes,
        gains,
        tau_global: tau,
        tau_local: tau_local.iter().map(|&v| x[v]).collect(),
        objective: sol.objective,
        state_tightening: sqrt_all(&state_vars),
        input_tightening: sqrt_all(&input_vars),
    };
    recertify(model, &mut tube)?;
    record_tightening(model, &mut tube);
    Ok(Some(tube))
}

/// The SDP cancels neighbor coupling only to solver accuracy and the
/// product with `P_j` amplifies that residual; removes the part of
/// `A_ij + B_i K_ij` that the input can cancel exactly.
pub(crate) fn cancel_coupling_exactly(model: &NetworkModel, i: usize, gain: &mut DMatrix<f64>) {
    let b = &model.subsystem(i).input_matrix;
    let b_pinv = b.clone().pseudo_inverse(1e-12).expect("nonnegative epsilon");
    for &j in model.neighborhood(i) {
        if j == i {
            continue;
        }
        let off = model.neighborhood_offset(i, j).unwrap();
        let cols = model.state_dim(j);
        let residual = &model.subsystem(i).coupling[&j] + b * gain.columns(off, cols);
        let fix = &b_pinv * residual;
        let mut block = gain.columns_mut(off, cols);
        block -= fix;
    }
}

/// Support values of every constraint row for the final shapes, and the
/// resulting `hᵀh + oᵀo`.
fn record_tightening(model: &NetworkModel, tube: &mut StructuredTube) {
    let mut objective = 0.0;
    for i in 0..model.num_subsystems() {
        let sub = model.subsystem(i);
        let e_n = tube.neighborhood_inverse_shape(model, i);
        let xs = &sub.state_constraints;
        tube.state_tightening[i] = (0..xs.num_rows())
            .map(|r| support(&xs.rows().row(r).transpose(), &e_n))
            .collect();
        let us = &sub.input_constraints;
        tube.input_tightening[i] = (0..us.num_rows())
            .map(|r| support(&(us.rows().row(r) * &tube.gains[i]).transpose(), &e_n))
            .collect();
        objective += tube.state_tightening[i]
            .iter()
            .chain(&tube.input_tightening[i])
            .map(|h| h * h)
            .sum::<f64>();
    }
    tube.objective = objective;
}

/// Result of the assembled S-procedure test.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RpiCertificate {
    /// Largest eigenvalue of the assembled one-step matrix; `≤ 0` up to
    /// rounding when the multipliers are valid.
    pub max_eigenvalue: f64,
    /// Scale of that matrix, for relative comparisons.
    pub scale: f64,
    /// `τ + Σ τ̂_i`, the certified bound on `e⁺ᵀPe⁺`.
    pub level: f64,
}

impl RpiCertificate {
    pub fn holds(&self, rel_tol: f64) -> bool {
        self.max_eigenvalue <= rel_tol * self.scale && self.level <= 1.0 + rel_tol
    }
}

/// Checks the RPI implication through the global S-procedure matrix
/// assembled from the stored shapes, gains and multipliers.
pub fn rpi_certificate(model: &NetworkModel, tube: &StructuredTube) -> RpiCertificate {
    // With ŵ_i = w_i/√q_i and block-diagonal P,
    //   [A_clᵀPA_cl − τP, A_clᵀPĜ; ĜᵀPA_cl, ĜᵀPĜ − diag(τ̂_i Q_i)] ⪯ 0
    // gives e⁺ᵀPe⁺ ≤ τ eᵀPe + Σ τ̂_i ŵ_iᵀQ_iŵ_i ≤ τ + Σ τ̂_i.
    let (a, b, g) = model.global_dynamics();
    let count = model.num_subsystems();
    let scales: Vec<DMatrix<f64>> = (0..count)
        .map(|i| {
            let sub = model.subsystem(i);
            let p = sub.disturbance_dim();
            DMatrix::identity(p, p) * sub.disturbance_set.level().sqrt()
        })
        .collect();
    let g = g * linalg::block_diag(&scales);
    let p = tube.global_shape();
    let a_cl = &a + &b * tube.global_gain(model);
    let n = a.nrows();
    let pd = g.ncols();
    let q = linalg::block_diag(
        &(0..count)
            .map(|i| model.subsystem(i).disturbance_set.shape() * tube.tau_local[i])
            .collect::<Vec<_>>(),
    );
    let mut m = DMatrix::zeros(n + pd, n + pd);
    m.view_mut((0, 0), (n, n))
        .copy_from(&(a_cl.transpose() * &p * &a_cl - &p * tube.tau_global));
    let cross = a_cl.transpose() * &p * &g;
    m.view_mut((0, n), (n, pd)).copy_from(&cross);
    m.view_mut((n, 0), (pd, n)).copy_from(&cross.transpose());
    m.view_mut((n, n), (pd, pd))
        .copy_from(&(g.transpose() * &p * &g - q));
    RpiCertificate {
        max_eigenvalue: linalg::max_eigenvalue(&m),
        scale: m.amax().max(f64::MIN_POSITIVE),
        level: tube.tau_global + tube.tau_local.iter().sum::<f64>(),
    }
}

/// Per-subsystem closed-loop data with neighbor coupling cancelled.
struct LocalLoop {
    a: DMatrix<f64>,
    p: DMatrix<f64>,
    g: DMatrix<f64>,
    q_chol_inv: Option<DMatrix<f64>>,
}

impl LocalLoop {
    /// Smallest `τ̂` with the local S-procedure matrix ⪯ 0 at `τ`.
    fn multiplier(&self, tau: f64) -> f64 {
        if self.g.amax() == 0.0 {
            return 0.0;
        }
        let s = &self.p * tau - self.a.transpose() * &self.p * &self.a;
        let Some(s_chol) = linalg::symmetrize(&s).cholesky() else {
            return f64::INFINITY;
        };
        let pa = &self.p * &self.a;
        let cross = self.g.transpose() * &pa;
        let r = self.g.transpose() * &self.p * &self.g
            + &cross * s_chol.solve(&cross.transpose());
        match &self.q_chol_inv {
            Some(li) => linalg::max_eigenvalue(&(li * r * li.transpose())),
            None => f64::INFINITY,
        }
    }
}

/// Recomputes the multipliers exactly for the extracted shapes and gains
/// and rescales `P` by the smallest factor the S-procedure certifies.
///
/// The SDP only satisfies its LMIs to solver accuracy, and forming
/// `P = E⁻¹` amplifies those residuals; this step restores a certificate
/// that holds in floating point.
fn recertify(model: &NetworkModel, tube: &mut StructuredTube) -> Result<()> {
    let count = model.num_subsystems();
    let loops: Vec<LocalLoop> = (0..count)
        .map(|i| {
            let sub = model.subsystem(i);
            let own = model.neighborhood_offset(i, i).expect("i ∈ N_i");
            let n_i = model.state_dim(i);
            let a = &sub.coupling[&i] + &sub.input_matrix * tube.gains[i].columns(own, n_i);
            let q_chol_inv = linalg::spd_cholesky(sub.disturbance_set.shape())
                .ok()
                .and_then(|l| l.try_inverse());
            LocalLoop {
                a,
                p: tube.shapes[i].clone(),
                g: &sub.disturbance_matrix * sub.disturbance_set.level().sqrt(),
                q_chol_inv,
            }
        })
        .collect();
    let ratio = |tau: f64| -> f64 {
        let total: f64 = loops.iter().map(|l| l.multiplier(tau)).sum();
        total / (1.0 - tau)
    };
    // a coarse scan, then golden-section refinement around the best point
    let grid: Vec<f64> = (1..400).map(|k| k as f64 / 400.0).collect();
    let (mut best_k, mut best) = (0, f64::INFINITY);
    for (k, &tau) in grid.iter().enumerate() {
        let f = ratio(tau);
        if f < best {
            (best_k, best) = (k, f);
        }
    }
    if !best.is_finite() {
        return Err(Error::TubeInfeasible(
            "extracted feedback does not contract the tube".into(),
        ));
    }
    let mut lo = if best_k == 0 { 1e-6 } else { grid[best_k - 1] };
    let mut hi = grid.get(best_k + 1).copied().unwrap_or(1.0 - 1e-6);
    let golden = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let a = hi - golden * (hi - lo);
        let b = lo + golden * (hi - lo);
        if ratio(a) < ratio(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let mid = 0.5 * (lo + hi);
    let tau = if ratio(mid) < best { mid } else { grid[best_k] };
    let factor = ratio(tau);
    if factor > 0.0 {
        // small safety factor against rounding in later checks
        let s = factor * (1.0 + 1e-9);
        for (p, e) in tube.shapes.iter_mut().zip(tube.inverse_shapes.iter_mut()) {
            *p /= s;
            *e *= s;
        }
        tube.tau_local = loops.iter().map(|l| l.multiplier(tau) / s).collect();
    } else {
        tube.tau_local = vec![0.0; count];
    }
    tube.tau_global = tau;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RpiReport {
    pub samples: usize,
    pub violations: usize,
    /// Largest observed `e⁺ᵀPe⁺`.
    pub max_level: f64,
}

/// Monte Carlo check of the RPI implication: samples `e` uniformly in `Ω`
/// and `w_i` uniformly in `W_i`, applies one closed-loop step and counts
/// successors with `e⁺ᵀPe⁺ > 1 + slack`.
pub fn verify_rpi_monte_carlo(
    model: &NetworkModel,
    tube: &StructuredTube,
    samples: usize,
    seed: u64,
    slack: f64,
) -> RpiReport {
    const BATCH: usize = 1024;
    let (a, b, g) = model.global_dynamics();
    let a_cl = &a + &b * tube.global_gain(model);
    let omega = Ellipsoid::new(tube.global_shape(), 1.0).expect("tube shape is PSD");
    let batches = samples.div_ceil(BATCH);
    let results: Vec<(usize, f64)> = (0..batches)
        .into_par_iter()
        .map(|batch| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(batch as u64);
            let count = BATCH.min(samples - batch * BATCH);
            let mut violations = 0;
            let mut max_level: f64 = 0.0;
            for s in 0..count {
                // alternate interior and boundary draws to stress the edge
                let boundary = s % 2 == 0;
                let e = omega.sample(&mut rng, boundary);
                let w = NetworkModel::stack(
                    &model
                        .subsystems()
                        .iter()
                        .map(|sub| sub.disturbance_set.sample(&mut rng, boundary))
                        .collect::<Vec<_>>(),
                );
                let next = &a_cl * e + &g * w;
                let level = tube.level(model, &next);
                max_level = max_level.max(level);
                if level > 1.0 + slack {
                    violations += 1;
                }
            }
            (violations, max_level)
        })
        .collect();
    RpiReport {
        samples,
        violations: results.iter().map(|r| r.0).sum(),
        max_level: results.iter().map(|r| r.1).fold(0.0, f64::max),
    }
}

/// Neighborhood-structured blocks `P_{N_i} = W_i T_iᵀ P_i T_i W_iᵀ`: only the
/// own block of each neighborhood matrix is nonzero.
pub fn project_to_neighborhood_form(model: &NetworkModel, tube: &StructuredTube) -> Vec<DMatrix<f64>> {
    (0..model.num_subsystems())
        .map(|i| {
            let nd = model.neighborhood_dim(i);
            let off = model.neighborhood_offset(i, i).expect("i ∈ N_i");
            let mut p = DMatrix::zeros(nd, nd);
            p.view_mut((off, off), tube.shapes[i].shape())
                .copy_from(&tube.shapes[i]);
            p
        })
        .collect()
}

/// Support value `max_{eᵀPe≤1} c·e = √(c P⁻¹ cᵀ)` given `P⁻¹`.
pub fn support(c: &DVector<f64>, inverse_shape: &DMatrix<f64>) -> f64 {
    linalg::quad_form(inverse_shape, c).max(0.0).sqrt()
}

/// Shrinks every row of `set` by the support of `{ξ : ξᵀ S⁻¹ ξ ≤ 1}` along
/// `rowᵀ·map`, where `S = inverse_shape` and `ξ = map·e`.
pub fn tighten_polytope(
    set: &Polytope,
    map: &DMatrix<f64>,
    inverse_shape: &DMatrix<f64>,
    label: &str,
) -> Result<Polytope> {
    let mut offsets = set.offsets().clone();
    for r in 0..set.num_rows() {
        let c = (set.rows().row(r) * map).transpose();
        offsets[r] -= support(&c, inverse_shape);
        if offsets[r] <= 0.0 {
            return Err(Error::EmptyTightenedSet(format!(
                "{label} row {r}: tightened offset {:.3e} is not positive",
                offsets[r]
            )));
        }
    }
    Polytope::new(set.rows().clone(), offsets)
}

/// `X̄_{N_i} = X_{N_i} ⊖ W_iΩ` and `Ū_i = U_i ⊖ K_{Ω,i}W_iΩ`.
pub fn tighten_constraints(
    model: &NetworkModel,
    tube: &StructuredTube,
) -> Result<TightenedConstraints> {
    let mut state = Vec::with_capacity(model.num_subsystems());
    let mut input = Vec::with_capacity(model.num_subsystems());
    for i in 0..model.num_subsystems() {
        let sub = model.subsystem(i);
        let e_n = tube.neighborhood_inverse_shape(model, i);
        let nd = model.neighborhood_dim(i);
        state.push(tighten_polytope(
            &sub.state_constraints,
            &DMatrix::identity(nd, nd),
            &e_n,
            &format!("state constraints of subsystem {i}"),
        )?);
        input.push(tighten_polytope(
            &sub.input_constraints,
            &tube.gains[i],
            &e_n,
            &format!("input constraints of subsystem {i}"),
        )?);
    }
    Ok(TightenedConstraints { state, input })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{build_chain_benchmark, ChainParams, SubsystemSpec};
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeMap;

    fn scalar_model(a: f64, q: f64) -> NetworkModel {
        NetworkModel::new(vec![SubsystemSpec {
            coupling: BTreeMap::from([(0, DMatrix::from_element(1, 1, a))]),
            input_matrix: DMatrix::from_element(1, 1, 1.0),
            disturbance_matrix: DMatrix::from_element(1, 1, 1.0),
            state_constraints: Polytope::from_bounds(&[-1.0], &[1.0]).unwrap(),
            input_constraints: Polytope::from_bounds(&[-1.0], &[1.0]).unwrap(),
            disturbance_set: Ellipsoid::new(DMatrix::from_element(1, 1, 1.0), q).unwrap(),
        }])
        .unwrap()
    }

    fn three_chain(q: f64) -> NetworkModel {
        build_chain_benchmark(&ChainParams {
            masses: 3,
            disturbance_level: q,
            position_override: None,
            ..ChainParams::benchmark()
        })
        .unwrap()
    }

    fn fixed(tau: f64) -> TubeOptions {
        TubeOptions {
            tau: TauChoice::Fixed(tau),
            ..TubeOptions::default()
        }
    }

    #[test]
    fn scalar_tube_covers_minimal_invariant_interval() {
        let q = 0.01;
        let model = scalar_model(1.2, q);
        let tube = synthesize_tube(&model, &fixed(0.3)).unwrap();
        let p = tube.shapes[0][(0, 0)];
        let a_cl = 1.2 + tube.gains[0][(0, 0)];
        assert!(a_cl.abs() < 1.0);
        // interval recursion r⁺ = |a_cl| r + √q converges to √q / (1 − |a_cl|)
        let mut r: f64 = 0.0;
        for _ in 0..10_000 {
            r = a_cl.abs() * r + q.sqrt();
        }
        assert!((r - q.sqrt() / (1.0 - a_cl.abs())).abs() < 1e-9);
        assert!(1.0 / p.sqrt() >= r - 1e-9);
    }

    #[test]
    fn zero_disturbance_gives_tiny_tube() {
        let model = scalar_model(0.5, 0.0);
        for tau in [0.1, 0.5, 0.9] {
            let tube = synthesize_tube(&model, &fixed(tau)).unwrap();
            assert!(tube.inverse_shapes[0][(0, 0)] < 1e-4, "tau {tau}");
            let report = verify_rpi_monte_carlo(&model, &tube, 200, 1, 1e-6);
            assert_eq!(report.violations, 0);
        }
    }

    #[test]
    fn fixed_point_sample_never_violates() {
        let model = scalar_model(0.5, 0.0);
        let tube = synthesize_tube(&model, &fixed(0.5)).unwrap();
        let next = (&model.global_dynamics().0
            + &model.global_dynamics().1 * tube.global_gain(&model))
            * DVector::zeros(1);
        assert_eq!(tube.level(&model, &next), 0.0);
    }

    #[test]
    fn three_chain_tube_is_rpi_and_structured() {
        let model = three_chain(1.1e-3);
        let tube = synthesize_tube(&model, &TubeOptions::default()).unwrap();
        assert!(rpi_certificate(&model, &tube).holds(1e-9));
        let report = verify_rpi_monte_carlo(&model, &tube, 4000, 7, 1e-7);
        assert_eq!(report.violations, 0, "max level {}", report.max_level);
        let k = tube.global_gain(&model);
        // mass 0 and mass 2 are not neighbors
        for c in 4..6 {
            assert_eq!(k[(0, c)], 0.0);
        }
        for c in 0..2 {
            assert_eq!(k[(2, c)], 0.0);
        }
    }

    #[test]
    fn corrupted_tube_fails_monte_carlo() {
        let model = three_chain(1.1e-3);
        let tube = synthesize_tube(&model, &TubeOptions::default()).unwrap();
        let bad = tube.with_scaled_shape(100.0);
        let report = verify_rpi_monte_carlo(&model, &bad, 2000, 7, 1e-7);
        assert!(report.violations > 0);
    }

    #[test]
    fn smaller_disturbance_does_not_increase_objective() {
        let big = synthesize_tube(&three_chain(1.1e-3), &TubeOptions::default()).unwrap();
        let small = synthesize_tube(&three_chain(0.25 * 1.1e-3), &TubeOptions::default()).unwrap();
        assert!(small.objective <= big.objective * (1.0 + 1e-6) + 1e-12);
    }

    #[test]
    fn reported_objective_matches_tightening() {
        let model = three_chain(1.1e-3);
        let tube = synthesize_tube(&model, &TubeOptions::default()).unwrap();
        let sum: f64 = tube
            .state_tightening
            .iter()
            .chain(tube.input_tightening.iter())
            .flatten()
            .map(|h| h * h)
            .sum();
        assert!((sum - tube.objective).abs() < 1e-6 * (1.0 + tube.objective));
    }

    #[test]
    fn auto_tau_is_no_worse_than_benchmark_value() {
        let model = three_chain(1.1e-3);
        let fixed_tube = synthesize_tube(&model, &TubeOptions::default()).unwrap();
        let auto = synthesize_tube(
            &model,
            &TubeOptions {
                tau: TauChoice::Auto,
                ..TubeOptions::default()
            },
        )
        .unwrap();
        assert!(auto.objective <= fixed_tube.objective * (1.0 + 1e-4));
    }

    #[test]
    fn tau_parsing() {
        assert_eq!("auto".parse::<TauChoice>(), Ok(TauChoice::Auto));
        assert_eq!("0.055".parse::<TauChoice>(), Ok(TauChoice::Fixed(0.055)));
        assert!("1.5".parse::<TauChoice>().is_err());
        assert!("x".parse::<TauChoice>().is_err());
    }

    #[test]
    fn one_dimensional_tightening() {
        let set = Polytope::from_bounds(&[-1.0], &[1.0]).unwrap();
        let p = DMatrix::from_element(1, 1, 4.0);
        let out = tighten_polytope(
            &set,
            &DMatrix::identity(1, 1),
            &linalg::spd_inverse(&p).unwrap(),
            "x",
        )
        .unwrap();
        assert_eq!(out.offsets().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn unit_ball_tightening_empties_the_row() {
        let set = Polytope::new(
            DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let err = tighten_polytope(
            &set,
            &DMatrix::identity(3, 3),
            &DMatrix::identity(3, 3),
            "x",
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyTightenedSet(msg) if msg.contains("row 0")));
    }

    /// Euclidean projection onto `{eᵀPe ≤ 1}` by bisection on the
    /// multiplier of `e = (I + μP)⁻¹ y`.
    fn project(y: &DVector<f64>, p: &DMatrix<f64>) -> DVector<f64> {
        if linalg::quad_form(p, y) <= 1.0 {
            return y.clone();
        }
        let n = y.len();
        let at = |mu: f64| (DMatrix::identity(n, n) + p * mu).lu().solve(y).unwrap();
        let (mut lo, mut hi) = (0.0, 1.0);
        while linalg::quad_form(p, &at(hi)) > 1.0 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if linalg::quad_form(p, &at(mid)) > 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        at(hi)
    }

    /// Projected gradient ascent of `c·e` over `{eᵀPe ≤ 1}`.
    fn support_by_ascent(c: &DVector<f64>, p: &DMatrix<f64>) -> f64 {
        let step = 1.0 / linalg::max_eigenvalue(p).sqrt();
        let mut e = DVector::zeros(c.len());
        for _ in 0..500 {
            e = project(&(&e + c * step), p);
        }
        c.dot(&e)
    }

    #[test]
    fn tightened_offsets_match_support_oracle() {
        let model = build_chain_benchmark(&ChainParams {
            masses: 2,
            position_override: None,
            ..ChainParams::benchmark()
        })
        .unwrap();
        let tube = synthesize_tube(&model, &TubeOptions::default()).unwrap();
        let tight = tighten_constraints(&model, &tube).unwrap();
        let p = tube.global_shape();
        for i in 0..2 {
            let sub = model.subsystem(i);
            let w = model.neighborhood_lift(i);
            for r in 0..sub.state_constraints.num_rows() {
                let c = (sub.state_constraints.rows().row(r) * &w).transpose();
                let expect = sub.state_constraints.offsets()[r] - support_by_ascent(&c, &p);
                assert!((tight.state[i].offsets()[r] - expect).abs() < 1e-6);
            }
            for r in 0..sub.input_constraints.num_rows() {
                let c = (sub.input_constraints.rows().row(r) * &tube.gains[i] * &w).transpose();
                let expect = sub.input_constraints.offsets()[r] - support_by_ascent(&c, &p);
                assert!((tight.input[i].offsets()[r] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn tightening_is_sound_on_samples() {
        let model = three_chain(1.1e-3);
        let tube = synthesize_tube(&model, &TubeOptions::default()).unwrap();
        let tight = tighten_constraints(&model, &tube).unwrap();
        let omega = Ellipsoid::new(tube.global_shape(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 1000 {
            let z = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
            if (0..3).any(|i| !tight.state[i].contains(&model.neighborhood_state(&z, i), 0.0)) {
                continue;
            }
            let x = &z + omega.sample(&mut rng, checked % 2 == 0);
            for i in 0..3 {
                let sub = model.subsystem(i);
                assert!(sub
                    .state_constraints
                    .contains(&model.neighborhood_state(&x, i), 1e-9));
            }
            checked += 1;
        }
    }

    #[test]
    fn single_subsystem_projection_is_identity() {
        let model = scalar_model(1.2, 0.01);
        let tube = synthesize_tube(&model, &fixed(0.3)).unwrap();
        let blocks = project_to_neighborhood_form(&model, &tube);
        assert_eq!(blocks[0], tube.shapes[0]);
    }

    #[test]
    fn projection_reproduces_global_form() {
        let model = three_chain(1.1e-3);
        let tube = synthesize_tube(&model, &TubeOptions::default()).unwrap();
        let blocks = project_to_neighborhood_form(&model, &tube);
        let p = tube.global_shape();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let e = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
            let local: f64 = (0..3)
                .map(|i| linalg::quad_form(&blocks[i], &model.neighborhood_state(&e, i)))
                .sum();
            assert!((local - linalg::quad_form(&p, &e)).abs() < 1e-9 * (1.0 + local));
        }
        for (i, b) in blocks.iter().enumerate() {
            let own = model.neighborhood_offset(i, i).unwrap();
            for &j in model.neighborhood(i) {
                let off = model.neighborhood_offset(i, j).unwrap();
                let block = b.view((off, off), (2, 2));
                assert_eq!(block.amax() > 0.0, off == own);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Any split of the unit budget across subsystems is mapped back into Ω.
        #[test]
        fn budget_split_samples_stay_in_tube(
            raw in proptest::collection::vec(0.0f64..1.0, 3),
            seed in 0u64..1000,
        ) {
            use std::sync::OnceLock;
            static CACHE: OnceLock<(NetworkModel, StructuredTube)> = OnceLock::new();
            let (model, tube) = CACHE.get_or_init(|| {
                let model = three_chain(1.1e-3);
                let tube = synthesize_tube(&model, &TubeOptions::default()).unwrap();
                (model, tube)
            });
            let total: f64 = raw.iter().sum::<f64>().max(1e-12);
            let beta: Vec<f64> = raw.iter().map(|b| b / total.max(1.0)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, g) = model.global_dynamics();
            let a_cl = &a + &b * tube.global_gain(model);
            let parts: Vec<DVector<f64>> = (0..3)
                .map(|i| Ellipsoid::new(tube.shapes[i].clone(), beta[i]).unwrap().sample(&mut rng, true))
                .collect();
            let e = NetworkModel::stack(&parts);
            let w = NetworkModel::stack(
                &model.subsystems().iter().map(|s| s.disturbance_set.sample(&mut rng, true)).collect::<Vec<_>>(),
            );
            let next = &a_cl * e + &g * w;
            prop_assert!(tube.level(model, &next) <= 1.0 + 1e-7);
        }
    }
}
