//! Online safety certification of proposed inputs.
//!
//! At every step the certifier solves a tube MPC program whose objective is
//! the squared distance between the proposed inputs `u_L` and the applied
//! tube law `ũ_i = v_i(0) + K_{Ω,i}(x_{N_i} − z_{N_i}(0))`. Each subsystem
//! owns its nominal trajectory, its tube budget `β̃_i = β_i + Δβ_i` and one
//! negotiation row; the program is therefore separable up to neighbor
//! coupling and can be handed to the consensus solver unchanged.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{Affine, Constraint, Program, Solution, SolveStatus, SolverSettings, VarId};
use crate::error::{Error, Result};
use crate::linalg;
use crate::netmodel::{NetworkModel, Polytope};
use crate::terminal::{self, synthesize_terminal, TerminalIngredients, TerminalOptions};
use crate::tube::{
    project_to_neighborhood_form, synthesize_tube, tighten_constraints, StructuredTube,
    TightenedConstraints, TubeOptions,
};

/// Back-off applied to every tightened offset so that solver residuals
/// never reach the true constraints.
pub const NUMERIC_BACKOFF: f64 = 1e-6;

/// Offline ingredients of the certifier, stored together in one file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Artifacts {
    pub tube: StructuredTube,
    /// Tightened sets including [`NUMERIC_BACKOFF`].
    pub tightened: TightenedConstraints,
    pub terminal: TerminalIngredients,
}

impl Artifacts {
    /// Tube, tightening and terminal ingredients in one go.
    pub fn synthesize(
        model: &NetworkModel,
        tube_options: &TubeOptions,
        terminal_options: &TerminalOptions,
    ) -> Result<Self> {
        let tube = synthesize_tube(model, tube_options)?;
        let tightened = back_off(&tighten_constraints(model, &tube)?, NUMERIC_BACKOFF)?;
        let terminal = synthesize_terminal(model, &tightened, terminal_options)?;
        Ok(Self {
            tube,
            tightened,
            terminal,
        })
    }

    pub fn check(&self, model: &NetworkModel) -> Result<()> {
        let count = model.num_subsystems();
        let sizes = [
            ("tube shapes", self.tube.shapes.len()),
            ("tube gains", self.tube.gains.len()),
            ("tightened state sets", self.tightened.state.len()),
            ("tightened input sets", self.tightened.input.len()),
            ("terminal shapes", self.terminal.shapes.len()),
            ("terminal gains", self.terminal.gains.len()),
            ("terminal levels", self.terminal.alpha0.len()),
        ];
        for (what, len) in sizes {
            if len != count {
                return Err(Error::MissingArtifact(format!(
                    "{what}: {len} entries for {count} subsystems"
                )));
            }
        }
        for i in 0..count {
            let (n, m, nd) = (model.state_dim(i), model.input_dim(i), model.neighborhood_dim(i));
            let ok = self.tube.shapes[i].shape() == (n, n)
                && self.tube.gains[i].shape() == (m, nd)
                && self.tightened.state[i].dim() == nd
                && self.tightened.input[i].dim() == m
                && self.terminal.shapes[i].shape() == (n, n)
                && self.terminal.gains[i].shape() == (m, nd);
            if !ok {
                return Err(Error::Dimension(format!(
                    "artifacts of subsystem {i} do not match the model"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Lowers every offset of the tightened sets by `margin`.
pub fn back_off(tightened: &TightenedConstraints, margin: f64) -> Result<TightenedConstraints> {
    let shrink = |p: &Polytope| {
        let offsets = p.offsets().map(|h| h - margin);
        if offsets.iter().any(|&h| h <= 0.0) {
            return Err(Error::EmptyTightenedSet("numeric back-off empties a row".into()));
        }
        Polytope::new(p.rows().clone(), offsets)
    };
    Ok(TightenedConstraints {
        state: tightened.state.iter().map(shrink).collect::<Result<_>>()?,
        input: tightened.input.iter().map(shrink).collect::<Result<_>>()?,
    })
}

// ---------------------------------------------------------------------------
// Negotiation rows

/// The local rows `Σ_{j∈N_i∖i} Δβ_j / (|N_j| − 1) = 0` of every subsystem,
/// plus the subsystems whose `Δβ` appears in no row and is pinned to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct NegotiationRows {
    /// `(owner, [(j, coefficient)])`.
    pub rows: Vec<(usize, Vec<(usize, f64)>)>,
    pub pinned: Vec<usize>,
}

impl NegotiationRows {
    pub fn new(neighborhoods: &[Vec<usize>]) -> Self {
        let mut rows = Vec::new();
        for (i, nb) in neighborhoods.iter().enumerate() {
            let terms: Vec<(usize, f64)> = nb
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| (j, 1.0 / (others(neighborhoods, j) as f64)))
                .collect();
            if !terms.is_empty() {
                rows.push((i, terms));
            }
        }
        let pinned = (0..neighborhoods.len())
            .filter(|&j| others(neighborhoods, j) == 0)
            .collect();
        Self { rows, pinned }
    }

    /// Dense coefficient matrix, one row per local row followed by one per
    /// pinned subsystem.
    pub fn matrix(&self, count: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows.len() + self.pinned.len(), count);
        for (r, (_, terms)) in self.rows.iter().enumerate() {
            for &(j, c) in terms {
                m[(r, j)] += c;
            }
        }
        for (k, &j) in self.pinned.iter().enumerate() {
            m[(self.rows.len() + k, j)] = 1.0;
        }
        m
    }
}

fn others(neighborhoods: &[Vec<usize>], j: usize) -> usize {
    neighborhoods[j].iter().filter(|&&k| k != j).count()
}

// ---------------------------------------------------------------------------
// Session, requests and results

#[derive(Clone, Debug)]
pub struct CertSettings {
    pub horizon: usize,
    pub solver: SolverSettings,
    /// Objective values at or below this are treated as pass-through.
    pub pass_through_threshold: f64,
    /// Re-solve pass-through steps with `ũ = u_L` imposed so that `u_L` is
    /// returned bit for bit. Costs a second solve.
    pub exact_pass_through: bool,
    /// Allowed excess of `Σβ_i` over one before flagging an integrity error.
    pub integrity_slack: f64,
}

impl Default for CertSettings {
    fn default() -> Self {
        Self {
            horizon: 10,
            solver: SolverSettings::default(),
            pass_through_threshold: 1e-6,
            exact_pass_through: false,
            integrity_slack: 1e-6,
        }
    }
}

impl CertSettings {
    pub fn with_horizon(horizon: usize) -> Self {
        Self {
            horizon,
            ..Self::default()
        }
    }
}

/// Nominal trajectory, globally stacked per prediction step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Candidate {
    pub z: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
}

#[derive(Clone, Debug)]
pub struct CertSession {
    pub settings: CertSettings,
    pub t: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Shifted solution of the previous step, feasible for the current one.
    pub candidate: Option<Candidate>,
    pub history: Vec<CertStatus>,
}

impl CertSession {
    pub fn horizon(&self) -> usize {
        self.settings.horizon
    }
}

#[derive(Clone, Debug)]
pub struct CertRequest {
    /// Measured global state.
    pub x: DVector<f64>,
    /// Proposed global input.
    pub u_l: DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CertStatus {
    Feasible,
    Fallback,
}

impl std::fmt::Display for CertStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Feasible => "feasible",
            Self::Fallback => "fallback",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CertResult {
    /// Input to apply, globally stacked.
    pub u_cert: DVector<f64>,
    pub trajectory: Candidate,
    pub beta_tilde: Vec<f64>,
    pub delta_beta: Vec<f64>,
    /// `Σ_i ‖u_{L,i} − ũ_i‖²`.
    pub objective: f64,
    pub status: CertStatus,
    /// The objective was within the pass-through threshold.
    pub pass_through: bool,
    pub solve_time: f64,
    pub iterations: u32,
}

// ---------------------------------------------------------------------------
// Program construction

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProgramMode {
    /// Closest admissible input to `u_L`.
    Certify,
    /// `ũ = u_L` imposed; a pure feasibility problem.
    Pinned,
    /// Robust tube MPC: stage costs on the nominal trajectory plus the
    /// terminal cost, with no reference input.
    Rdmpc,
}

/// Variable indices of the certification program.
#[derive(Clone, Debug)]
pub struct Layout {
    /// `z[i][k][r]`, `k = 0..=N`.
    pub z: Vec<Vec<Vec<VarId>>>,
    /// `v[i][k][r]`, `k = 0..N`.
    pub v: Vec<Vec<Vec<VarId>>>,
    pub u: Vec<Vec<VarId>>,
    pub beta_tilde: Vec<VarId>,
    pub delta_beta: Vec<VarId>,
}

#[derive(Clone, Debug)]
pub struct CertProgram {
    pub program: Program,
    pub layout: Layout,
    pub horizon: usize,
}

impl CertProgram {
    /// Reads the nominal trajectory and inputs out of a solution vector.
    pub fn extract(&self, model: &NetworkModel, x: &[f64]) -> (Candidate, DVector<f64>, Vec<f64>, Vec<f64>) {
        let l = &self.layout;
        let stack = |blocks: &[Vec<VarId>]| -> DVector<f64> {
            DVector::from_vec(blocks.iter().flat_map(|b| b.iter().map(|&v| x[v])).collect())
        };
        let z = (0..=self.horizon)
            .map(|k| stack(&(0..model.num_subsystems()).map(|i| l.z[i][k].clone()).collect::<Vec<_>>()))
            .collect();
        let v = (0..self.horizon)
            .map(|k| stack(&(0..model.num_subsystems()).map(|i| l.v[i][k].clone()).collect::<Vec<_>>()))
            .collect();
        let u = stack(&l.u);
        let bt = l.beta_tilde.iter().map(|&b| x[b]).collect();
        let db = l.delta_beta.iter().map(|&b| x[b]).collect();
        (Candidate { z, v }, u, bt, db)
    }

    /// `Σ_i ‖u_{L,i} − ũ_i‖²` at `x`.
    pub fn distance(&self, u_l: &DVector<f64>, x: &[f64]) -> f64 {
        self.layout
            .u
            .iter()
            .flatten()
            .zip(u_l.iter())
            .map(|(&v, &target)| (x[v] - target).powi(2))
            .sum()
    }
}

fn check_request(model: &NetworkModel, request: &CertRequest) -> Result<()> {
    if request.x.len() != model.total_state_dim() || request.u_l.len() != model.total_input_dim() {
        return Err(Error::Dimension(format!(
            "request has state {} and input {}, model expects {} and {}",
            request.x.len(),
            request.u_l.len(),
            model.total_state_dim(),
            model.total_input_dim()
        )));
    }
    Ok(())
}

/// Assembles the certification program for the current session state.
pub fn build_program(
    model: &NetworkModel,
    artifacts: &Artifacts,
    session: &CertSession,
    request: &CertRequest,
    mode: ProgramMode,
) -> Result<CertProgram> {
    artifacts.check(model)?;
    check_request(model, request)?;
    let count = model.num_subsystems();
    let horizon = session.horizon();
    if horizon == 0 {
        return Err(Error::Dimension("horizon must be at least one step".into()));
    }
    if session.beta.len() != count || session.alpha.len() != count {
        return Err(Error::Dimension("session levels do not match the model".into()));
    }

    let mut prog = Program::new();
    let mut layout = Layout {
        z: Vec::with_capacity(count),
        v: Vec::with_capacity(count),
        u: Vec::with_capacity(count),
        beta_tilde: Vec::with_capacity(count),
        delta_beta: Vec::with_capacity(count),
    };
    for i in 0..count {
        let (n, m) = (model.state_dim(i), model.input_dim(i));
        layout
            .z
            .push((0..=horizon).map(|k| prog.add_vars(&format!("z{i}({k})"), n, Some(i))).collect());
        layout
            .v
            .push((0..horizon).map(|k| prog.add_vars(&format!("v{i}({k})"), m, Some(i))).collect());
        layout.u.push(prog.add_vars(&format!("u{i}"), m, Some(i)));
        layout.beta_tilde.push(prog.add_var(format!("beta{i}"), Some(i)));
        layout.delta_beta.push(prog.add_var(format!("dbeta{i}"), Some(i)));
    }
    let z_nbhd = |i: usize, k: usize| -> Vec<Affine> {
        model
            .neighborhood(i)
            .iter()
            .flat_map(|&j| layout.z[j][k].iter().map(|&v| Affine::var(v)))
            .collect()
    };
    let tube_blocks = project_to_neighborhood_form(model, &artifacts.tube);
    let negotiation = NegotiationRows::new(model.neighborhoods());

    for i in 0..count {
        let sub = model.subsystem(i);
        let (n, m) = (model.state_dim(i), model.input_dim(i));
        let tag = |what: &str| format!("{what} {i}");

        // nominal dynamics
        for k in 0..horizon {
            let mut rows: Vec<Affine> = layout.z[i][k + 1].iter().map(|&v| Affine::var(v)).collect();
            for (&j, a_ij) in &sub.coupling {
                let zj: Vec<Affine> = layout.z[j][k].iter().map(|&v| Affine::var(v)).collect();
                for (row, term) in rows.iter_mut().zip(crate::conic::mat_vec(a_ij, &zj)) {
                    *row = row.clone() - term;
                }
            }
            let vk: Vec<Affine> = layout.v[i][k].iter().map(|&v| Affine::var(v)).collect();
            for (row, term) in rows.iter_mut().zip(crate::conic::mat_vec(&sub.input_matrix, &vk)) {
                *row = row.clone() - term;
            }
            prog.push(Constraint::zero(rows).labeled(tag(&format!("dynamics k={k}"))).owned_by(i));
        }

        // tightened state and input constraints
        let xs = &artifacts.tightened.state[i];
        let us = &artifacts.tightened.input[i];
        for k in 0..horizon {
            let zn = z_nbhd(i, k);
            let rows: Vec<Affine> = crate::conic::mat_vec(xs.rows(), &zn)
                .into_iter()
                .zip(xs.offsets().iter())
                .map(|(hz, &h)| Affine::constant(h) - hz)
                .collect();
            prog.push(Constraint::nonneg(rows).labeled(tag(&format!("state k={k}"))).owned_by(i));
            let vk: Vec<Affine> = layout.v[i][k].iter().map(|&v| Affine::var(v)).collect();
            let rows: Vec<Affine> = crate::conic::mat_vec(us.rows(), &vk)
                .into_iter()
                .zip(us.offsets().iter())
                .map(|(ov, &o)| Affine::constant(o) - ov)
                .collect();
            prog.push(Constraint::nonneg(rows).labeled(tag(&format!("input k={k}"))).owned_by(i));
        }

        // terminal set
        let zn_final: Vec<Affine> = layout.z[i][horizon].iter().map(|&v| Affine::var(v)).collect();
        let f_term = linalg::psd_factor(&artifacts.terminal.shapes[i]);
        prog.push(
            Constraint::squared_norm_le(&f_term, &zn_final, Affine::constant(session.alpha[i]))
                .labeled(tag("terminal"))
                .owned_by(i),
        );

        // initial tube around z(0) with the neighborhood-form block of subsystem i
        let x_n = model.neighborhood_state(&request.x, i);
        let zn0 = z_nbhd(i, 0);
        let err: Vec<Affine> = zn0
            .iter()
            .zip(x_n.iter())
            .map(|(z, &x)| Affine::constant(x) - z.clone())
            .collect();
        let f_tube = linalg::psd_factor(&tube_blocks[i]);
        prog.push(
            Constraint::squared_norm_le(&f_tube, &err, Affine::var(layout.beta_tilde[i]))
                .labeled(tag("initial tube"))
                .owned_by(i),
        );

        // budgets
        prog.push(
            Constraint::zero(vec![
                Affine::var(layout.beta_tilde[i])
                    - Affine::var(layout.delta_beta[i])
                    - Affine::constant(session.beta[i]),
            ])
            .labeled(tag("budget"))
            .owned_by(i),
        );
        prog.push(
            Constraint::nonneg(vec![Affine::var(layout.beta_tilde[i])])
                .labeled(tag("budget sign"))
                .owned_by(i),
        );
        // Σβ̃ = Σβ ≤ 1 already bounds every β̃_i; stated locally so that an
        // agent can see infeasibility on its own
        prog.push(
            Constraint::nonneg(vec![Affine::constant(1.0) - Affine::var(layout.beta_tilde[i])])
                .labeled(tag("budget cap"))
                .owned_by(i)
                .mark_implied(),
        );

        // applied input ũ_i = v_i(0) + K_{Ω,i}(x_{N_i} − z_{N_i}(0))
        let k_err = crate::conic::mat_vec(&artifacts.tube.gains[i], &err);
        let rows: Vec<Affine> = (0..m)
            .map(|r| {
                Affine::var(layout.u[i][r]) - Affine::var(layout.v[i][0][r]) - k_err[r].clone()
            })
            .collect();
        prog.push(Constraint::zero(rows).labeled(tag("tube law")).owned_by(i));

        match mode {
            ProgramMode::Certify => {
                for r in 0..m {
                    let target = request.u_l[model.input_offset(i) + r];
                    prog.minimize_square(&(Affine::var(layout.u[i][r]) - Affine::constant(target)), 1.0);
                }
            }
            ProgramMode::Pinned => {
                let rows = (0..m)
                    .map(|r| {
                        Affine::var(layout.u[i][r])
                            - Affine::constant(request.u_l[model.input_offset(i) + r])
                    })
                    .collect();
                prog.push(Constraint::zero(rows).labeled(tag("pinned input")).owned_by(i));
            }
            ProgramMode::Rdmpc => {
                for k in 0..horizon {
                    for z in z_nbhd(i, k) {
                        prog.minimize_square(&z, 0.5);
                    }
                    for &v in &layout.v[i][k] {
                        prog.minimize_square(&Affine::var(v), 1.0);
                    }
                }
                let p_f = &artifacts.terminal.shapes[i];
                for a in 0..n {
                    for b in 0..n {
                        prog.quad.push((layout.z[i][horizon][a], layout.z[i][horizon][b], p_f[(a, b)]));
                    }
                }
            }
        }
    }

    for (owner, terms) in &negotiation.rows {
        let row = terms.iter().fold(Affine::zero(), |mut acc, &(j, c)| {
            acc.add_term(layout.delta_beta[j], c);
            acc
        });
        prog.push(Constraint::zero(vec![row]).labeled(format!("negotiation {owner}")).owned_by(*owner));
    }
    for &j in &negotiation.pinned {
        prog.push(
            Constraint::zero(vec![Affine::var(layout.delta_beta[j])])
                .labeled(format!("negotiation pin {j}"))
                .owned_by(j),
        );
    }

    Ok(CertProgram {
        program: prog,
        layout,
        horizon,
    })
}

// ---------------------------------------------------------------------------
// Solving

/// Something that solves a certification program, centrally or not.
pub trait Backend {
    fn solve(&self, model: &NetworkModel, program: &CertProgram) -> Result<Solution>;
}

/// One conic solve of the whole program.
#[derive(Clone, Debug, Default)]
pub struct Centralized {
    pub settings: SolverSettings,
}

impl Backend for Centralized {
    fn solve(&self, _model: &NetworkModel, program: &CertProgram) -> Result<Solution> {
        program.program.without_implied().solve(&self.settings)
    }
}

fn solve_mode(
    model: &NetworkModel,
    artifacts: &Artifacts,
    session: &CertSession,
    request: &CertRequest,
    mode: ProgramMode,
    backend: &dyn Backend,
) -> Result<(CertProgram, Solution)> {
    let program = build_program(model, artifacts, session, request, mode)?;
    let sol = backend.solve(model, &program)?;
    if sol.status == SolveStatus::Infeasible {
        return Err(Error::Infeasible);
    }
    Ok((program, sol))
}

fn result_from(
    model: &NetworkModel,
    program: &CertProgram,
    sol: &Solution,
    u_l: &DVector<f64>,
) -> CertResult {
    let (trajectory, u, beta_tilde, delta_beta) = program.extract(model, &sol.x);
    CertResult {
        objective: program.distance(u_l, &sol.x),
        u_cert: u,
        trajectory,
        beta_tilde,
        delta_beta,
        status: CertStatus::Feasible,
        pass_through: false,
        solve_time: sol.solve_time,
        iterations: sol.iterations,
    }
}

/// Certifies `request.u_l` with the centralized solver.
pub fn certify(
    model: &NetworkModel,
    artifacts: &Artifacts,
    session: &CertSession,
    request: &CertRequest,
) -> Result<CertResult> {
    let backend = Centralized {
        settings: session.settings.solver.clone(),
    };
    certify_with(model, artifacts, session, request, &backend)
}

/// Certifies `request.u_l`. Objectives at or below the pass-through
/// threshold mark the result as pass-through; with `exact_pass_through`
/// they are confirmed by the pinned program and `u_L` is returned exactly.
pub fn certify_with(
    model: &NetworkModel,
    artifacts: &Artifacts,
    session: &CertSession,
    request: &CertRequest,
    backend: &dyn Backend,
) -> Result<CertResult> {
    let (program, sol) = solve_mode(model, artifacts, session, request, ProgramMode::Certify, backend)?;
    let mut result = result_from(model, &program, &sol, &request.u_l);
    result.pass_through = result.objective <= session.settings.pass_through_threshold;
    if result.pass_through && session.settings.exact_pass_through {
        if let Ok((pinned, psol)) =
            solve_mode(model, artifacts, session, request, ProgramMode::Pinned, backend)
        {
            let mut exact = result_from(model, &pinned, &psol, &request.u_l);
            exact.u_cert = request.u_l.clone();
            exact.objective = 0.0;
            exact.pass_through = true;
            exact.solve_time += result.solve_time;
            exact.iterations += result.iterations;
            result = exact;
        }
    }
    Ok(result)
}

/// Whether the program with `ũ = u_L` imposed is feasible.
pub fn pinned_feasible(
    model: &NetworkModel,
    artifacts: &Artifacts,
    session: &CertSession,
    request: &CertRequest,
) -> Result<bool> {
    let backend = Centralized {
        settings: session.settings.solver.clone(),
    };
    match solve_mode(model, artifacts, session, request, ProgramMode::Pinned, &backend) {
        Ok(_) => Ok(true),
        Err(Error::Infeasible) => Ok(false),
        Err(e) => Err(e),
    }
}

/// The robust tube MPC baseline: same constraints, nominal stage costs.
pub fn rdmpc_step(
    model: &NetworkModel,
    artifacts: &Artifacts,
    session: &CertSession,
    x: &DVector<f64>,
) -> Result<CertResult> {
    let backend = Centralized {
        settings: session.settings.solver.clone(),
    };
    let request = CertRequest {
        x: x.clone(),
        u_l: DVector::zeros(model.total_input_dim()),
    };
    let (program, sol) = solve_mode(model, artifacts, session, &request, ProgramMode::Rdmpc, &backend)?;
    let mut result = result_from(model, &program, &sol, &request.u_l);
    result.objective = sol.objective;
    Ok(result)
}

/// Fresh session with `β_i = 1/M` and `α_i = ᾱ/M`, checked for feasibility
/// at `x0`. The feasibility solution becomes the first fallback candidate.
pub fn init_session(
    model: &NetworkModel,
    artifacts: &Artifacts,
    x0: &DVector<f64>,
    settings: CertSettings,
) -> Result<CertSession> {
    let count = model.num_subsystems();
    let mut session = CertSession {
        settings,
        t: 0,
        beta: vec![1.0 / count as f64; count],
        alpha: artifacts.terminal.alpha0.clone(),
        candidate: None,
        history: Vec::new(),
    };
    let request = CertRequest {
        x: x0.clone(),
        u_l: DVector::zeros(model.total_input_dim()),
    };
    match certify(model, artifacts, &session, &request) {
        Ok(result) => {
            session.candidate = Some(result.trajectory);
            Ok(session)
        }
        Err(Error::Infeasible) => Err(Error::OutsideSafeSet),
        Err(e) => Err(e),
    }
}

/// Whether `x` lies in the feasible set of the program for a fresh session
/// with the given horizon.
pub fn in_safe_set(
    model: &NetworkModel,
    artifacts: &Artifacts,
    x: &DVector<f64>,
    horizon: usize,
) -> Result<bool> {
    match init_session(model, artifacts, x, CertSettings::with_horizon(horizon)) {
        Ok(_) => Ok(true),
        Err(Error::OutsideSafeSet) => Ok(false),
        Err(Error::Solver(_)) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Applies the stored candidate's tube law instead of a fresh solution.
pub fn fallback(
    model: &NetworkModel,
    artifacts: &Artifacts,
    session: &CertSession,
    request: &CertRequest,
) -> Result<CertResult> {
    let candidate = session
        .candidate
        .clone()
        .ok_or_else(|| Error::MissingArtifact("no fallback candidate in session".into()))?;
    let k = artifacts.tube.global_gain(model);
    let u_cert = &candidate.v[0] + &k * (&request.x - &candidate.z[0]);
    let objective = (&request.u_l - &u_cert).norm_squared();
    Ok(CertResult {
        u_cert,
        trajectory: candidate,
        beta_tilde: session.beta.clone(),
        delta_beta: vec![0.0; model.num_subsystems()],
        objective,
        status: CertStatus::Fallback,
        pass_through: false,
        solve_time: 0.0,
        iterations: 0,
    })
}

/// Certifies or, when the program fails, falls back to the candidate.
pub fn certify_or_fallback(
    model: &NetworkModel,
    artifacts: &Artifacts,
    session: &CertSession,
    request: &CertRequest,
    backend: &dyn Backend,
) -> Result<CertResult> {
    match certify_with(model, artifacts, session, request, backend) {
        Ok(r) => Ok(r),
        Err(Error::Infeasible | Error::Solver(_) | Error::NotConverged { .. }) => {
            fallback(model, artifacts, session, request)
        }
        Err(e) => Err(e),
    }
}

/// Moves the session to `t + 1` after `result` was applied and `x_next`
/// measured: new budgets from the realized tube errors, new terminal levels
/// from the terminal iterate, and the shifted candidate.
pub fn advance_session(
    model: &NetworkModel,
    artifacts: &Artifacts,
    session: &mut CertSession,
    x_next: &DVector<f64>,
    result: &CertResult,
) -> Result<()> {
    let horizon = session.horizon();
    let traj = &result.trajectory;
    if traj.z.len() != horizon + 1 || traj.v.len() != horizon {
        return Err(Error::Dimension("trajectory does not match the session horizon".into()));
    }
    if x_next.len() != model.total_state_dim() {
        return Err(Error::Dimension("measured state has the wrong length".into()));
    }
    let count = model.num_subsystems();
    let err = x_next - &traj.z[1];
    let beta: Vec<f64> = (0..count)
        .map(|i| linalg::quad_form(&artifacts.tube.shapes[i], &model.local_state(&err, i)))
        .collect();
    let total: f64 = beta.iter().sum();
    if total > 1.0 + session.settings.integrity_slack {
        return Err(Error::Integrity(format!(
            "Σβ(t+1) = {total:.9} exceeds one; the disturbance left its set"
        )));
    }

    let z_end = &traj.z[horizon];
    let z_n: Vec<DVector<f64>> = (0..count).map(|i| model.neighborhood_state(z_end, i)).collect();
    let alpha = terminal::update_alpha(&artifacts.terminal, &session.alpha, &z_n)?;

    let (a, b, _) = model.global_dynamics();
    let v_end = artifacts.terminal.global_gain(model) * z_end;
    let mut z: Vec<DVector<f64>> = traj.z[1..].to_vec();
    z.push(&a * z_end + &b * &v_end);
    let mut v: Vec<DVector<f64>> = traj.v[1..].to_vec();
    v.push(v_end);

    session.beta = beta;
    session.alpha = alpha;
    session.candidate = Some(Candidate { z, v });
    session.history.push(result.status);
    session.t += 1;
    Ok(())
}
