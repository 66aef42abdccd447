//! Closed-loop experiments on top of the certifier.
//!
//! Surrogate policies stand in for learning-based controllers. A run applies
//! the proposed inputs unfiltered (`raw`), filtered by the certifier
//! (`certified`), or replaces them by the robust tube MPC baseline
//! (`rdmpc`). Traces are written as CSV with one row per step and
//! subsystem, plus a JSON sidecar.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certifier::{
    advance_session, certify_or_fallback, fallback, init_session, rdmpc_step, Artifacts, Backend,
    CertRequest, CertSettings, CertStatus, Centralized,
};
use crate::conic::{Affine, Constraint, Program, SolveStatus, SolverSettings};
use crate::error::{Error, Result};
use crate::linalg;
use crate::netmodel::{Ellipsoid, NetworkModel, MEMBERSHIP_SLACK};

/// Uniform sample from `W_i`, or from its surface.
pub fn sample_disturbance<R: Rng + ?Sized>(set: &Ellipsoid, rng: &mut R, boundary: bool) -> DVector<f64> {
    set.sample(rng, boundary)
}

/// One draw for every subsystem, stacked.
pub fn sample_global_disturbance<R: Rng + ?Sized>(
    model: &NetworkModel,
    rng: &mut R,
    boundary: bool,
) -> DVector<f64> {
    let parts: Vec<DVector<f64>> = model
        .subsystems()
        .iter()
        .map(|s| sample_disturbance(&s.disturbance_set, rng, boundary))
        .collect();
    NetworkModel::stack(&parts)
}

/// `l_i = ½‖x_{N_i}‖² + ‖u_i‖²`.
pub fn stage_cost(x_n: &DVector<f64>, u: &DVector<f64>) -> f64 {
    0.5 * x_n.norm_squared() + u.norm_squared()
}

/// Per-subsystem stage costs at a global state and input.
pub fn stage_costs(model: &NetworkModel, x: &DVector<f64>, u: &DVector<f64>) -> Vec<f64> {
    (0..model.num_subsystems())
        .map(|i| stage_cost(&model.neighborhood_state(x, i), &model.local_input(u, i)))
        .collect()
}

/// `Σ_i l_i` written as `xᵀQx + uᵀRu` on the global vectors.
pub fn global_cost_weights(model: &NetworkModel) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = model.total_state_dim();
    let mut q = DMatrix::zeros(n, n);
    for i in 0..model.num_subsystems() {
        let w = model.neighborhood_lift(i);
        q += w.transpose() * w * 0.5;
    }
    let m = model.total_input_dim();
    (q, DMatrix::identity(m, m))
}

// ---------------------------------------------------------------------------
// Policies

/// Proposes a global input from the measured state.
pub trait Policy: Send {
    fn name(&self) -> &str;
    fn propose(&mut self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>>;
    /// Seconds spent in the last proposal's own optimization, if any.
    fn last_solve_time(&self) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PolicySpec {
    Zero,
    /// Structured gain from a truncated LQR design on the undisturbed model.
    LinearFeedback(LqrWeights),
    /// `N`-step MPC with the stage costs, original constraints and no
    /// terminal ingredients.
    NominalDmpc { horizon: usize },
    /// Inputs read from a JSON file holding one global input per step.
    External(String),
}

impl PolicySpec {
    pub fn linear() -> Self {
        Self::LinearFeedback(LqrWeights::default())
    }
}

impl FromStr for PolicySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "zero" => Ok(Self::Zero),
            "linear" | "linear-feedback" => Ok(Self::linear()),
            "nominal-dmpc" => Ok(Self::NominalDmpc { horizon: 10 }),
            other => match other.strip_prefix("external:") {
                Some(path) if !path.is_empty() => Ok(Self::External(path.to_string())),
                _ => Err(format!(
                    "unknown policy {other:?}; expected zero, linear, nominal-dmpc or external:<file>"
                )),
            },
        }
    }
}

/// Weights of the LQR design behind the linear surrogate, as multiples of
/// the stage-cost weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LqrWeights {
    pub state: f64,
    pub input: f64,
}

impl Default for LqrWeights {
    fn default() -> Self {
        Self {
            state: 1.0,
            input: 1.0,
        }
    }
}

pub fn make_policy(spec: &PolicySpec, model: &NetworkModel) -> Result<Box<dyn Policy>> {
    Ok(match spec {
        PolicySpec::Zero => Box::new(ZeroPolicy {
            inputs: model.total_input_dim(),
        }),
        PolicySpec::LinearFeedback(w) => Box::new(LinearPolicy {
            gain: structured_lqr_gain(model, w)?,
        }),
        PolicySpec::NominalDmpc { horizon } => Box::new(NominalDmpc::new(model, *horizon)?),
        PolicySpec::External(path) => {
            let text = std::fs::read_to_string(path)?;
            let inputs: Vec<Vec<f64>> = serde_json::from_str(&text)?;
            if inputs.iter().any(|u| u.len() != model.total_input_dim()) {
                return Err(Error::Dimension(format!(
                    "external inputs must have length {}",
                    model.total_input_dim()
                )));
            }
            Box::new(ExternalPolicy { inputs })
        }
    })
}

struct ZeroPolicy {
    inputs: usize,
}

impl Policy for ZeroPolicy {
    fn name(&self) -> &str {
        "zero"
    }

    fn propose(&mut self, _t: usize, _x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.inputs))
    }
}

pub struct LinearPolicy {
    /// Global gain with neighborhood sparsity.
    pub gain: DMatrix<f64>,
}

impl Policy for LinearPolicy {
    fn name(&self) -> &str {
        "linear"
    }

    fn propose(&mut self, _t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.gain * x)
    }
}

struct ExternalPolicy {
    inputs: Vec<Vec<f64>>,
}

impl Policy for ExternalPolicy {
    fn name(&self) -> &str {
        "external"
    }

    fn propose(&mut self, t: usize, _x: &DVector<f64>) -> Result<DVector<f64>> {
        self.inputs
            .get(t)
            .map(|u| DVector::from_column_slice(u))
            .ok_or_else(|| Error::MissingArtifact(format!("external policy has no input for step {t}")))
    }
}

/// Infinite-horizon LQR gain of `(A, B)` with the given weights, with all
/// entries outside each subsystem's neighborhood removed. Fails when the
/// truncated loop is not stable.
pub fn structured_lqr_gain(model: &NetworkModel, weights: &LqrWeights) -> Result<DMatrix<f64>> {
    let (a, b, _) = model.global_dynamics();
    let (q, r) = global_cost_weights(model);
    let (q, r) = (q * weights.state, r * weights.input);
    let mut p = q.clone();
    for _ in 0..100_000 {
        let k = riccati_gain(&a, &b, &r, &p)?;
        let next = linalg::symmetrize(&(&q + a.transpose() * &p * (&a + &b * &k)));
        let done = (&next - &p).amax() <= 1e-12 * (1.0 + p.amax());
        p = next;
        if done {
            break;
        }
    }
    let mut k = riccati_gain(&a, &b, &r, &p)?;
    for i in 0..model.num_subsystems() {
        let rows = model.input_offset(i)..model.input_offset(i) + model.input_dim(i);
        for j in 0..model.num_subsystems() {
            if model.neighborhood(i).contains(&j) {
                continue;
            }
            let cols = model.state_offset(j)..model.state_offset(j) + model.state_dim(j);
            for r in rows.clone() {
                for c in cols.clone() {
                    k[(r, c)] = 0.0;
                }
            }
        }
    }
    let radius = (&a + &b * &k)
        .complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max);
    if radius >= 1.0 {
        return Err(Error::InvalidModel(format!(
            "truncated LQR loop is unstable (spectral radius {radius:.4})"
        )));
    }
    Ok(k)
}

/// `K = −(R + BᵀPB)⁻¹BᵀPA`.
fn riccati_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let s = linalg::symmetrize(&(r + b.transpose() * p * b));
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Solver("Riccati step lost definiteness".into()))?;
    Ok(-chol.solve(&(b.transpose() * p * a)))
}

/// First input of the unconstrained finite-horizon problem with the stage
/// costs and no terminal cost.
pub fn finite_horizon_lq_input(model: &NetworkModel, horizon: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
    let (a, b, _) = model.global_dynamics();
    let (q, r) = global_cost_weights(model);
    let mut p = DMatrix::zeros(a.nrows(), a.nrows());
    let mut k = DMatrix::zeros(b.ncols(), a.nrows());
    for _ in 0..horizon {
        k = riccati_gain(&a, &b, &r, &p)?;
        p = linalg::symmetrize(&(&q + a.transpose() * &p * (&a + &b * &k)));
    }
    Ok(k * x)
}

/// Nominal distributed MPC without terminal ingredients, solved centrally.
pub struct NominalDmpc {
    model: NetworkModel,
    horizon: usize,
    settings: SolverSettings,
    last_time: f64,
}

impl NominalDmpc {
    pub fn new(model: &NetworkModel, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Dimension("nominal MPC needs a positive horizon".into()));
        }
        Ok(Self {
            model: model.clone(),
            horizon,
            settings: SolverSettings::default(),
            last_time: 0.0,
        })
    }

    /// Optimal first input, or `None` when the constraints cannot be met.
    pub fn solve(&self, x: &DVector<f64>) -> Result<Option<(DVector<f64>, f64)>> {
        let model = &self.model;
        let count = model.num_subsystems();
        let h = self.horizon;
        let mut prog = Program::new();
        let xs: Vec<Vec<Vec<usize>>> = (0..count)
            .map(|i| (0..=h).map(|k| prog.add_vars(&format!("x{i}({k})"), model.state_dim(i), Some(i))).collect())
            .collect();
        let us: Vec<Vec<Vec<usize>>> = (0..count)
            .map(|i| (0..h).map(|k| prog.add_vars(&format!("u{i}({k})"), model.input_dim(i), Some(i))).collect())
            .collect();
        let nbhd = |i: usize, k: usize| -> Vec<Affine> {
            model
                .neighborhood(i)
                .iter()
                .flat_map(|&j| xs[j][k].iter().map(|&v| Affine::var(v)))
                .collect()
        };
        for i in 0..count {
            let sub = model.subsystem(i);
            let x_i = model.local_state(x, i);
            prog.push(
                Constraint::zero(
                    xs[i][0]
                        .iter()
                        .zip(x_i.iter())
                        .map(|(&v, &c)| Affine::var(v) - Affine::constant(c))
                        .collect(),
                )
                .owned_by(i),
            );
            for k in 0..h {
                let mut rows: Vec<Affine> = xs[i][k + 1].iter().map(|&v| Affine::var(v)).collect();
                for (&j, a_ij) in &sub.coupling {
                    let xj: Vec<Affine> = xs[j][k].iter().map(|&v| Affine::var(v)).collect();
                    for (row, t) in rows.iter_mut().zip(crate::conic::mat_vec(a_ij, &xj)) {
                        *row = row.clone() - t;
                    }
                }
                let uk: Vec<Affine> = us[i][k].iter().map(|&v| Affine::var(v)).collect();
                for (row, t) in rows.iter_mut().zip(crate::conic::mat_vec(&sub.input_matrix, &uk)) {
                    *row = row.clone() - t;
                }
                prog.push(Constraint::zero(rows).owned_by(i));
                let xn = nbhd(i, k);
                // x(0) is measured; its constraints are not the controller's to meet
                if k > 0 {
                    let rows = crate::conic::mat_vec(sub.state_constraints.rows(), &xn)
                        .into_iter()
                        .zip(sub.state_constraints.offsets().iter())
                        .map(|(hx, &c)| Affine::constant(c) - hx)
                        .collect();
                    prog.push(Constraint::nonneg(rows).owned_by(i));
                }
                let rows = crate::conic::mat_vec(sub.input_constraints.rows(), &uk)
                    .into_iter()
                    .zip(sub.input_constraints.offsets().iter())
                    .map(|(ou, &c)| Affine::constant(c) - ou)
                    .collect();
                prog.push(Constraint::nonneg(rows).owned_by(i));
                for e in xn {
                    prog.minimize_square(&e, 0.5);
                }
                for u in uk {
                    prog.minimize_square(&u, 1.0);
                }
            }
            let xn = nbhd(i, h);
            let rows = crate::conic::mat_vec(sub.state_constraints.rows(), &xn)
                .into_iter()
                .zip(sub.state_constraints.offsets().iter())
                .map(|(hx, &c)| Affine::constant(c) - hx)
                .collect();
            prog.push(Constraint::nonneg(rows).owned_by(i));
        }
        let sol = match prog.solve(&self.settings) {
            Ok(s) if s.status != SolveStatus::Infeasible => s,
            Ok(_) | Err(Error::Solver(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let u0 = DVector::from_vec(
            (0..count)
                .flat_map(|i| us[i][0].iter().map(|&v| sol.x[v]))
                .collect(),
        );
        Ok(Some((u0, sol.solve_time)))
    }
}

impl Policy for NominalDmpc {
    fn name(&self) -> &str {
        "nominal-dmpc"
    }

    fn propose(&mut self, _t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        let start = Instant::now();
        let u = match self.solve(x)? {
            Some((u, _)) => u,
            None => finite_horizon_lq_input(&self.model, self.horizon, x)?,
        };
        self.last_time = start.elapsed().as_secs_f64();
        Ok(u)
    }

    fn last_solve_time(&self) -> f64 {
        self.last_time
    }
}

// ---------------------------------------------------------------------------
// Simulation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Controller {
    Certified,
    Raw,
    Rdmpc,
}

impl FromStr for Controller {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "certified" => Ok(Self::Certified),
            "raw" => Ok(Self::Raw),
            "rdmpc" => Ok(Self::Rdmpc),
            other => Err(format!("unknown controller {other:?}; expected certified, raw or rdmpc")),
        }
    }
}

impl std::fmt::Display for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Certified => "certified",
            Self::Raw => "raw",
            Self::Rdmpc => "rdmpc",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepStatus {
    Feasible,
    Fallback,
    /// Raw runs apply the proposal without solving anything.
    Unfiltered,
}

impl From<CertStatus> for StepStatus {
    fn from(s: CertStatus) -> Self {
        match s {
            CertStatus::Feasible => Self::Feasible,
            CertStatus::Fallback => Self::Fallback,
        }
    }
}

impl std::fmt::Display for StepStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Feasible => "feasible",
            Self::Fallback => "fallback",
            Self::Unfiltered => "unfiltered",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub u_l: Vec<f64>,
    /// Input actually applied.
    pub u_cert: Vec<f64>,
    pub w: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub status: StepStatus,
    pub stage_costs: Vec<f64>,
    /// Certifier (or baseline) plus policy optimization time.
    pub solve_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimTrace {
    pub controller: Controller,
    pub policy: String,
    pub seed: u64,
    pub horizon: usize,
    pub alpha_bar: f64,
    pub steps: Vec<StepRecord>,
    pub final_state: Vec<f64>,
    pub state_violations: usize,
    pub input_violations: usize,
    pub total_cost: f64,
}

impl SimTrace {
    pub fn total_solve_ms(&self) -> f64 {
        self.steps.iter().map(|s| s.solve_ms).sum()
    }

    pub fn statuses(&self) -> impl Iterator<Item = StepStatus> + '_ {
        self.steps.iter().map(|s| s.status)
    }

    /// Cost recomputed from the recorded states and inputs.
    pub fn recomputed_cost(&self, model: &NetworkModel) -> f64 {
        self.steps
            .iter()
            .map(|s| {
                stage_costs(
                    model,
                    &DVector::from_column_slice(&s.x),
                    &DVector::from_column_slice(&s.u_cert),
                )
                .iter()
                .sum::<f64>()
            })
            .sum()
    }

    /// All visited states, including the final one.
    pub fn states(&self) -> Vec<DVector<f64>> {
        self.steps
            .iter()
            .map(|s| DVector::from_column_slice(&s.x))
            .chain(std::iter::once(DVector::from_column_slice(&self.final_state)))
            .collect()
    }

    pub fn write_csv(&self, model: &NetworkModel, path: impl AsRef<Path>) -> Result<()> {
        let n_max = (0..model.num_subsystems()).map(|i| model.state_dim(i)).max().unwrap_or(0);
        let m_max = (0..model.num_subsystems()).map(|i| model.input_dim(i)).max().unwrap_or(0);
        let p_max = model.subsystems().iter().map(|s| s.disturbance_dim()).max().unwrap_or(0);
        let mut out = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string(), "subsystem".to_string()];
        header.extend((0..n_max).map(|k| format!("x{k}")));
        header.extend((0..m_max).map(|k| format!("u_l{k}")));
        header.extend((0..m_max).map(|k| format!("u_cert{k}")));
        header.extend((0..p_max).map(|k| format!("w{k}")));
        header.extend(["beta", "alpha", "status", "stage_cost", "solve_ms"].map(String::from));
        out.write_record(&header)?;
        let pad = |vals: Vec<f64>, len: usize| -> Vec<String> {
            let mut v: Vec<String> = vals.iter().map(|x| format!("{x:.12e}")).collect();
            v.resize(len, String::new());
            v
        };
        let mut w_off = 0;
        let w_offsets: Vec<usize> = model
            .subsystems()
            .iter()
            .map(|s| {
                let o = w_off;
                w_off += s.disturbance_dim();
                o
            })
            .collect();
        for s in &self.steps {
            for i in 0..model.num_subsystems() {
                let (xo, n) = (model.state_offset(i), model.state_dim(i));
                let (uo, m) = (model.input_offset(i), model.input_dim(i));
                let p = model.subsystem(i).disturbance_dim();
                let mut rec = vec![s.t.to_string(), i.to_string()];
                rec.extend(pad(s.x[xo..xo + n].to_vec(), n_max));
                rec.extend(pad(s.u_l[uo..uo + m].to_vec(), m_max));
                rec.extend(pad(s.u_cert[uo..uo + m].to_vec(), m_max));
                rec.extend(pad(s.w[w_offsets[i]..w_offsets[i] + p].to_vec(), p_max));
                rec.push(s.beta.get(i).map_or(String::new(), |b| format!("{b:.12e}")));
                rec.push(s.alpha.get(i).map_or(String::new(), |a| format!("{a:.12e}")));
                rec.push(s.status.to_string());
                rec.push(format!("{:.12e}", s.stage_costs[i]));
                rec.push(format!("{:.6}", s.solve_ms));
                out.write_record(&rec)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Counts state rows `Hx ≤ h` and input rows `Ou ≤ o` that fail by more
/// than the membership slack.
pub fn count_violations(model: &NetworkModel, x: &DVector<f64>, u: Option<&DVector<f64>>) -> (usize, usize) {
    let (h, hh) = model.global_state_constraints();
    let sx = (h * x - hh).iter().filter(|&&r| r > MEMBERSHIP_SLACK).count();
    let su = u.map_or(0, |u| {
        let (o, oo) = model.global_input_constraints();
        (o * u - oo).iter().filter(|&&r| r > MEMBERSHIP_SLACK).count()
    });
    (sx, su)
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub steps: usize,
    pub seed: u64,
    pub cert: CertSettings,
    pub boundary_disturbances: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            seed: 0,
            cert: CertSettings::default(),
            boundary_disturbances: false,
        }
    }
}

/// Closed loop from `x0` with disturbances drawn from `seed`.
pub fn simulate(
    model: &NetworkModel,
    artifacts: &Artifacts,
    policy: &mut dyn Policy,
    controller: Controller,
    x0: &DVector<f64>,
    config: &SimConfig,
    backend: Option<&dyn Backend>,
) -> Result<SimTrace> {
    let central = Centralized {
        settings: config.cert.solver.clone(),
    };
    let backend = backend.unwrap_or(&central);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut session = match controller {
        Controller::Raw => None,
        _ => Some(init_session(model, artifacts, x0, config.cert.clone())?),
    };
    let mut x = x0.clone();
    let mut steps = Vec::with_capacity(config.steps);
    let (mut state_violations, mut input_violations) = (count_violations(model, &x, None).0, 0);
    let mut total_cost = 0.0;
    for t in 0..config.steps {
        let u_l = policy.propose(t, &x)?;
        let policy_time = policy.last_solve_time();
        let w = sample_global_disturbance(model, &mut rng, config.boundary_disturbances);
        let (beta, alpha) = session
            .as_ref()
            .map_or((Vec::new(), Vec::new()), |s| (s.beta.clone(), s.alpha.clone()));
        let result = match &session {
            None => None,
            Some(session) => {
                let request = CertRequest {
                    x: x.clone(),
                    u_l: u_l.clone(),
                };
                Some(if controller == Controller::Rdmpc {
                    match rdmpc_step(model, artifacts, session, &x) {
                        Ok(r) => r,
                        Err(Error::Infeasible | Error::Solver(_)) => {
                            fallback(model, artifacts, session, &request)?
                        }
                        Err(e) => return Err(e),
                    }
                } else {
                    certify_or_fallback(model, artifacts, session, &request, backend)?
                })
            }
        };
        let (u, status, solve_time) = match &result {
            None => (u_l.clone(), StepStatus::Unfiltered, 0.0),
            Some(r) => (r.u_cert.clone(), r.status.into(), r.solve_time),
        };
        let next = model.step_truth(&x, &u, &w)?;
        if let (Some(session), Some(result)) = (&mut session, &result) {
            advance_session(model, artifacts, session, &next, result)?;
        }
        let costs = stage_costs(model, &x, &u);
        total_cost += costs.iter().sum::<f64>();
        input_violations += count_violations(model, &x, Some(&u)).1;
        steps.push(StepRecord {
            t,
            x: x.as_slice().to_vec(),
            u_l: u_l.as_slice().to_vec(),
            u_cert: u.as_slice().to_vec(),
            w: w.as_slice().to_vec(),
            beta,
            alpha,
            status,
            stage_costs: costs,
            solve_ms: 1e3 * (solve_time + policy_time),
        });
        x = next;
        state_violations += count_violations(model, &x, None).0;
    }
    Ok(SimTrace {
        controller,
        policy: policy.name().to_string(),
        seed: config.seed,
        horizon: config.cert.horizon,
        alpha_bar: artifacts.terminal.alpha_bar,
        steps,
        final_state: x.as_slice().to_vec(),
        state_violations,
        input_violations,
        total_cost,
    })
}

// ---------------------------------------------------------------------------
// Scenarios and comparison

/// Initial state of the constraint-violation scenario on the chain: the
/// second mass starts behind its tight upper position bound and moves
/// toward it, every other mass rests at a seed-dependent position.
pub fn approach_scenario(model: &NetworkModel, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut x = DVector::zeros(model.total_state_dim());
    for i in 0..model.num_subsystems() {
        let o = model.state_offset(i);
        x[o] = rng.gen_range(-0.3..0.3);
    }
    if model.num_subsystems() > 1 {
        let o = model.state_offset(1);
        x[o] = -0.3;
        x[o + 1] = 0.7;
    }
    x
}

/// Positions uniform in `scale` times each subsystem's position interval,
/// velocities zero. The position is the first state of every subsystem.
pub fn random_initial_positions<R: Rng + ?Sized>(model: &NetworkModel, rng: &mut R, scale: f64) -> DVector<f64> {
    let mut x = DVector::zeros(model.total_state_dim());
    for i in 0..model.num_subsystems() {
        let sub = model.subsystem(i);
        let own = model.neighborhood_offset(i, i).expect("i ∈ N_i");
        // interval of the first own coordinate from the axis-aligned rows
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        let rows = sub.state_constraints.rows();
        for r in 0..rows.nrows() {
            let c = rows[(r, own)];
            let others = rows.row(r).iter().enumerate().any(|(k, &v)| k != own && v != 0.0);
            if others || c == 0.0 {
                continue;
            }
            let bound = sub.state_constraints.offsets()[r] / c;
            if c > 0.0 {
                hi = hi.min(bound);
            } else {
                lo = lo.max(bound);
            }
        }
        let (lo, hi) = (lo.max(-1e3) * scale, hi.min(1e3) * scale);
        x[model.state_offset(i)] = rng.gen_range(lo..=hi);
    }
    x
}

#[derive(Clone, Debug)]
pub struct CompareConfig {
    pub runs: usize,
    pub steps: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Fraction of the position box used for initial conditions.
    pub position_scale: f64,
    pub linear: LqrWeights,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            runs: 20,
            steps: 20,
            horizon: 10,
            seed: 0,
            position_scale: 0.6,
            linear: LqrWeights::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |p: f64| -> f64 {
            if v.is_empty() {
                return f64::NAN;
            }
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Self {
            min: at(0.0),
            q1: at(0.25),
            median: at(0.5),
            q3: at(0.75),
            max: at(1.0),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub costs: Vec<f64>,
    /// Total solver milliseconds per run.
    pub solve_ms: Vec<f64>,
    pub cost: Quartiles,
    pub solve_time: Quartiles,
    pub state_violations: usize,
    pub input_violations: usize,
    pub fallbacks: usize,
}

impl VariantSummary {
    fn from_traces(name: &str, traces: &[SimTrace]) -> Self {
        let costs: Vec<f64> = traces.iter().map(|t| t.total_cost).collect();
        let solve_ms: Vec<f64> = traces.iter().map(SimTrace::total_solve_ms).collect();
        Self {
            name: name.to_string(),
            cost: Quartiles::of(&costs),
            solve_time: Quartiles::of(&solve_ms),
            costs,
            solve_ms,
            state_violations: traces.iter().map(|t| t.state_violations).sum(),
            input_violations: traces.iter().map(|t| t.input_violations).sum(),
            fallbacks: traces
                .iter()
                .flat_map(|t| t.statuses())
                .filter(|&s| s == StepStatus::Fallback)
                .count(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareSummary {
    pub runs: usize,
    pub steps: usize,
    pub horizon: usize,
    pub seed: u64,
    pub initial_states: Vec<Vec<f64>>,
    /// DMPSC 1, DMPSC 2 and RDMPC in that order.
    pub variants: Vec<VariantSummary>,
}

impl CompareSummary {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.name == name)
    }
}

pub const DMPSC_LINEAR: &str = "dmpsc-linear";
pub const DMPSC_NOMINAL: &str = "dmpsc-nominal";
pub const RDMPC: &str = "rdmpc";

/// Runs the linear policy and the nominal MPC policy through the certifier
/// and the robust tube MPC baseline from the same initial states and
/// disturbance seeds.
pub fn compare_controllers(
    model: &NetworkModel,
    artifacts: &Artifacts,
    config: &CompareConfig,
) -> Result<CompareSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut initial = Vec::with_capacity(config.runs);
    let mut attempts = 0;
    while initial.len() < config.runs {
        attempts += 1;
        if attempts > 100 * config.runs.max(1) {
            return Err(Error::OutsideSafeSet);
        }
        let x0 = random_initial_positions(model, &mut rng, config.position_scale);
        if crate::certifier::in_safe_set(model, artifacts, &x0, config.horizon)? {
            initial.push(x0);
        }
    }
    let linear = structured_lqr_gain(model, &config.linear)?;
    let cert = CertSettings::with_horizon(config.horizon);
    let runs: Vec<Result<[SimTrace; 3]>> = initial
        .par_iter()
        .enumerate()
        .map(|(r, x0)| {
            let sim = SimConfig {
                steps: config.steps,
                seed: config.seed.wrapping_add(r as u64 + 1),
                cert: cert.clone(),
                boundary_disturbances: false,
            };
            let mut lin = LinearPolicy { gain: linear.clone() };
            let a = simulate(model, artifacts, &mut lin, Controller::Certified, x0, &sim, None)?;
            let mut nominal = NominalDmpc::new(model, config.horizon)?;
            let b = simulate(model, artifacts, &mut nominal, Controller::Certified, x0, &sim, None)?;
            let mut zero = ZeroPolicy {
                inputs: model.total_input_dim(),
            };
            let c = simulate(model, artifacts, &mut zero, Controller::Rdmpc, x0, &sim, None)?;
            Ok([a, b, c])
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let pick = |k: usize| -> Vec<SimTrace> { runs.iter().map(|r| r[k].clone()).collect() };
    Ok(CompareSummary {
        runs: config.runs,
        steps: config.steps,
        horizon: config.horizon,
        seed: config.seed,
        initial_states: initial.iter().map(|x| x.as_slice().to_vec()).collect(),
        variants: vec![
            VariantSummary::from_traces(DMPSC_LINEAR, &pick(0)),
            VariantSummary::from_traces(DMPSC_NOMINAL, &pick(1)),
            VariantSummary::from_traces(RDMPC, &pick(2)),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{build_chain_benchmark, ChainParams};

    fn chain(masses: usize) -> NetworkModel {
        build_chain_benchmark(&ChainParams {
            masses,
            position_override: None,
            ..ChainParams::benchmark()
        })
        .unwrap()
    }

    #[test]
    fn stage_cost_values() {
        let zero = DVector::zeros(2);
        assert_eq!(stage_cost(&zero, &DVector::zeros(1)), 0.0);
        assert_eq!(stage_cost(&DVector::from_vec(vec![1.0, 0.0]), &DVector::zeros(1)), 0.5);
        assert_eq!(stage_cost(&zero, &DVector::from_element(1, 1.0)), 1.0);
    }

    #[test]
    fn zero_level_disturbance_is_zero() {
        let set = Ellipsoid::new(DMatrix::identity(2, 2), 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(sample_disturbance(&set, &mut rng, false), DVector::zeros(2));
        }
    }

    #[test]
    fn disturbance_samples_stay_in_set_and_center() {
        let set = Ellipsoid::new(DMatrix::identity(2, 2), 1.1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let count = 100_000;
        let mut mean = DVector::zeros(2);
        let mut max: f64 = 0.0;
        for _ in 0..count {
            let w = sample_disturbance(&set, &mut rng, false);
            max = max.max(w.norm_squared());
            mean += w;
        }
        mean /= count as f64;
        assert!(max <= 1.1e-3 * (1.0 + 1e-12));
        // each coordinate of a uniform disk of radius r has variance r²/4
        let sigma = (1.1e-3 / 4.0 / count as f64).sqrt();
        assert!(mean.amax() <= 3.0 * sigma, "{mean}");
    }

    #[test]
    fn linear_gain_respects_neighborhoods() {
        let model = chain(5);
        let k = structured_lqr_gain(&model, &LqrWeights::default()).unwrap();
        for i in 0..5usize {
            for j in 0..5 {
                if i.abs_diff(j) > 1 {
                    for c in 0..2 {
                        assert_eq!(k[(i, 2 * j + c)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_policy_is_zero() {
        let model = chain(3);
        let mut p = make_policy(&PolicySpec::Zero, &model).unwrap();
        assert_eq!(p.propose(0, &DVector::zeros(6)).unwrap(), DVector::zeros(3));
    }

    #[test]
    fn nominal_mpc_matches_riccati_deep_inside() {
        let model = chain(3);
        let mpc = NominalDmpc::new(&model, 10).unwrap();
        let x = DVector::from_vec(vec![0.05, 0.0, -0.03, 0.01, 0.02, 0.0]);
        let (u, _) = mpc.solve(&x).unwrap().unwrap();
        let lq = finite_horizon_lq_input(&model, 10, &x).unwrap();
        assert!((&u - &lq).amax() <= 1e-6, "{u} vs {lq}");
    }

    #[test]
    fn policy_names_parse() {
        assert_eq!("zero".parse::<PolicySpec>().unwrap(), PolicySpec::Zero);
        assert_eq!("linear".parse::<PolicySpec>().unwrap(), PolicySpec::linear());
        assert!(matches!("external:u.json".parse::<PolicySpec>().unwrap(), PolicySpec::External(_)));
        assert!("bogus".parse::<PolicySpec>().is_err());
        assert_eq!("rdmpc".parse::<Controller>().unwrap(), Controller::Rdmpc);
    }

    #[test]
    fn quartiles_of_known_values() {
        let q = Quartiles::of(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!((q.min, q.q1, q.median, q.q3, q.max), (1.0, 2.0, 3.0, 4.0, 5.0));
    }
}
