//! Neighbor-to-neighbor solution of certification programs.
//!
//! The program is split by owner: each agent keeps the constraints and
//! objective terms it owns, plus local copies of every neighbor variable
//! those touch. Copies are reconciled by consensus ADMM in synchronous
//! rounds. After each local solve a holder sends `x + u` for the copies to
//! the variable's owner, the owner averages and sends the consensus value
//! back. All traffic goes through a [`MessageBus`] that only has channels
//! along edges of the neighborhood graph.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write as _;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certifier::{
    build_program, Artifacts, Backend, CertProgram, CertRequest, CertSession, Centralized,
    ProgramMode,
};
use crate::conic::{Program, Solution, SolveStatus, SolverSettings, VarId};
use crate::error::{Error, Result};
use crate::netmodel::NetworkModel;

// ---------------------------------------------------------------------------
// Partition

/// Local part of a program held by one agent.
#[derive(Clone, Debug)]
pub struct Subproblem {
    pub agent: usize,
    /// Global ids of the local variables, sorted. Local id `l` is `vars[l]`.
    pub vars: Vec<VarId>,
    /// Whether a local variable is also held by another agent.
    pub shared: Vec<bool>,
    /// Constraints and objective terms in local ids.
    pub program: Program,
    /// Indices of the original constraints assigned here.
    pub constraints: Vec<usize>,
}

impl Subproblem {
    pub fn local_id(&self, global: VarId) -> Option<usize> {
        self.vars.binary_search(&global).ok()
    }

    /// Global ids owned by `other` that this agent keeps a copy of.
    pub fn copies_of(&self, program: &Program, other: usize) -> Vec<VarId> {
        self.vars
            .iter()
            .copied()
            .filter(|&g| program.vars[g].owner == Some(other))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Partition {
    pub agents: Vec<Subproblem>,
    /// `(owner, holder) → variables of owner copied at holder`.
    pub edges: BTreeMap<(usize, usize), Vec<VarId>>,
    /// Owner of every global variable.
    pub owners: Vec<usize>,
}

impl Partition {
    /// Undirected pairs that carry at least one copy.
    pub fn links(&self) -> BTreeSet<(usize, usize)> {
        self.edges.keys().map(|&(a, b)| (a.min(b), a.max(b))).collect()
    }

    /// Constraint keys of all subproblems mapped back to global ids.
    pub fn reassembled_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = self
            .agents
            .iter()
            .flat_map(|a| {
                let map = |l: VarId| a.vars[l];
                a.program.constraints.iter().map(move |c| c.canonical_key(&map))
            })
            .collect();
        keys.sort();
        keys
    }

    /// Whether the subproblems together hold exactly the constraints and
    /// objective terms of `program`.
    pub fn reassembles(&self, program: &Program) -> bool {
        let mut original: Vec<String> = program
            .constraints
            .iter()
            .map(|c| c.canonical_key(&|v| v))
            .collect();
        original.sort();
        if original != self.reassembled_keys() {
            return false;
        }
        let mut quad: Vec<(VarId, VarId, u64)> = program.quad.iter().map(|&(a, b, c)| (a, b, c.to_bits())).collect();
        let mut linear: Vec<(VarId, u64)> = program.linear.iter().map(|&(v, c)| (v, c.to_bits())).collect();
        let mut q2 = Vec::new();
        let mut l2 = Vec::new();
        for a in &self.agents {
            q2.extend(a.program.quad.iter().map(|&(x, y, c)| (a.vars[x], a.vars[y], c.to_bits())));
            l2.extend(a.program.linear.iter().map(|&(x, c)| (a.vars[x], c.to_bits())));
        }
        quad.sort_unstable();
        q2.sort_unstable();
        linear.sort_unstable();
        l2.sort_unstable();
        quad == q2 && linear == l2
    }
}

fn adjacent(model: &NetworkModel, a: usize, b: usize) -> bool {
    a == b || model.neighborhood(a).contains(&b) || model.neighborhood(b).contains(&a)
}

/// Splits `program` by owner. Fails when something has no owner or an
/// agent would need a variable of a non-neighbor.
pub fn partition_program(program: &Program, model: &NetworkModel) -> Result<Partition> {
    let count = model.num_subsystems();
    let owners: Vec<usize> = program
        .vars
        .iter()
        .enumerate()
        .map(|(g, info)| match info.owner {
            Some(o) if o < count => Ok(o),
            Some(o) => Err(Error::Partition(format!("variable {} has unknown owner {o}", info.name))),
            None => Err(Error::Partition(format!("variable {g} ({}) has no owner", info.name))),
        })
        .collect::<Result<_>>()?;

    let mut held: Vec<BTreeSet<VarId>> = vec![BTreeSet::new(); count];
    for (g, &o) in owners.iter().enumerate() {
        held[o].insert(g);
    }
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (ci, con) in program.constraints.iter().enumerate() {
        let owner = con
            .owner
            .ok_or_else(|| Error::Partition(format!("constraint {ci} ({}) has no owner", con.label)))?;
        if owner >= count {
            return Err(Error::Partition(format!("constraint {} has unknown owner {owner}", con.label)));
        }
        for row in &con.rows {
            for v in row.vars() {
                held[owner].insert(v);
            }
        }
        assigned[owner].push(ci);
    }
    let mut quad: Vec<Vec<(VarId, VarId, f64)>> = vec![Vec::new(); count];
    for &(a, b, c) in &program.quad {
        let o = owners[a];
        held[o].insert(b);
        quad[o].push((a, b, c));
    }
    let mut linear: Vec<Vec<(VarId, f64)>> = vec![Vec::new(); count];
    for &(v, c) in &program.linear {
        linear[owners[v]].push((v, c));
    }

    let mut edges: BTreeMap<(usize, usize), Vec<VarId>> = BTreeMap::new();
    let mut holders = vec![0usize; owners.len()];
    for (i, vars) in held.iter().enumerate() {
        for &g in vars {
            holders[g] += 1;
            let o = owners[g];
            if o == i {
                continue;
            }
            if !adjacent(model, i, o) {
                return Err(Error::Partition(format!(
                    "agent {i} needs {} owned by non-neighbor {o}",
                    program.vars[g].name
                )));
            }
            edges.entry((o, i)).or_default().push(g);
        }
    }

    let agents = held
        .into_iter()
        .enumerate()
        .map(|(i, set)| {
            let vars: Vec<VarId> = set.into_iter().collect();
            let local = |g: VarId| vars.binary_search(&g).expect("held variable");
            let mut sub = Program::new();
            for &g in &vars {
                sub.add_var(program.vars[g].name.clone(), Some(owners[g]));
            }
            for &ci in &assigned[i] {
                let con = &program.constraints[ci];
                let mut c = con.clone();
                c.rows = con.rows.iter().map(|r| r.remap(&local)).collect();
                sub.push(c);
            }
            sub.quad = quad[i].iter().map(|&(a, b, c)| (local(a), local(b), c)).collect();
            sub.linear = linear[i].iter().map(|&(v, c)| (local(v), c)).collect();
            if i == 0 {
                sub.constant = program.constant;
            }
            let shared = vars.iter().map(|&g| holders[g] > 1).collect();
            Subproblem {
                agent: i,
                vars,
                shared,
                program: sub,
                constraints: assigned[i].clone(),
            }
        })
        .collect();
    Ok(Partition { agents, edges, owners })
}

// ---------------------------------------------------------------------------
// Message bus

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub from: usize,
    pub to: usize,
    pub iteration: usize,
    /// What the payload holds, e.g. `copies` or `consensus`.
    pub block: String,
    pub payload: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub from: usize,
    pub to: usize,
    pub block: String,
    pub len: usize,
}

/// Ordered reliable channels, one per direction of each graph edge.
#[derive(Debug, Default)]
pub struct MessageBus {
    channels: BTreeMap<(usize, usize), VecDeque<Message>>,
    log: Vec<LogEntry>,
}

impl MessageBus {
    /// Channels along every edge of the neighborhood graph.
    pub fn for_model(model: &NetworkModel) -> Self {
        let mut bus = Self::default();
        for i in 0..model.num_subsystems() {
            for &j in model.neighborhood(i) {
                if i != j {
                    bus.channels.entry((i, j)).or_default();
                    bus.channels.entry((j, i)).or_default();
                }
            }
        }
        bus
    }

    pub fn has_channel(&self, from: usize, to: usize) -> bool {
        self.channels.contains_key(&(from, to))
    }

    pub fn send(&mut self, message: Message) -> Result<()> {
        let queue = self.channels.get_mut(&(message.from, message.to)).ok_or_else(|| {
            Error::Communication(format!("no channel from {} to {}", message.from, message.to))
        })?;
        self.log.push(LogEntry {
            iteration: message.iteration,
            from: message.from,
            to: message.to,
            block: message.block.clone(),
            len: message.payload.len(),
        });
        queue.push_back(message);
        Ok(())
    }

    /// Removes and returns everything queued for `to`, by sender then in
    /// sending order.
    pub fn receive(&mut self, to: usize) -> Vec<Message> {
        let mut out = Vec::new();
        for ((_, dest), queue) in self.channels.iter_mut() {
            if *dest == to {
                out.extend(queue.drain(..));
            }
        }
        out
    }

    pub fn pending(&self) -> usize {
        self.channels.values().map(VecDeque::len).sum()
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    /// Messages sent between `a` and `b` in either direction.
    pub fn messages_between(&self, a: usize, b: usize) -> usize {
        self.log
            .iter()
            .filter(|e| (e.from == a && e.to == b) || (e.from == b && e.to == a))
            .count()
    }
}

// ---------------------------------------------------------------------------
// Consensus ADMM

/// Rounds between two `ρ` adjustments under residual balancing.
const BALANCE_EVERY: usize = 10;

#[derive(Clone, Debug)]
pub struct ConsensusParams {
    pub rho: f64,
    pub max_iter: usize,
    /// Bound on copy disagreement and on the change of consensus values,
    /// both in the max norm.
    pub tol: f64,
    /// Rescale `ρ` when one residual dominates the other by a factor of ten.
    pub residual_balancing: bool,
    /// Solve the agents' subproblems on the rayon pool.
    pub parallel: bool,
    pub solver: SolverSettings,
}

impl Default for ConsensusParams {
    fn default() -> Self {
        Self {
            rho: 1.0,
            max_iter: 2000,
            tol: 1e-5,
            residual_balancing: true,
            parallel: true,
            solver: SolverSettings::default(),
        }
    }
}

/// Per-agent iterate.
#[derive(Clone, Debug)]
pub struct AgentState {
    pub agent: usize,
    /// Local values, indexed like the subproblem's variables.
    pub x: Vec<f64>,
    /// Scaled duals of the copy constraints `x = z`.
    pub dual: Vec<f64>,
    /// Latest consensus values received for the local variables.
    pub consensus: Vec<f64>,
    pub iteration: usize,
}

impl AgentState {
    fn new(sub: &Subproblem) -> Self {
        let n = sub.vars.len();
        Self {
            agent: sub.agent,
            x: vec![0.0; n],
            dual: vec![0.0; n],
            consensus: vec![0.0; n],
            iteration: 0,
        }
    }

    /// Largest disagreement between a shared local value and its
    /// consensus value.
    pub fn disagreement(&self, sub: &Subproblem) -> f64 {
        sub.shared
            .iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(l, _)| (self.x[l] - self.consensus[l]).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub messages_sent: usize,
    pub rho: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Telemetry {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    pub infeasible: bool,
    pub total_messages: usize,
}

impl Telemetry {
    pub fn write_jsonl(&self, mut out: impl std::io::Write) -> Result<()> {
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConsensusOutcome {
    /// Global solution built from each owner's local values.
    pub solution: Solution,
    pub telemetry: Telemetry,
    pub agents: Vec<AgentState>,
}

enum Local {
    Solved(Vec<f64>, f64),
    Infeasible,
}

fn solve_local(sub: &Subproblem, state: &AgentState, rho: f64, settings: &SolverSettings) -> Result<Local> {
    let mut prog = sub.program.clone();
    for (l, &shared) in sub.shared.iter().enumerate() {
        if shared {
            // (ρ/2)(x − z + u)²
            let c = state.consensus[l] - state.dual[l];
            prog.quad.push((l, l, 0.5 * rho));
            prog.linear.push((l, -rho * c));
            prog.constant += 0.5 * rho * c * c;
        }
    }
    let sol = prog.solve(settings)?;
    Ok(match sol.status {
        SolveStatus::Infeasible => Local::Infeasible,
        _ => Local::Solved(sol.x, sol.solve_time),
    })
}

/// Runs consensus ADMM on the partition. Returns `NotConverged` with the
/// last residuals when `max_iter` rounds do not reach the tolerance. A
/// subproblem that is infeasible on its own makes the whole program
/// infeasible, which is reported through the solution status.
pub fn run_consensus(
    program: &Program,
    partition: &Partition,
    bus: &mut MessageBus,
    params: &ConsensusParams,
) -> Result<ConsensusOutcome> {
    let count = partition.agents.len();
    let mut states: Vec<AgentState> = partition.agents.iter().map(AgentState::new).collect();
    let mut rho = params.rho;
    let mut records = Vec::new();
    let mut solve_time = 0.0;
    let sent_before = bus.log().len();
    let (mut primal, mut dual) = (f64::INFINITY, f64::INFINITY);

    for iteration in 1..=params.max_iter {
        // local solves
        let locals: Vec<Result<Local>> = if params.parallel {
            partition
                .agents
                .par_iter()
                .zip(states.par_iter())
                .map(|(sub, st)| solve_local(sub, st, rho, &params.solver))
                .collect()
        } else {
            partition
                .agents
                .iter()
                .zip(&states)
                .map(|(sub, st)| solve_local(sub, st, rho, &params.solver))
                .collect()
        };
        let locals = locals.into_iter().collect::<Result<Vec<Local>>>()?;
        let mut round_time: f64 = 0.0;
        if locals.iter().any(|l| matches!(l, Local::Infeasible)) {
            let total = bus.log().len() - sent_before;
            return Ok(infeasible_outcome(program, records, total, states, iteration, solve_time));
        }
        for (st, local) in states.iter_mut().zip(locals) {
            if let Local::Solved(x, t) = local {
                st.x = x;
                round_time = round_time.max(t);
            }
            st.iteration = iteration;
        }
        // Rounds are synchronous, so the slowest agent sets the pace.
        solve_time += round_time;
        let sent_at_start = bus.log().len();

        // holders report x + u of their copies to the owners
        for (sub, st) in partition.agents.iter().zip(&states) {
            for owner in (0..count).filter(|&o| o != sub.agent) {
                let Some(vars) = partition.edges.get(&(owner, sub.agent)) else {
                    continue;
                };
                let payload = vars
                    .iter()
                    .map(|&g| {
                        let l = sub.local_id(g).expect("copy is held");
                        st.x[l] + st.dual[l]
                    })
                    .collect();
                bus.send(Message {
                    from: sub.agent,
                    to: owner,
                    iteration,
                    block: "copies".into(),
                    payload,
                })?;
            }
        }
        // owners average and broadcast
        let inboxes: Vec<Vec<Message>> = (0..count).map(|o| bus.receive(o)).collect();
        let mut new_consensus: Vec<Vec<f64>> = states.iter().map(|s| s.consensus.clone()).collect();
        let mut change: f64 = 0.0;
        for owner in 0..count {
            let sub = &partition.agents[owner];
            let st = &states[owner];
            let mut sum: BTreeMap<VarId, (f64, usize)> = BTreeMap::new();
            for (l, &g) in sub.vars.iter().enumerate() {
                if sub.shared[l] && partition.owners[g] == owner {
                    sum.insert(g, (st.x[l] + st.dual[l], 1));
                }
            }
            for msg in &inboxes[owner] {
                let vars = &partition.edges[&(owner, msg.from)];
                if msg.payload.len() != vars.len() || msg.iteration != iteration || msg.block != "copies" {
                    return Err(Error::Communication(format!(
                        "malformed message from {} to {owner}",
                        msg.from
                    )));
                }
                for (&g, &val) in vars.iter().zip(&msg.payload) {
                    let e = sum.get_mut(&g).ok_or_else(|| {
                        Error::Communication(format!("copy of unshared variable {g}"))
                    })?;
                    e.0 += val;
                    e.1 += 1;
                }
            }
            let averaged: BTreeMap<VarId, f64> = sum.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect();
            for (&g, &z) in &averaged {
                let l = sub.local_id(g).expect("own variable");
                change = change.max((z - states[owner].consensus[l]).abs());
                new_consensus[owner][l] = z;
            }
            for holder in (0..count).filter(|&h| h != owner) {
                let Some(vars) = partition.edges.get(&(owner, holder)) else {
                    continue;
                };
                bus.send(Message {
                    from: owner,
                    to: holder,
                    iteration,
                    block: "consensus".into(),
                    payload: vars.iter().map(|g| averaged[g]).collect(),
                })?;
            }
        }
        for holder in 0..count {
            let sub = &partition.agents[holder];
            for msg in bus.receive(holder) {
                let vars = &partition.edges[&(msg.from, holder)];
                for (&g, &z) in vars.iter().zip(&msg.payload) {
                    new_consensus[holder][sub.local_id(g).expect("copy is held")] = z;
                }
            }
        }
        if bus.pending() != 0 {
            return Err(Error::Communication("undelivered messages after a round".into()));
        }

        // dual update and residuals
        primal = 0.0;
        for ((sub, st), z) in partition.agents.iter().zip(states.iter_mut()).zip(new_consensus) {
            st.consensus = z;
            for l in 0..sub.vars.len() {
                if sub.shared[l] {
                    let r = st.x[l] - st.consensus[l];
                    st.dual[l] += r;
                    primal = primal.max(r.abs());
                }
            }
        }
        dual = rho * change;
        records.push(IterationRecord {
            iteration,
            primal_residual: primal,
            dual_residual: dual,
            messages_sent: bus.log().len() - sent_at_start,
            rho,
        });
        if primal <= params.tol && dual <= params.tol {
            let mut x = vec![0.0; program.num_vars()];
            for (g, &o) in partition.owners.iter().enumerate() {
                let sub = &partition.agents[o];
                x[g] = states[o].x[sub.local_id(g).expect("own variable")];
            }
            let telemetry = Telemetry {
                records,
                converged: true,
                infeasible: false,
                total_messages: bus.log().len() - sent_before,
            };
            let solution = Solution {
                objective: program.objective_value(&x),
                x,
                status: SolveStatus::Solved,
                iterations: iteration as u32,
                solve_time,
            };
            return Ok(ConsensusOutcome {
                solution,
                telemetry,
                agents: states,
            });
        }
        if params.residual_balancing && iteration % BALANCE_EVERY == 0 && iteration <= params.max_iter / 2 {
            let scale = if primal > 10.0 * dual {
                2.0
            } else if dual > 10.0 * primal {
                0.5
            } else {
                1.0
            };
            if scale != 1.0 {
                rho *= scale;
                for st in &mut states {
                    for u in &mut st.dual {
                        *u /= scale;
                    }
                }
            }
        }
    }
    Err(Error::NotConverged {
        iterations: params.max_iter,
        primal,
        dual,
    })
}

fn infeasible_outcome(
    program: &Program,
    records: Vec<IterationRecord>,
    total_messages: usize,
    agents: Vec<AgentState>,
    iteration: usize,
    solve_time: f64,
) -> ConsensusOutcome {
    ConsensusOutcome {
        solution: Solution {
            x: vec![0.0; program.num_vars()],
            status: SolveStatus::Infeasible,
            objective: f64::NAN,
            iterations: iteration as u32,
            solve_time,
        },
        telemetry: Telemetry {
            records,
            converged: false,
            infeasible: true,
            total_messages,
        },
        agents,
    }
}

/// Partitions and solves a certification program over a fresh bus.
pub fn solve_distributed(
    model: &NetworkModel,
    program: &Program,
    params: &ConsensusParams,
) -> Result<(ConsensusOutcome, MessageBus)> {
    let partition = partition_program(program, model)?;
    let mut bus = MessageBus::for_model(model);
    let outcome = run_consensus(program, &partition, &mut bus, params)?;
    Ok((outcome, bus))
}

/// How one call to the distributed backend ended.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackendReport {
    pub telemetry: Option<Telemetry>,
    pub fell_back: bool,
    pub iterations: usize,
    pub primal: f64,
    pub dual: f64,
}

/// Certification backend running consensus ADMM. Unconverged solves are
/// redone centrally when `fallback` is set.
#[derive(Debug)]
pub struct Distributed {
    pub params: ConsensusParams,
    pub fallback: bool,
    reports: Mutex<Vec<BackendReport>>,
}

impl Distributed {
    pub fn new(params: ConsensusParams) -> Self {
        Self {
            params,
            fallback: true,
            reports: Mutex::new(Vec::new()),
        }
    }

    pub fn reports(&self) -> Vec<BackendReport> {
        self.reports.lock().expect("report log").clone()
    }

    fn record(&self, report: BackendReport) {
        self.reports.lock().expect("report log").push(report);
    }
}

impl Backend for Distributed {
    fn solve(&self, model: &NetworkModel, program: &CertProgram) -> Result<Solution> {
        match solve_distributed(model, &program.program, &self.params) {
            Ok((outcome, _)) => {
                let t = &outcome.telemetry;
                let last = t.records.last();
                self.record(BackendReport {
                    iterations: t.records.len(),
                    primal: last.map_or(0.0, |r| r.primal_residual),
                    dual: last.map_or(0.0, |r| r.dual_residual),
                    telemetry: Some(outcome.telemetry.clone()),
                    fell_back: false,
                });
                Ok(outcome.solution)
            }
            Err(Error::NotConverged {
                iterations,
                primal,
                dual,
            }) if self.fallback => {
                self.record(BackendReport {
                    telemetry: None,
                    fell_back: true,
                    iterations,
                    primal,
                    dual,
                });
                let central = Centralized {
                    settings: self.params.solver.clone(),
                };
                central.solve(model, program)
            }
            Err(e) => Err(e),
        }
    }
}

// ---------------------------------------------------------------------------
// Comparison with the centralized solver

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeStatus {
    Solved,
    Infeasible,
    NotConverged,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub centralized: OutcomeStatus,
    pub distributed: OutcomeStatus,
    /// `‖ũ_d − ũ_c‖ / max(1, ‖ũ_c‖)`.
    pub input_gap: f64,
    /// `|J_d − J_c| / max(1, |J_c|)`.
    pub objective_gap: f64,
    pub iterations: usize,
    pub messages: usize,
    /// Messages between subsystems that are not neighbors.
    pub non_neighbor_messages: usize,
}

/// Solves the same certification request centrally and by consensus.
pub fn compare_with_centralized(
    model: &NetworkModel,
    artifacts: &Artifacts,
    session: &CertSession,
    request: &CertRequest,
    params: &ConsensusParams,
) -> Result<ComparisonReport> {
    let cp = build_program(model, artifacts, session, request, ProgramMode::Certify)?;
    let central = cp.program.without_implied().solve(&params.solver)?;
    let centralized = match central.status {
        SolveStatus::Infeasible => OutcomeStatus::Infeasible,
        _ => OutcomeStatus::Solved,
    };
    let partition = partition_program(&cp.program, model)?;
    let mut bus = MessageBus::for_model(model);
    let (distributed, dist_sol, iterations) = match run_consensus(&cp.program, &partition, &mut bus, params) {
        Ok(out) => {
            let status = match out.solution.status {
                SolveStatus::Infeasible => OutcomeStatus::Infeasible,
                _ => OutcomeStatus::Solved,
            };
            let iters = out.solution.iterations as usize;
            (status, Some(out.solution), iters)
        }
        Err(Error::NotConverged { iterations, .. }) => (OutcomeStatus::NotConverged, None, iterations),
        Err(e) => return Err(e),
    };
    let (mut input_gap, mut objective_gap) = (0.0, 0.0);
    if let (OutcomeStatus::Solved, OutcomeStatus::Solved, Some(d)) = (centralized, distributed, &dist_sol) {
        let (_, uc, _, _) = cp.extract(model, &central.x);
        let (_, ud, _, _) = cp.extract(model, &d.x);
        input_gap = (&ud - &uc).norm() / uc.norm().max(1.0);
        let (jc, jd) = (cp.distance(&request.u_l, &central.x), cp.distance(&request.u_l, &d.x));
        objective_gap = (jd - jc).abs() / jc.abs().max(1.0);
    }
    let non_neighbor_messages = bus
        .log()
        .iter()
        .filter(|e| !adjacent(model, e.from, e.to))
        .count();
    Ok(ComparisonReport {
        centralized,
        distributed,
        input_gap,
        objective_gap,
        iterations,
        messages: bus.log().len(),
        non_neighbor_messages,
    })
}
