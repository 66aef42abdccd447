//! A small conic modeling layer compiled to Clarabel.
//!
//! Programs are built from affine expressions over scalar decision
//! variables. Every constraint states that a list of affine rows lies in a
//! cone (zero, nonnegative orthant, second-order, or PSD). Constraints and
//! variables carry an optional owner so that programs can later be split
//! across agents.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::{Add, Mul, Neg, Sub};
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

pub type VarId = usize;

/// Largest constraint violation tolerated when the solver stalls.
const STALL_ACCEPT: f64 = 1e-7;

/// `Σ coef·x_var + constant`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Affine {
    pub terms: Vec<(VarId, f64)>,
    pub constant: f64,
}

impl Affine {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(v: VarId) -> Self {
        Self::term(v, 1.0)
    }

    pub fn term(v: VarId, coef: f64) -> Self {
        Self {
            terms: vec![(v, coef)],
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, v: VarId, coef: f64) {
        if coef != 0.0 {
            self.terms.push((v, coef));
        }
    }

    pub fn add_constant(&mut self, c: f64) {
        self.constant += c;
    }

    pub fn add_scaled(&mut self, other: &Affine, s: f64) {
        for &(v, c) in &other.terms {
            self.add_term(v, s * c);
        }
        self.constant += s * other.constant;
    }

    pub fn scaled(&self, s: f64) -> Affine {
        let mut out = Affine::zero();
        out.add_scaled(self, s);
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(v, c)| c * x[v]).sum::<f64>() + self.constant
    }

    /// Merged, sorted terms without zeros.
    pub fn canonical(&self) -> Vec<(VarId, f64)> {
        let mut acc: BTreeMap<VarId, f64> = BTreeMap::new();
        for &(v, c) in &self.terms {
            *acc.entry(v).or_insert(0.0) += c;
        }
        acc.into_iter().filter(|&(_, c)| c != 0.0).collect()
    }

    pub fn vars(&self) -> impl Iterator<Item = VarId> + '_ {
        self.terms.iter().map(|&(v, _)| v)
    }

    pub fn remap(&self, f: &impl Fn(VarId) -> VarId) -> Affine {
        Affine {
            terms: self.terms.iter().map(|&(v, c)| (f(v), c)).collect(),
            constant: self.constant,
        }
    }

    /// `Σ_k coefs[k]·exprs[k]`.
    pub fn combination(coefs: impl IntoIterator<Item = f64>, exprs: &[Affine]) -> Affine {
        let mut out = Affine::zero();
        for (c, e) in coefs.into_iter().zip(exprs) {
            if c != 0.0 {
                out.add_scaled(e, c);
            }
        }
        out
    }
}

impl Add for Affine {
    type Output = Affine;
    fn add(mut self, rhs: Affine) -> Affine {
        self.add_scaled(&rhs, 1.0);
        self
    }
}

impl Sub for Affine {
    type Output = Affine;
    fn sub(mut self, rhs: Affine) -> Affine {
        self.add_scaled(&rhs, -1.0);
        self
    }
}

impl Neg for Affine {
    type Output = Affine;
    fn neg(self) -> Affine {
        self.scaled(-1.0)
    }
}

impl Mul<f64> for Affine {
    type Output = Affine;
    fn mul(self, rhs: f64) -> Affine {
        self.scaled(rhs)
    }
}

/// `M · exprs` for a dense coefficient matrix.
pub fn mat_vec(m: &DMatrix<f64>, exprs: &[Affine]) -> Vec<Affine> {
    assert_eq!(m.ncols(), exprs.len(), "mat_vec dimension mismatch");
    (0..m.nrows())
        .map(|r| Affine::combination((0..m.ncols()).map(|c| m[(r, c)]), exprs))
        .collect()
}

pub fn constants(values: impl IntoIterator<Item = f64>) -> Vec<Affine> {
    values.into_iter().map(Affine::constant).collect()
}

pub fn vars(ids: &[VarId]) -> Vec<Affine> {
    ids.iter().map(|&v| Affine::var(v)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cone {
    Zero,
    NonNeg,
    SecondOrder,
    /// Rows hold the upper triangle of a `dim × dim` symmetric matrix,
    /// column by column, unscaled.
    Psd { dim: usize },
}

#[derive(Clone, Debug)]
pub struct Constraint {
    pub cone: Cone,
    pub rows: Vec<Affine>,
    pub label: String,
    pub owner: Option<usize>,
    /// Redundant given the rest of the program; kept out of structural
    /// comparisons.
    pub implied: bool,
}

impl Constraint {
    fn new(cone: Cone, rows: Vec<Affine>) -> Self {
        Self {
            cone,
            rows,
            label: String::new(),
            owner: None,
            implied: false,
        }
    }

    pub fn zero(rows: Vec<Affine>) -> Self {
        Self::new(Cone::Zero, rows)
    }

    pub fn nonneg(rows: Vec<Affine>) -> Self {
        Self::new(Cone::NonNeg, rows)
    }

    /// `‖tail‖ ≤ head`.
    pub fn soc(head: Affine, tail: Vec<Affine>) -> Self {
        let mut rows = Vec::with_capacity(tail.len() + 1);
        rows.push(head);
        rows.extend(tail);
        Self::new(Cone::SecondOrder, rows)
    }

    /// Symmetric matrix of affine expressions is PSD. Only the upper
    /// triangle of `m` is read.
    pub fn psd(m: &[Vec<Affine>]) -> Self {
        let dim = m.len();
        let mut rows = Vec::with_capacity(dim * (dim + 1) / 2);
        for c in 0..dim {
            for r in 0..=c {
                rows.push(m[r][c].clone());
            }
        }
        Self::new(Cone::Psd { dim }, rows)
    }

    /// `‖F y‖² ≤ t` as a rotated second-order cone.
    pub fn squared_norm_le(factor: &DMatrix<f64>, y: &[Affine], t: Affine) -> Self {
        let fy = mat_vec(factor, y);
        let mut tail: Vec<Affine> = fy.into_iter().map(|e| e * 2.0).collect();
        tail.push(t.clone() - Affine::constant(1.0));
        Self::soc(t + Affine::constant(1.0), tail)
    }

    pub fn labeled(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn owned_by(mut self, owner: usize) -> Self {
        self.owner = Some(owner);
        self
    }

    pub fn mark_implied(mut self) -> Self {
        self.implied = true;
        self
    }

    /// Largest violation of the cone membership at `x`.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let vals: Vec<f64> = self.rows.iter().map(|r| r.eval(x)).collect();
        match self.cone {
            Cone::Zero => vals.iter().fold(0.0, |m, v| m.max(v.abs())),
            Cone::NonNeg => vals.iter().fold(0.0, |m, v| m.max(-v)),
            Cone::SecondOrder => {
                let tail = vals[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
                (tail - vals[0]).max(0.0)
            }
            Cone::Psd { dim } => {
                let mut m = DMatrix::zeros(dim, dim);
                let mut k = 0;
                for c in 0..dim {
                    for r in 0..=c {
                        m[(r, c)] = vals[k];
                        m[(c, r)] = vals[k];
                        k += 1;
                    }
                }
                (-linalg::min_eigenvalue(&m)).max(0.0)
            }
        }
    }

    /// Order-independent textual key used to compare constraint sets.
    pub fn canonical_key(&self, map: &impl Fn(VarId) -> VarId) -> String {
        let mut key = format!("{:?}|", self.cone);
        for row in &self.rows {
            let mut terms: Vec<(VarId, f64)> = row
                .canonical()
                .into_iter()
                .map(|(v, c)| (map(v), c))
                .collect();
            terms.sort_by_key(|t| t.0);
            for (v, c) in terms {
                let _ = write!(key, "{v}:{c:.12e},");
            }
            let _ = write!(key, "c{:.12e};", row.constant);
        }
        key
    }
}

#[derive(Clone, Debug)]
pub struct VarInfo {
    pub name: String,
    pub owner: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct SolverSettings {
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub tol_feas: f64,
    pub max_iter: u32,
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol_gap_abs: 1e-8,
            tol_gap_rel: 1e-8,
            tol_feas: 1e-8,
            max_iter: 200,
            verbose: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Solved,
    /// Converged to reduced accuracy.
    AlmostSolved,
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub x: Vec<f64>,
    pub status: SolveStatus,
    pub objective: f64,
    pub iterations: u32,
    /// Wall-clock seconds spent in solver setup and solve.
    pub solve_time: f64,
}

impl Solution {
    pub fn is_optimal(&self) -> bool {
        matches!(self.status, SolveStatus::Solved | SolveStatus::AlmostSolved)
    }
}

/// Minimize `Σ quad + Σ linear + constant` subject to cone constraints.
#[derive(Clone, Debug, Default)]
pub struct Program {
    pub vars: Vec<VarInfo>,
    /// Terms `c·x_a·x_b`.
    pub quad: Vec<(VarId, VarId, f64)>,
    pub linear: Vec<(VarId, f64)>,
    pub constant: f64,
    pub constraints: Vec<Constraint>,
}

impl Program {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, owner: Option<usize>) -> VarId {
        self.vars.push(VarInfo {
            name: name.into(),
            owner,
        });
        self.vars.len() - 1
    }

    pub fn add_vars(&mut self, prefix: &str, n: usize, owner: Option<usize>) -> Vec<VarId> {
        (0..n)
            .map(|k| self.add_var(format!("{prefix}[{k}]"), owner))
            .collect()
    }

    /// New variable `t` with `0 ≤ t ≤ (Π xs)^{1/k}`, built from a tree of
    /// rotated cones. Missing leaves up to the next power of two are `t`.
    pub fn add_geo_mean(&mut self, prefix: &str, xs: &[Affine], owner: Option<usize>) -> VarId {
        let t = self.add_var(format!("{prefix}.gm"), owner);
        let mut level: Vec<Affine> = xs.to_vec();
        let width = xs.len().max(1).next_power_of_two();
        level.resize(width, Affine::var(t));
        let mut depth = 0;
        while level.len() > 1 {
            let mut next = Vec::with_capacity(level.len() / 2);
            for (k, pair) in level.chunks(2).enumerate() {
                let y = self.add_var(format!("{prefix}.gm{depth}.{k}"), owner);
                // y² ≤ a·b with a, b ≥ 0
                let (a, b) = (pair[0].clone(), pair[1].clone());
                self.push(Constraint::soc(
                    a.clone() + b.clone(),
                    vec![Affine::var(y) * 2.0, a - b],
                ));
                next.push(Affine::var(y));
            }
            level = next;
            depth += 1;
        }
        self.push(Constraint::nonneg(vec![
            level[0].clone() - Affine::var(t),
            Affine::var(t),
        ]));
        t
    }

    /// New variable `t ≤ det(m)^{1/n}` for a symmetric grid `m`, through a
    /// lower-triangular `Δ` with `[[m, Δ], [Δᵀ, diag Δ]] ⪰ 0`.
    pub fn add_root_det(&mut self, prefix: &str, m: &[Vec<Affine>], owner: Option<usize>) -> VarId {
        let n = m.len();
        let mut delta = vec![vec![Affine::zero(); n]; n];
        for r in 0..n {
            for c in 0..=r {
                delta[r][c] = Affine::var(self.add_var(format!("{prefix}.D[{r},{c}]"), owner));
            }
        }
        let mut big = vec![vec![Affine::zero(); 2 * n]; 2 * n];
        for r in 0..n {
            for c in 0..n {
                big[r][c] = m[r][c].clone();
                big[r][n + c] = delta[r][c].clone();
                big[n + c][r] = delta[r][c].clone();
            }
            big[n + r][n + r] = delta[r][r].clone();
        }
        self.push(Constraint::psd(&big).labeled(format!("{prefix} root det")));
        let diag: Vec<Affine> = (0..n).map(|k| delta[k][k].clone()).collect();
        self.add_geo_mean(prefix, &diag, owner)
    }

    /// Symmetric matrix variable; returns the full `dim × dim` grid of
    /// expressions sharing one scalar per upper-triangular entry.
    pub fn add_sym_matrix(
        &mut self,
        prefix: &str,
        dim: usize,
        owner: Option<usize>,
    ) -> Vec<Vec<Affine>> {
        let mut grid = vec![vec![Affine::zero(); dim]; dim];
        for c in 0..dim {
            for r in 0..=c {
                let v = self.add_var(format!("{prefix}[{r},{c}]"), owner);
                grid[r][c] = Affine::var(v);
                grid[c][r] = Affine::var(v);
            }
        }
        grid
    }

    pub fn add_matrix(
        &mut self,
        prefix: &str,
        rows: usize,
        cols: usize,
        owner: Option<usize>,
    ) -> Vec<Vec<Affine>> {
        (0..rows)
            .map(|r| {
                (0..cols)
                    .map(|c| Affine::var(self.add_var(format!("{prefix}[{r},{c}]"), owner)))
                    .collect()
            })
            .collect()
    }

    /// Copy without the constraints marked implied.
    pub fn without_implied(&self) -> Program {
        Program {
            vars: self.vars.clone(),
            quad: self.quad.clone(),
            linear: self.linear.clone(),
            constant: self.constant,
            constraints: self.constraints.iter().filter(|c| !c.implied).cloned().collect(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn push(&mut self, c: Constraint) {
        self.constraints.push(c);
    }

    pub fn minimize_linear(&mut self, v: VarId, coef: f64) {
        self.linear.push((v, coef));
    }

    /// Adds `weight · expr²` to the objective.
    pub fn minimize_square(&mut self, expr: &Affine, weight: f64) {
        let terms = expr.canonical();
        for (a, &(va, ca)) in terms.iter().enumerate() {
            self.quad.push((va, va, weight * ca * ca));
            for &(vb, cb) in &terms[a + 1..] {
                self.quad.push((va, vb, 2.0 * weight * ca * cb));
            }
            self.linear.push((va, 2.0 * weight * ca * expr.constant));
        }
        self.constant += weight * expr.constant * expr.constant;
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.quad.iter().map(|&(a, b, c)| c * x[a] * x[b]).sum::<f64>()
            + self.linear.iter().map(|&(v, c)| c * x[v]).sum::<f64>()
            + self.constant
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|c| c.violation(x))
            .fold(0.0, f64::max)
    }

    pub fn solve(&self, settings: &SolverSettings) -> Result<Solution> {
        let n = self.num_vars();
        let start = Instant::now();

        let (mut pi, mut pj, mut pv) = (Vec::new(), Vec::new(), Vec::new());
        for &(a, b, c) in &self.quad {
            let (r, col) = if a <= b { (a, b) } else { (b, a) };
            let scale = if a == b { 2.0 } else { 1.0 };
            pi.push(r);
            pj.push(col);
            pv.push(scale * c);
        }
        let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);
        let mut q = vec![0.0; n];
        for &(v, c) in &self.linear {
            q[v] += c;
        }

        let (mut ai, mut aj, mut av) = (Vec::new(), Vec::new(), Vec::new());
        let mut b = Vec::new();
        let mut cones = Vec::with_capacity(self.constraints.len());
        let sqrt2 = std::f64::consts::SQRT_2;
        for con in &self.constraints {
            let mut emit = |row: &Affine, scale: f64| {
                let r = b.len();
                for &(v, c) in &row.terms {
                    ai.push(r);
                    aj.push(v);
                    av.push(-scale * c);
                }
                b.push(scale * row.constant);
            };
            match con.cone {
                Cone::Psd { dim } => {
                    let mut k = 0;
                    for c in 0..dim {
                        for r in 0..=c {
                            emit(&con.rows[k], if r == c { 1.0 } else { sqrt2 });
                            k += 1;
                        }
                    }
                    cones.push(SupportedConeT::PSDTriangleConeT(dim));
                }
                cone => {
                    for row in &con.rows {
                        emit(row, 1.0);
                    }
                    let len = con.rows.len();
                    cones.push(match cone {
                        Cone::Zero => SupportedConeT::ZeroConeT(len),
                        Cone::NonNeg => SupportedConeT::NonnegativeConeT(len),
                        _ => SupportedConeT::SecondOrderConeT(len),
                    });
                }
            }
        }
        let a = CscMatrix::new_from_triplets(b.len(), n, ai, aj, av);

        let clarabel_settings = DefaultSettingsBuilder::default()
            .verbose(settings.verbose)
            .max_iter(settings.max_iter)
            .tol_gap_abs(settings.tol_gap_abs)
            .tol_gap_rel(settings.tol_gap_rel)
            .tol_feas(settings.tol_feas)
            .build()
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, clarabel_settings)
            .map_err(|e| Error::Solver(format!("{e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved => SolveStatus::Solved,
            SolverStatus::AlmostSolved => SolveStatus::AlmostSolved,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                SolveStatus::Infeasible
            }
            // Stalled iterates are accepted when they are still feasible.
            SolverStatus::InsufficientProgress
            | SolverStatus::MaxIterations
            | SolverStatus::NumericalError
                if self.max_violation(&sol.x) <= STALL_ACCEPT =>
            {
                SolveStatus::AlmostSolved
            }
            other => return Err(Error::Solver(format!("clarabel status {other:?}"))),
        };
        Ok(Solution {
            objective: self.objective_value(&sol.x),
            x: sol.x.clone(),
            status,
            iterations: sol.iterations,
            solve_time: start.elapsed().as_secs_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_constrained_least_squares() {
        // min (x - 2)² + (y + 1)², 0 ≤ x ≤ 1, y free
        let mut p = Program::new();
        let x = p.add_var("x", None);
        let y = p.add_var("y", None);
        p.minimize_square(&(Affine::var(x) - Affine::constant(2.0)), 1.0);
        p.minimize_square(&(Affine::var(y) + Affine::constant(1.0)), 1.0);
        p.push(Constraint::nonneg(vec![
            Affine::var(x),
            Affine::constant(1.0) - Affine::var(x),
        ]));
        let sol = p.solve(&SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Solved);
        assert!((sol.x[x] - 1.0).abs() < 1e-6);
        assert!((sol.x[y] + 1.0).abs() < 1e-6);
        assert!((sol.objective - 1.0).abs() < 1e-6);
    }

    #[test]
    fn psd_constraint_bounds_off_diagonal() {
        // max x s.t. [[1, x], [x, 1]] ⪰ 0
        let mut p = Program::new();
        let x = p.add_var("x", None);
        p.minimize_linear(x, -1.0);
        let m = vec![
            vec![Affine::constant(1.0), Affine::var(x)],
            vec![Affine::var(x), Affine::constant(1.0)],
        ];
        p.push(Constraint::psd(&m));
        let sol = p.solve(&SolverSettings::default()).unwrap();
        assert!((sol.x[x] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rotated_cone_matches_squared_norm() {
        // min t s.t. ‖(x - 3)‖² ≤ t with x fixed at 1 → t = 4
        let mut p = Program::new();
        let x = p.add_var("x", None);
        let t = p.add_var("t", None);
        p.minimize_linear(t, 1.0);
        p.push(Constraint::zero(vec![Affine::var(x) - Affine::constant(1.0)]));
        let f = DMatrix::from_element(1, 1, 1.0);
        p.push(Constraint::squared_norm_le(
            &f,
            &[Affine::var(x) - Affine::constant(3.0)],
            Affine::var(t),
        ));
        let sol = p.solve(&SolverSettings::default()).unwrap();
        assert!((sol.x[t] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn geometric_mean_of_three_fixed_values() {
        // (2·4·8)^{1/3} = 4
        let mut p = Program::new();
        let xs: Vec<Affine> = [2.0, 4.0, 8.0].iter().map(|&v| Affine::constant(v)).collect();
        let t = p.add_geo_mean("g", &xs, None);
        p.minimize_linear(t, -1.0);
        let sol = p.solve(&SolverSettings::default()).unwrap();
        assert!((sol.x[t] - 4.0).abs() < 1e-5, "{}", sol.x[t]);
    }

    #[test]
    fn root_determinant_of_fixed_matrix() {
        // det [[4, 1], [1, 2]] = 7
        let mut p = Program::new();
        let c = |v| Affine::constant(v);
        let m = vec![vec![c(4.0), c(1.0)], vec![c(1.0), c(2.0)]];
        let t = p.add_root_det("m", &m, None);
        p.minimize_linear(t, -1.0);
        let sol = p.solve(&SolverSettings::default()).unwrap();
        assert!((sol.x[t] - 7f64.sqrt()).abs() < 1e-5, "{}", sol.x[t]);
    }

    #[test]
    fn infeasible_program_is_reported() {
        let mut p = Program::new();
        let x = p.add_var("x", None);
        p.minimize_linear(x, 1.0);
        p.push(Constraint::nonneg(vec![
            Affine::var(x) - Affine::constant(1.0),
            Affine::constant(-1.0) - Affine::var(x),
        ]));
        let sol = p.solve(&SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn canonical_key_ignores_term_order() {
        let a = Constraint::zero(vec![Affine::var(0) + Affine::var(1) * 2.0]);
        let b = Constraint::zero(vec![Affine::var(1) * 2.0 + Affine::var(0)]);
        let id = |v| v;
        assert_eq!(a.canonical_key(&id), b.canonical_key(&id));
    }
}
