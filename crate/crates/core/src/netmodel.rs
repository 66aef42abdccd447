//! Coupled linear network model.
//!
//! Subsystem `i` evolves as `x_i⁺ = Σ_{j∈N_i} A_ij x_j + B_i u_i + G_i w_i`
//! with polytopic neighborhood state constraints, polytopic input
//! constraints and an ellipsoidal disturbance set. Neighborhood vectors
//! `x_{N_i}` stack the members of `N_i` in ascending index order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Absolute slack used by every membership test.
pub const MEMBERSHIP_SLACK: f64 = 1e-9;

/// `{x : Hx ≤ h}` with `h > 0` (origin in the interior).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PolytopeRepr", try_from = "PolytopeRepr")]
pub struct Polytope {
    rows: DMatrix<f64>,
    offsets: DVector<f64>,
}

impl Polytope {
    pub fn new(rows: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self> {
        if rows.nrows() != offsets.len() {
            return Err(Error::Dimension(format!(
                "polytope has {} rows but {} offsets",
                rows.nrows(),
                offsets.len()
            )));
        }
        for r in 0..rows.nrows() {
            if rows.row(r).amax() == 0.0 {
                return Err(Error::InvalidModel(format!("polytope row {r} is zero")));
            }
            if !(offsets[r] > 0.0) {
                return Err(Error::InvalidModel(format!(
                    "polytope offset {r} = {} is not positive",
                    offsets[r]
                )));
            }
        }
        Ok(Self { rows, offsets })
    }

    /// Axis-aligned box `lower ≤ x ≤ upper`, `lower < 0 < upper`.
    pub fn from_bounds(lower: &[f64], upper: &[f64]) -> Result<Self> {
        let dim = lower.len();
        if upper.len() != dim {
            return Err(Error::Dimension("bound vectors differ in length".into()));
        }
        let mut rows = DMatrix::zeros(2 * dim, dim);
        let mut offsets = DVector::zeros(2 * dim);
        for k in 0..dim {
            rows[(2 * k, k)] = 1.0;
            offsets[2 * k] = upper[k];
            rows[(2 * k + 1, k)] = -1.0;
            offsets[2 * k + 1] = -lower[k];
        }
        Self::new(rows, offsets)
    }

    /// Rows scaled to unit Euclidean norm.
    pub fn normalized(&self) -> Self {
        let mut rows = self.rows.clone();
        let mut offsets = self.offsets.clone();
        for r in 0..rows.nrows() {
            let norm = rows.row(r).norm();
            rows.row_mut(r).unscale_mut(norm);
            offsets[r] /= norm;
        }
        Self { rows, offsets }
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    /// `max_r (H x − h)_r`; nonpositive iff `x` is inside.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        (&self.rows * x - &self.offsets).max()
    }

    pub fn contains(&self, x: &DVector<f64>, slack: f64) -> bool {
        self.violation(x) <= slack
    }
}

#[derive(Serialize, Deserialize)]
struct PolytopeRepr {
    #[serde(rename = "H", with = "linalg::rows_serde")]
    rows: DMatrix<f64>,
    h: Vec<f64>,
}

impl From<Polytope> for PolytopeRepr {
    fn from(p: Polytope) -> Self {
        Self {
            h: p.offsets.iter().copied().collect(),
            rows: p.rows,
        }
    }
}

impl TryFrom<PolytopeRepr> for Polytope {
    type Error = Error;

    fn try_from(r: PolytopeRepr) -> Result<Self> {
        let rows = if r.rows.is_empty() {
            DMatrix::zeros(r.h.len(), 0)
        } else {
            r.rows
        };
        Polytope::new(rows, DVector::from_vec(r.h))
    }
}

/// `{v : vᵀQv ≤ q}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    shape: DMatrix<f64>,
    level: f64,
}

impl Ellipsoid {
    pub fn new(shape: DMatrix<f64>, level: f64) -> Result<Self> {
        if !linalg::is_symmetric(&shape, 1e-9) {
            return Err(Error::InvalidModel("ellipsoid shape is not symmetric".into()));
        }
        if linalg::min_eigenvalue(&shape) < -1e-9 * (1.0 + shape.amax()) {
            return Err(Error::InvalidModel("ellipsoid shape is not PSD".into()));
        }
        if !(level >= 0.0) {
            return Err(Error::InvalidModel(format!("ellipsoid level {level} is negative")));
        }
        Ok(Self {
            shape: linalg::symmetrize(&shape),
            level,
        })
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.shape.nrows()
    }

    pub fn value(&self, v: &DVector<f64>) -> f64 {
        linalg::quad_form(&self.shape, v)
    }

    pub fn contains(&self, v: &DVector<f64>, slack: f64) -> bool {
        self.value(v) <= self.level + slack
    }

    /// Uniform sample from the set, or from its surface when `boundary`.
    /// Directions in the kernel of `Q` are left at zero.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, boundary: bool) -> DVector<f64> {
        let dim = self.dim();
        if self.level == 0.0 || dim == 0 {
            return DVector::zeros(dim);
        }
        let f = linalg::psd_factor(&self.shape);
        let u = unit_ball_sample(f.nrows(), rng, boundary);
        let pinv = f
            .pseudo_inverse(1e-14)
            .expect("pseudo-inverse with nonnegative epsilon");
        pinv * u * self.level.sqrt()
    }
}

/// Uniform sample from the unit ball in `ℝ^dim` (or its sphere).
pub fn unit_ball_sample<R: Rng + ?Sized>(dim: usize, rng: &mut R, boundary: bool) -> DVector<f64> {
    if dim == 0 {
        return DVector::zeros(0);
    }
    loop {
        let g = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = g.norm();
        if norm > 1e-12 {
            let radius = if boundary {
                1.0
            } else {
                rng.gen::<f64>().powf(1.0 / dim as f64)
            };
            return g * (radius / norm);
        }
    }
}

#[derive(Clone, Debug)]
pub struct SubsystemSpec {
    /// `A_ij` keyed by `j`; the key set plus `i` forms `N_i`.
    pub coupling: BTreeMap<usize, DMatrix<f64>>,
    pub input_matrix: DMatrix<f64>,
    pub disturbance_matrix: DMatrix<f64>,
    /// Constraints on `x_{N_i}`.
    pub state_constraints: Polytope,
    pub input_constraints: Polytope,
    pub disturbance_set: Ellipsoid,
}

impl SubsystemSpec {
    pub fn state_dim(&self) -> usize {
        self.input_matrix.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.input_matrix.ncols()
    }

    pub fn disturbance_dim(&self) -> usize {
        self.disturbance_matrix.ncols()
    }
}

#[derive(Clone, Debug)]
pub struct NetworkModel {
    subsystems: Vec<SubsystemSpec>,
    neighborhoods: Vec<Vec<usize>>,
    state_offsets: Vec<usize>,
    input_offsets: Vec<usize>,
    disturbance_offsets: Vec<usize>,
}

impl NetworkModel {
    /// Checks dimensional consistency only; admissibility is reported by
    /// [`NetworkModel::validate`].
    pub fn new(mut subsystems: Vec<SubsystemSpec>) -> Result<Self> {
        let count = subsystems.len();
        if count == 0 {
            return Err(Error::InvalidModel("network has no subsystems".into()));
        }
        let dims: Vec<usize> = subsystems.iter().map(|s| s.state_dim()).collect();
        let mut neighborhoods = Vec::with_capacity(count);
        for (i, sub) in subsystems.iter_mut().enumerate() {
            let n_i = dims[i];
            sub.coupling
                .entry(i)
                .or_insert_with(|| DMatrix::zeros(n_i, n_i));
            let mut nbhd_dim = 0;
            for (&j, a_ij) in &sub.coupling {
                if j >= count {
                    return Err(Error::InvalidModel(format!(
                        "subsystem {i} couples to unknown subsystem {j}"
                    )));
                }
                if a_ij.shape() != (n_i, dims[j]) {
                    return Err(Error::Dimension(format!(
                        "A[{i}][{j}] has shape {:?}, expected ({n_i}, {})",
                        a_ij.shape(),
                        dims[j]
                    )));
                }
                nbhd_dim += dims[j];
            }
            if sub.disturbance_matrix.nrows() != n_i {
                return Err(Error::Dimension(format!("G[{i}] row count differs from n_{i}")));
            }
            if sub.state_constraints.dim() != nbhd_dim {
                return Err(Error::Dimension(format!(
                    "state constraints of subsystem {i} act on dimension {} instead of {nbhd_dim}",
                    sub.state_constraints.dim()
                )));
            }
            if sub.input_constraints.dim() != sub.input_dim() {
                return Err(Error::Dimension(format!(
                    "input constraints of subsystem {i} have wrong dimension"
                )));
            }
            if sub.disturbance_set.dim() != sub.disturbance_dim() {
                return Err(Error::Dimension(format!(
                    "disturbance set of subsystem {i} has wrong dimension"
                )));
            }
            neighborhoods.push(sub.coupling.keys().copied().collect::<Vec<_>>());
        }
        let prefix = |f: &dyn Fn(&SubsystemSpec) -> usize| {
            let mut acc = 0;
            subsystems
                .iter()
                .map(|s| {
                    let o = acc;
                    acc += f(s);
                    o
                })
                .collect::<Vec<_>>()
        };
        let state_offsets = prefix(&|s| s.state_dim());
        let input_offsets = prefix(&|s| s.input_dim());
        let disturbance_offsets = prefix(&|s| s.disturbance_dim());
        Ok(Self {
            subsystems,
            neighborhoods,
            state_offsets,
            input_offsets,
            disturbance_offsets,
        })
    }

    pub fn num_subsystems(&self) -> usize {
        self.subsystems.len()
    }

    pub fn subsystem(&self, i: usize) -> &SubsystemSpec {
        &self.subsystems[i]
    }

    pub fn subsystems(&self) -> &[SubsystemSpec] {
        &self.subsystems
    }

    pub fn neighborhood(&self, i: usize) -> &[usize] {
        &self.neighborhoods[i]
    }

    pub fn neighborhoods(&self) -> &[Vec<usize>] {
        &self.neighborhoods
    }

    pub fn state_dim(&self, i: usize) -> usize {
        self.subsystems[i].state_dim()
    }

    pub fn input_dim(&self, i: usize) -> usize {
        self.subsystems[i].input_dim()
    }

    pub fn total_state_dim(&self) -> usize {
        self.subsystems.iter().map(|s| s.state_dim()).sum()
    }

    pub fn total_input_dim(&self) -> usize {
        self.subsystems.iter().map(|s| s.input_dim()).sum()
    }

    pub fn total_disturbance_dim(&self) -> usize {
        self.subsystems.iter().map(|s| s.disturbance_dim()).sum()
    }

    pub fn state_offset(&self, i: usize) -> usize {
        self.state_offsets[i]
    }

    pub fn input_offset(&self, i: usize) -> usize {
        self.input_offsets[i]
    }

    pub fn neighborhood_dim(&self, i: usize) -> usize {
        self.neighborhoods[i].iter().map(|&j| self.state_dim(j)).sum()
    }

    /// Offset of block `j` inside `x_{N_i}`, if `j ∈ N_i`.
    pub fn neighborhood_offset(&self, i: usize, j: usize) -> Option<usize> {
        let mut acc = 0;
        for &k in &self.neighborhoods[i] {
            if k == j {
                return Some(acc);
            }
            acc += self.state_dim(k);
        }
        None
    }

    /// `A_{N_i}` (n_i × n_{N_i}).
    pub fn neighborhood_dynamics(&self, i: usize) -> DMatrix<f64> {
        let blocks: Vec<&DMatrix<f64>> = self.subsystems[i].coupling.values().collect();
        let cols = self.neighborhood_dim(i);
        let mut out = DMatrix::zeros(self.state_dim(i), cols);
        let mut c = 0;
        for b in blocks {
            out.view_mut((0, c), b.shape()).copy_from(b);
            c += b.ncols();
        }
        out
    }

    /// `T_i` with `T_i x = x_i`.
    pub fn local_lift(&self, i: usize) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(self.state_dim(i), self.total_state_dim());
        let o = self.state_offsets[i];
        for k in 0..self.state_dim(i) {
            t[(k, o + k)] = 1.0;
        }
        t
    }

    /// `W_i` with `W_i x = x_{N_i}`.
    pub fn neighborhood_lift(&self, i: usize) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.neighborhood_dim(i), self.total_state_dim());
        let mut r = 0;
        for &j in &self.neighborhoods[i] {
            let o = self.state_offsets[j];
            for k in 0..self.state_dim(j) {
                w[(r, o + k)] = 1.0;
                r += 1;
            }
        }
        w
    }

    pub fn local_state(&self, x: &DVector<f64>, i: usize) -> DVector<f64> {
        x.rows(self.state_offsets[i], self.state_dim(i)).into_owned()
    }

    pub fn neighborhood_state(&self, x: &DVector<f64>, i: usize) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.neighborhood_dim(i));
        for &j in &self.neighborhoods[i] {
            out.extend(x.rows(self.state_offsets[j], self.state_dim(j)).iter());
        }
        DVector::from_vec(out)
    }

    pub fn local_input(&self, u: &DVector<f64>, i: usize) -> DVector<f64> {
        u.rows(self.input_offsets[i], self.input_dim(i)).into_owned()
    }

    /// Stacks per-subsystem vectors into a global vector.
    pub fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
        DVector::from_iterator(
            parts.iter().map(|p| p.len()).sum(),
            parts.iter().flat_map(|p| p.iter().copied()),
        )
    }

    pub fn split_states(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.num_subsystems()).map(|i| self.local_state(x, i)).collect()
    }

    pub fn split_inputs(&self, u: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.num_subsystems()).map(|i| self.local_input(u, i)).collect()
    }

    pub fn split_disturbances(&self, w: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.num_subsystems())
            .map(|i| {
                w.rows(self.disturbance_offsets[i], self.subsystems[i].disturbance_dim())
                    .into_owned()
            })
            .collect()
    }

    /// Dense global `(A, B, G)`.
    pub fn global_dynamics(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n = self.total_state_dim();
        let mut a = DMatrix::zeros(n, n);
        for (i, sub) in self.subsystems.iter().enumerate() {
            for (&j, a_ij) in &sub.coupling {
                a.view_mut((self.state_offsets[i], self.state_offsets[j]), a_ij.shape())
                    .copy_from(a_ij);
            }
        }
        let b = linalg::block_diag(
            &self
                .subsystems
                .iter()
                .map(|s| s.input_matrix.clone())
                .collect::<Vec<_>>(),
        );
        let g = linalg::block_diag(
            &self
                .subsystems
                .iter()
                .map(|s| s.disturbance_matrix.clone())
                .collect::<Vec<_>>(),
        );
        (a, b, g)
    }

    /// Global `(H, h)` with every neighborhood row lifted by `W_i`.
    pub fn global_state_constraints(&self) -> (DMatrix<f64>, DVector<f64>) {
        let blocks: Vec<(DMatrix<f64>, DVector<f64>)> = (0..self.num_subsystems())
            .map(|i| {
                let x = &self.subsystems[i].state_constraints;
                (x.rows() * self.neighborhood_lift(i), x.offsets().clone())
            })
            .collect();
        stack_rows(&blocks, self.total_state_dim())
    }

    /// Global `(O, o)`, block diagonal.
    pub fn global_input_constraints(&self) -> (DMatrix<f64>, DVector<f64>) {
        let o = linalg::block_diag(
            &self
                .subsystems
                .iter()
                .map(|s| s.input_constraints.rows().clone())
                .collect::<Vec<_>>(),
        );
        let offsets: Vec<f64> = self
            .subsystems
            .iter()
            .flat_map(|s| s.input_constraints.offsets().iter().copied())
            .collect();
        (o, DVector::from_vec(offsets))
    }

    /// One step of the disturbed network, assembled blockwise.
    pub fn step_truth(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_dims(x, u, w)?;
        let mut next = Vec::with_capacity(x.len());
        for (i, sub) in self.subsystems.iter().enumerate() {
            let w_i = w.rows(self.disturbance_offsets[i], sub.disturbance_dim()).into_owned();
            let value = sub.disturbance_set.value(&w_i);
            if value > sub.disturbance_set.level() + MEMBERSHIP_SLACK {
                return Err(Error::DisturbanceOutOfSet {
                    subsystem: i,
                    value,
                    level: sub.disturbance_set.level(),
                });
            }
            let mut x_i = &sub.input_matrix * self.local_input(u, i) + &sub.disturbance_matrix * w_i;
            for (&j, a_ij) in &sub.coupling {
                x_i += a_ij * self.local_state(x, j);
            }
            next.extend(x_i.iter());
        }
        Ok(DVector::from_vec(next))
    }

    fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<()> {
        let expect = [
            ("state", x.len(), self.total_state_dim()),
            ("input", u.len(), self.total_input_dim()),
            ("disturbance", w.len(), self.total_disturbance_dim()),
        ];
        for (what, got, want) in expect {
            if got != want {
                return Err(Error::Dimension(format!("{what} has length {got}, expected {want}")));
            }
        }
        Ok(())
    }

    /// Every violated admissibility condition; empty iff admissible.
    pub fn validate(&self) -> ValidationReport {
        let mut issues = Vec::new();
        for (i, nbhd) in self.neighborhoods.iter().enumerate() {
            for &j in nbhd {
                if !self.neighborhoods[j].contains(&i) {
                    issues.push(ValidationIssue::AsymmetricNeighborhood { i, j });
                }
            }
        }
        if !self.is_connected() {
            issues.push(ValidationIssue::Disconnected);
        }
        if let Some(eigenvalue) = self.uncontrollable_unstable_mode() {
            issues.push(ValidationIssue::NotStabilizable { eigenvalue });
        }
        ValidationReport { issues }
    }

    fn is_connected(&self) -> bool {
        let count = self.num_subsystems();
        let mut adj = vec![BTreeSet::new(); count];
        for (i, nbhd) in self.neighborhoods.iter().enumerate() {
            for &j in nbhd {
                adj[i].insert(j);
                adj[j].insert(i);
            }
        }
        let mut seen = vec![false; count];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// PBH test on the eigenvalues with `|λ| ≥ 1`.
    fn uncontrollable_unstable_mode(&self) -> Option<(f64, f64)> {
        let (a, b, _) = self.global_dynamics();
        let n = a.nrows();
        for lambda in a.complex_eigenvalues().iter() {
            if lambda.norm() < 1.0 - 1e-9 {
                continue;
            }
            let mut pbh = nalgebra::DMatrix::<Complex64>::zeros(n, n + b.ncols());
            for r in 0..n {
                for c in 0..n {
                    pbh[(r, c)] = Complex64::new(a[(r, c)], 0.0);
                }
                pbh[(r, r)] -= lambda;
                for c in 0..b.ncols() {
                    pbh[(r, n + c)] = Complex64::new(b[(r, c)], 0.0);
                }
            }
            let sv = pbh.svd(false, false).singular_values;
            let top = sv.max().max(1e-300);
            if sv.iter().filter(|&&s| s > 1e-9 * top).count() < n {
                return Some((lambda.re, lambda.im));
            }
        }
        None
    }
}

fn stack_rows(blocks: &[(DMatrix<f64>, DVector<f64>)], cols: usize) -> (DMatrix<f64>, DVector<f64>) {
    let rows: usize = blocks.iter().map(|b| b.0.nrows()).sum();
    let mut h = DMatrix::zeros(rows, cols);
    let mut o = DVector::zeros(rows);
    let mut r = 0;
    for (m, v) in blocks {
        h.view_mut((r, 0), m.shape()).copy_from(m);
        o.rows_mut(r, v.len()).copy_from(v);
        r += m.nrows();
    }
    (h, o)
}

#[derive(Clone, Debug, PartialEq)]
pub enum ValidationIssue {
    AsymmetricNeighborhood { i: usize, j: usize },
    Disconnected,
    NotStabilizable { eigenvalue: (f64, f64) },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::AsymmetricNeighborhood { i, j } => {
                write!(f, "asymmetric neighborhood: {j} ∈ N_{i} but {i} ∉ N_{j}")
            }
            Self::Disconnected => write!(f, "graph not connected"),
            Self::NotStabilizable { eigenvalue } => write!(
                f,
                "(A, B) not stabilizable: mode {:.4}{:+.4}i is uncontrollable",
                eigenvalue.0, eigenvalue.1
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_admissible(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return write!(f, "model admissible");
        }
        let msgs: Vec<String> = self.issues.iter().map(|i| i.to_string()).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

/// Mass-spring-damper chain parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainParams {
    pub masses: usize,
    pub mass: f64,
    pub spring: f64,
    pub damper: f64,
    pub dt: f64,
    pub position_bound: f64,
    pub velocity_bound: f64,
    pub input_bound: f64,
    pub disturbance_level: f64,
    /// `(subsystem, lower, upper)` override of one position bound.
    pub position_override: Option<(usize, f64, f64)>,
}

impl ChainParams {
    /// Nine unit masses, `k = d = 0.1`, `dt = 0.2`, second mass limited to
    /// `−1 ≤ p ≤ 0.1`.
    pub fn benchmark() -> Self {
        Self {
            masses: 9,
            mass: 1.0,
            spring: 0.1,
            damper: 0.1,
            dt: 0.2,
            position_bound: 1.0,
            velocity_bound: 1.0,
            input_bound: 5.0,
            disturbance_level: 1.1e-3,
            position_override: Some((1, -1.0, 0.1)),
        }
    }
}

impl Default for ChainParams {
    fn default() -> Self {
        Self::benchmark()
    }
}

/// Euler-discretized chain with free ends; state `(p_i, v_i)`, input force
/// `F_i`, disturbance entering as `dt·I` on the local state.
pub fn build_chain_benchmark(params: &ChainParams) -> Result<NetworkModel> {
    let ChainParams {
        masses,
        mass,
        spring,
        damper,
        dt,
        ..
    } = *params;
    if masses == 0 {
        return Err(Error::InvalidModel("chain needs at least one mass".into()));
    }
    if !(dt > 0.0) || !(mass > 0.0) || spring < 0.0 || damper < 0.0 {
        return Err(Error::InvalidModel("chain parameters must be positive".into()));
    }
    let mut subs = Vec::with_capacity(masses);
    for i in 0..masses {
        let links = usize::from(i > 0) + usize::from(i + 1 < masses);
        let links = links as f64;
        let mut coupling = BTreeMap::new();
        coupling.insert(
            i,
            DMatrix::from_row_slice(
                2,
                2,
                &[
                    1.0,
                    dt,
                    -links * spring * dt / mass,
                    1.0 - links * damper * dt / mass,
                ],
            ),
        );
        let neighbor = DMatrix::from_row_slice(
            2,
            2,
            &[0.0, 0.0, spring * dt / mass, damper * dt / mass],
        );
        if i > 0 {
            coupling.insert(i - 1, neighbor.clone());
        }
        if i + 1 < masses {
            coupling.insert(i + 1, neighbor);
        }

        let (lo, hi) = match params.position_override {
            Some((k, lo, hi)) if k == i => (lo, hi),
            _ => (-params.position_bound, params.position_bound),
        };
        let own = Polytope::from_bounds(
            &[lo, -params.velocity_bound],
            &[hi, params.velocity_bound],
        )?;
        let nbhd: Vec<usize> = coupling.keys().copied().collect();
        let own_pos = nbhd.iter().position(|&j| j == i).unwrap_or(0) * 2;
        let mut rows = DMatrix::zeros(own.num_rows(), 2 * nbhd.len());
        rows.view_mut((0, own_pos), (own.num_rows(), 2))
            .copy_from(own.rows());
        let state_constraints = Polytope::new(rows, own.offsets().clone())?.normalized();

        subs.push(SubsystemSpec {
            coupling,
            input_matrix: DMatrix::from_row_slice(2, 1, &[0.0, dt / mass]),
            disturbance_matrix: DMatrix::identity(2, 2) * dt,
            state_constraints,
            input_constraints: Polytope::from_bounds(
                &[-params.input_bound],
                &[params.input_bound],
            )?
            .normalized(),
            disturbance_set: Ellipsoid::new(DMatrix::identity(2, 2), params.disturbance_level)?,
        });
    }
    NetworkModel::new(subs)
}

// ---------------------------------------------------------------------------
// Model definition file

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub subsystems: Vec<SubsystemFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubsystemFile {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    #[serde(rename = "A")]
    pub a: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "G")]
    pub g: Vec<Vec<f64>>,
    #[serde(rename = "X")]
    pub x: StatePolytopeFile,
    #[serde(rename = "U")]
    pub u: InputPolytopeFile,
    #[serde(rename = "W")]
    pub w: EllipsoidFile,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StatePolytopeFile {
    #[serde(rename = "H")]
    pub rows: Vec<Vec<f64>>,
    pub h: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InputPolytopeFile {
    #[serde(rename = "O")]
    pub rows: Vec<Vec<f64>>,
    pub o: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EllipsoidFile {
    #[serde(rename = "Q")]
    pub shape: Vec<Vec<f64>>,
    pub q: f64,
}

fn matrix_or_empty(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Ok(DMatrix::zeros(nrows, ncols));
    }
    let m = linalg::from_rows(rows)?;
    if m.shape() != (nrows, ncols) {
        return Err(Error::Dimension(format!(
            "matrix has shape {:?}, expected ({nrows}, {ncols})",
            m.shape()
        )));
    }
    Ok(m)
}

impl ModelFile {
    pub fn from_model(model: &NetworkModel) -> Self {
        let subsystems = model
            .subsystems()
            .iter()
            .map(|s| SubsystemFile {
                n: s.state_dim(),
                m: s.input_dim(),
                p: s.disturbance_dim(),
                a: s
                    .coupling
                    .iter()
                    .map(|(j, a)| (j.to_string(), linalg::to_rows(a)))
                    .collect(),
                b: linalg::to_rows(&s.input_matrix),
                g: linalg::to_rows(&s.disturbance_matrix),
                x: StatePolytopeFile {
                    rows: linalg::to_rows(s.state_constraints.rows()),
                    h: s.state_constraints.offsets().iter().copied().collect(),
                },
                u: InputPolytopeFile {
                    rows: linalg::to_rows(s.input_constraints.rows()),
                    o: s.input_constraints.offsets().iter().copied().collect(),
                },
                w: EllipsoidFile {
                    shape: linalg::to_rows(s.disturbance_set.shape()),
                    q: s.disturbance_set.level(),
                },
            })
            .collect();
        Self { subsystems }
    }

    /// Builds the model without admissibility checks.
    pub fn to_model_unchecked(&self) -> Result<NetworkModel> {
        let dims: Vec<usize> = self.subsystems.iter().map(|s| s.n).collect();
        let mut subs = Vec::with_capacity(self.subsystems.len());
        for (i, s) in self.subsystems.iter().enumerate() {
            let mut coupling = BTreeMap::new();
            for (key, rows) in &s.a {
                let j: usize = key
                    .parse()
                    .map_err(|_| Error::InvalidModel(format!("bad coupling key {key:?}")))?;
                let n_j = *dims.get(j).ok_or_else(|| {
                    Error::InvalidModel(format!("subsystem {i} couples to unknown {j}"))
                })?;
                coupling.insert(j, matrix_or_empty(rows, s.n, n_j)?);
            }
            let x_rows = linalg::from_rows(&s.x.rows)?;
            let u_rows = linalg::from_rows(&s.u.rows)?;
            subs.push(SubsystemSpec {
                coupling,
                input_matrix: matrix_or_empty(&s.b, s.n, s.m)?,
                disturbance_matrix: matrix_or_empty(&s.g, s.n, s.p)?,
                state_constraints: Polytope::new(x_rows, DVector::from_vec(s.x.h.clone()))?,
                input_constraints: Polytope::new(u_rows, DVector::from_vec(s.u.o.clone()))?,
                disturbance_set: Ellipsoid::new(matrix_or_empty(&s.w.shape, s.p, s.p)?, s.w.q)?,
            });
        }
        NetworkModel::new(subs)
    }

    /// Builds the model and rejects it unless `validate` is clean.
    pub fn to_model(&self) -> Result<NetworkModel> {
        let model = self.to_model_unchecked()?;
        let report = model.validate();
        if !report.is_admissible() {
            return Err(Error::InvalidModel(report.to_string()));
        }
        Ok(model)
    }
}

impl NetworkModel {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str::<ModelFile>(s)?.to_model()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from_model(self))?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}
