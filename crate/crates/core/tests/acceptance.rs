//! Acceptance criteria for the toolkit on the nine-mass chain. Every test
//! prints one `PASS`/`FAIL` line before asserting.

use std::io::Write;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use dmpsc::bench::{
    approach_scenario, compare_controllers, make_policy, random_initial_positions, simulate,
    CompareConfig, Controller, PolicySpec, SimConfig, StepStatus, DMPSC_LINEAR, DMPSC_NOMINAL, RDMPC,
};
use dmpsc::certifier::{
    certify, in_safe_set, init_session, pinned_feasible, Artifacts, CertRequest, CertSettings,
    NegotiationRows,
};
use dmpsc::distsolve::{compare_with_centralized, ConsensusParams, OutcomeStatus};
use dmpsc::netmodel::{build_chain_benchmark, unit_ball_sample, ChainParams, Ellipsoid, NetworkModel, Polytope};
use dmpsc::terminal::TerminalOptions;
use dmpsc::tube::{
    synthesize_tube, tighten_constraints, tighten_polytope, verify_rpi_monte_carlo, StructuredTube,
    TubeOptions, BENCHMARK_TAU,
};

const SLACK: f64 = 1e-9;

struct Bench {
    model: NetworkModel,
    artifacts: Artifacts,
}

fn bench() -> &'static Bench {
    static CELL: OnceLock<Bench> = OnceLock::new();
    CELL.get_or_init(|| {
        let model = build_chain_benchmark(&ChainParams::benchmark()).expect("benchmark model");
        let artifacts = Artifacts::synthesize(&model, &TubeOptions::default(), &TerminalOptions::default())
            .expect("benchmark artifacts");
        Bench { model, artifacts }
    })
}

/// Writes past the test harness's output capture so the verdict shows up
/// in ordinary `cargo test` logs.
fn report(id: u32, name: &str, ok: bool, detail: String) {
    let line = format!("\n{} criterion {id} ({name}): {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

// 1 and 2 share the same 20 seeded runs.
struct SafetyRuns {
    raw_violating_seeds: usize,
    certified_state_violations: usize,
    certified_input_violations: usize,
    non_feasible_steps: usize,
    steps: usize,
    max_beta_sum: f64,
    max_alpha_sum: f64,
}

fn safety_runs() -> &'static SafetyRuns {
    static CELL: OnceLock<SafetyRuns> = OnceLock::new();
    CELL.get_or_init(|| {
        let b = bench();
        let runs: Vec<_> = (0..20u64)
            .into_par_iter()
            .map(|seed| {
                let x0 = approach_scenario(&b.model, seed);
                let config = SimConfig {
                    seed,
                    ..SimConfig::default()
                };
                let run = |controller| {
                    let mut policy = make_policy(&PolicySpec::linear(), &b.model).unwrap();
                    simulate(&b.model, &b.artifacts, policy.as_mut(), controller, &x0, &config, None).unwrap()
                };
                (run(Controller::Raw), run(Controller::Certified))
            })
            .collect();
        let mut out = SafetyRuns {
            raw_violating_seeds: 0,
            certified_state_violations: 0,
            certified_input_violations: 0,
            non_feasible_steps: 0,
            steps: 0,
            max_beta_sum: f64::MIN,
            max_alpha_sum: f64::MIN,
        };
        for (raw, cert) in &runs {
            // p_2 is the first state of the second mass
            let p2 = b.model.state_offset(1);
            let raw_exceeds = raw.states().iter().any(|x| x[p2] > 0.1 + SLACK);
            out.raw_violating_seeds += usize::from(raw_exceeds);
            out.certified_state_violations += cert.state_violations;
            out.certified_input_violations += cert.input_violations;
            for s in &cert.steps {
                out.steps += 1;
                out.non_feasible_steps += usize::from(s.status != StepStatus::Feasible);
                out.max_beta_sum = out.max_beta_sum.max(s.beta.iter().sum());
                out.max_alpha_sum = out.max_alpha_sum.max(s.alpha.iter().sum());
            }
        }
        out
    })
}

#[test]
fn criterion_1_safety_reproduction() {
    let r = safety_runs();
    let ok = r.raw_violating_seeds >= 1 && r.certified_state_violations == 0 && r.certified_input_violations == 0;
    report(
        1,
        "safety reproduction",
        ok,
        format!(
            "raw run exceeds p_2 <= 0.1 for {}/20 seeds; certified runs have {} state and {} input violations",
            r.raw_violating_seeds, r.certified_state_violations, r.certified_input_violations
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_2_recursive_feasibility() {
    let r = safety_runs();
    let alpha_bar = bench().artifacts.terminal.alpha_bar;
    let ok = r.steps == 400
        && r.non_feasible_steps == 0
        && r.max_beta_sum <= 1.0 + SLACK
        && r.max_alpha_sum <= alpha_bar + SLACK;
    report(
        2,
        "recursive feasibility",
        ok,
        format!(
            "{} of {} steps not feasible; max sum beta {:.12}; max sum alpha {:.12} (alpha_bar {:.12})",
            r.non_feasible_steps, r.steps, r.max_beta_sum, r.max_alpha_sum, alpha_bar
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_3_rpi_verification() {
    let b = bench();
    let tube = synthesize_tube(&b.model, &TubeOptions::default()).unwrap();
    let good = verify_rpi_monte_carlo(&b.model, &tube, 10_000, 7, SLACK);
    let bad = verify_rpi_monte_carlo(&b.model, &tube.with_scaled_shape(100.0), 10_000, 7, SLACK);
    let ok = good.samples == 10_000 && good.violations == 0 && bad.violations > 0;
    report(
        3,
        "RPI verification",
        ok,
        format!(
            "synthesized at tau = {BENCHMARK_TAU}: {} violations in {} samples (max level {:.9}); x100 control: {} violations",
            good.violations, good.samples, good.max_level, bad.violations
        ),
    );
    assert!(ok);
}

fn random_connected_graph(rng: &mut ChaCha8Rng, nodes: usize) -> Vec<Vec<usize>> {
    let mut adj = vec![vec![false; nodes]; nodes];
    // random spanning tree, then extra edges
    for v in 1..nodes {
        let u = rng.gen_range(0..v);
        adj[u][v] = true;
        adj[v][u] = true;
    }
    let p = rng.gen_range(0.0..0.6);
    for u in 0..nodes {
        for v in u + 1..nodes {
            if rng.gen_bool(p) {
                adj[u][v] = true;
                adj[v][u] = true;
            }
        }
    }
    (0..nodes)
        .map(|i| (0..nodes).filter(|&j| j == i || adj[i][j]).collect())
        .collect()
}

/// Orthonormal basis of the null space of `m`, from the SVD of `mᵀm`.
fn null_space(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.ncols();
    let eig = (m.transpose() * m).symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let cols: Vec<DVector<f64>> = (0..n)
        .filter(|&k| eig.eigenvalues[k] <= 1e-12 * scale)
        .map(|k| eig.eigenvectors.column(k).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

fn rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.amax().max(1.0);
    sv.iter().filter(|&&s| s > 1e-10 * top).count()
}

#[test]
fn criterion_4_negotiation_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut free_dims = 0;
    for _ in 0..100 {
        let nodes = rng.gen_range(3..=12);
        let nb = random_connected_graph(&mut rng, nodes);
        let m = NegotiationRows::new(&nb).matrix(nodes);
        let basis = null_space(&m);
        free_dims += basis.ncols();
        for _ in 0..10 {
            if basis.ncols() == 0 {
                break;
            }
            let coeffs = DVector::from_fn(basis.ncols(), |_, _| rng.gen_range(-1.0..1.0));
            let delta = &basis * coeffs;
            assert!((&m * &delta).amax() <= 1e-10, "sample violates the local rows");
            worst = worst.max(delta.sum().abs());
        }
    }

    // star: hub 1 with leaves 2..5
    let star = vec![vec![0, 1, 2, 3, 4], vec![0, 1], vec![0, 2], vec![0, 3], vec![0, 4]];
    let ms = NegotiationRows::new(&star).matrix(5);
    let pattern = DMatrix::from_row_slice(2, 5, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    let both = DMatrix::from_fn(ms.nrows() + 2, 5, |r, c| {
        if r < ms.nrows() {
            ms[(r, c)]
        } else {
            pattern[(r - ms.nrows(), c)]
        }
    });
    let star_ok = rank(&ms) == 2 && rank(&both) == 2;

    // ring of five
    let ring: Vec<Vec<usize>> = (0..5).map(|i| {
        let mut v = vec![(i + 4) % 5, i, (i + 1) % 5];
        v.sort();
        v
    }).collect();
    let ring_ok = null_space(&NegotiationRows::new(&ring).matrix(5)).ncols() == 0;

    let ok = worst <= 1e-9 && free_dims > 0 && star_ok && ring_ok;
    report(
        4,
        "negotiation rows",
        ok,
        format!(
            "max |sum dbeta| {worst:.2e} over 100 graphs ({free_dims} free directions); star pattern {}; ring {}",
            if star_ok { "matches" } else { "differs" },
            if ring_ok { "pins every dbeta" } else { "leaves dbeta free" }
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_5_pass_through() {
    let b = bench();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    let mut pinned = 0;
    let mut worst_obj: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    while checked < 50 {
        let mut x = DVector::zeros(b.model.total_state_dim());
        for v in x.iter_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
        let Ok(session) = init_session(&b.model, &b.artifacts, &x, CertSettings::default()) else {
            continue;
        };
        checked += 1;
        let mut policy = make_policy(&PolicySpec::linear(), &b.model).unwrap();
        let u_l = policy.propose(0, &x).unwrap();
        let request = CertRequest { x, u_l };
        if !pinned_feasible(&b.model, &b.artifacts, &session, &request).unwrap() {
            continue;
        }
        pinned += 1;
        let result = certify(&b.model, &b.artifacts, &session, &request).unwrap();
        worst_obj = worst_obj.max(result.objective);
        worst_gap = worst_gap.max((&result.u_cert - &request.u_l).amax());
    }
    let ok = pinned > 0 && worst_obj <= 1e-6 && worst_gap <= 1e-5;
    report(
        5,
        "pass-through",
        ok,
        format!(
            "{pinned}/50 states admit u_L; max objective {worst_obj:.2e}; max |u_cert - u_L| {worst_gap:.2e}"
        ),
    );
    assert!(ok);
}

/// Random point of `set`: a random direction scaled to a uniform fraction
/// of the distance to the boundary, exactly on the boundary half the time.
fn sample_in_polytope(set: &Polytope, rng: &mut ChaCha8Rng, cap: f64) -> DVector<f64> {
    let d = unit_ball_sample(set.dim(), rng, true);
    let hd = set.rows() * &d;
    let mut reach = cap;
    for r in 0..set.num_rows() {
        if hd[r] > 0.0 {
            reach = reach.min(set.offsets()[r] / hd[r]);
        }
    }
    let t = if rng.gen_bool(0.5) { reach } else { rng.gen_range(0.0..reach) };
    d * t
}

/// Pairs `z ∈ X̄` (tightened with `tightened_by`) and `e ∈ Ω` of `tube`
/// whose sum leaves the original constraints.
fn tightening_violations(
    model: &NetworkModel,
    tightened_by: &StructuredTube,
    tube: &StructuredTube,
    pairs: usize,
    seed: u64,
) -> usize {
    let tight = tighten_constraints(model, tightened_by).unwrap();
    let omega = Ellipsoid::new(tube.global_shape(), 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for k in 0..pairs {
        let e = omega.sample(&mut rng, k % 2 == 0);
        for i in 0..model.num_subsystems() {
            let sub = model.subsystem(i);
            let e_n = model.neighborhood_state(&e, i);
            let z = sample_in_polytope(&tight.state[i], &mut rng, 5.0);
            let v = sample_in_polytope(&tight.input[i], &mut rng, 10.0);
            if !sub.state_constraints.contains(&(z + &e_n), SLACK) {
                violations += 1;
            }
            if !sub.input_constraints.contains(&(v + &tube.gains[i] * &e_n), SLACK) {
                violations += 1;
            }
        }
    }
    violations
}

#[test]
fn criterion_6_tightening_soundness() {
    let b = bench();
    let tube = &b.artifacts.tube;
    let violations = tightening_violations(&b.model, tube, tube, 1000, 6);
    // negative control: tightening for a tube ten times too small
    let control = tightening_violations(&b.model, &tube.with_scaled_shape(100.0), tube, 1000, 6);

    let interval = Polytope::from_bounds(&[-1.0], &[1.0]).unwrap();
    let one = DMatrix::identity(1, 1);
    let inverse = DMatrix::from_element(1, 1, 1.0 / 4.0);
    let tightened = tighten_polytope(&interval, &one, &inverse, "interval").unwrap();
    let offsets = tightened.offsets();
    let exact = offsets.iter().all(|&o| o == 0.5);

    let ok = violations == 0 && control > 0 && exact;
    report(
        6,
        "tightening soundness",
        ok,
        format!(
            "{violations} violations in 1000 (z, e) pairs (undersized-tube control: {control}); 1-D offsets {:?}",
            offsets.as_slice()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_7_cost_ordering() {
    let b = bench();
    let summary = compare_controllers(
        &b.model,
        &b.artifacts,
        &CompareConfig {
            runs: 20,
            steps: 20,
            horizon: 10,
            ..CompareConfig::default()
        },
    )
    .unwrap();
    let get = |name| summary.variant(name).expect("variant present");
    let (d1, d2, rd) = (get(DMPSC_LINEAR), get(DMPSC_NOMINAL), get(RDMPC));
    let violations: usize = summary
        .variants
        .iter()
        .map(|v| v.state_violations + v.input_violations)
        .sum();
    let ok = d1.cost.median < rd.cost.median
        && d2.cost.median < rd.cost.median
        && d1.solve_time.median < rd.solve_time.median
        && violations == 0
        && d1.costs.len() == 20;
    report(
        7,
        "cost ordering",
        ok,
        format!(
            "median cost DMPSC 1 {:.3}, DMPSC 2 {:.3}, RDMPC {:.3}; median solver ms DMPSC 1 {:.1}, RDMPC {:.1}; {violations} violations",
            d1.cost.median, d2.cost.median, rd.cost.median, d1.solve_time.median, rd.solve_time.median
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_8_distributed_equivalence() {
    let b = bench();
    let params = ConsensusParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut requests = Vec::new();
    while requests.len() < 20 {
        let x = random_initial_positions(&b.model, &mut rng, 0.6);
        let Ok(session) = init_session(&b.model, &b.artifacts, &x, CertSettings::default()) else {
            continue;
        };
        let u_l = DVector::from_fn(b.model.total_input_dim(), |_, _| rng.gen_range(-4.0..4.0));
        let request = CertRequest { x, u_l };
        if certify(&b.model, &b.artifacts, &session, &request).is_err() {
            continue;
        }
        requests.push((session, request));
    }
    let reports: Vec<_> = requests
        .par_iter()
        .map(|(session, request)| {
            compare_with_centralized(&b.model, &b.artifacts, session, request, &params).unwrap()
        })
        .collect();
    let solved = reports
        .iter()
        .filter(|r| r.centralized == OutcomeStatus::Solved && r.distributed == OutcomeStatus::Solved)
        .count();
    let input_gap = reports.iter().map(|r| r.input_gap).fold(0.0, f64::max);
    let objective_gap = reports.iter().map(|r| r.objective_gap).fold(0.0, f64::max);
    let stray: usize = reports.iter().map(|r| r.non_neighbor_messages).sum();
    let messages: usize = reports.iter().map(|r| r.messages).sum();
    let ok = solved == 20 && input_gap <= 1e-3 && objective_gap <= 1e-3 && stray == 0 && messages > 0;
    report(
        8,
        "distributed equivalence",
        ok,
        format!(
            "{solved}/20 solved by both; max input gap {input_gap:.2e}; max objective gap {objective_gap:.2e}; {stray} of {messages} messages between non-neighbors"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_9_safe_set_monotonicity() {
    let b = bench();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut states = Vec::new();
    let mut rejected = 0;
    while states.len() < 20 {
        // positions across the box and velocities up to the bound, so some
        // samples sit near the edge of the short-horizon safe set
        let mut x = random_initial_positions(&b.model, &mut rng, 0.9);
        for i in 0..b.model.num_subsystems() {
            x[b.model.state_offset(i) + 1] = rng.gen_range(-0.6..0.6);
        }
        if in_safe_set(&b.model, &b.artifacts, &x, 5).unwrap() {
            states.push(x);
        } else {
            rejected += 1;
        }
    }
    let counterexamples = states
        .par_iter()
        .filter(|x| !in_safe_set(&b.model, &b.artifacts, x, 10).unwrap())
        .count();
    let ok = counterexamples == 0;
    report(
        9,
        "safe-set monotonicity",
        ok,
        format!("{counterexamples} of 20 states feasible at N = 5 infeasible at N = 10 ({rejected} samples outside at N = 5)"),
    );
    assert!(ok);
}
