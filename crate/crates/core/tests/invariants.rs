//! Property tests on sets, tightening, negotiation and the model file.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use dmpsc::bench::stage_cost;
use dmpsc::certifier::NegotiationRows;
use dmpsc::netmodel::{build_chain_benchmark, ChainParams, NetworkModel, Polytope};
use dmpsc::tube::{support, tighten_polytope};

fn box_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..4).prop_flat_map(|d| {
        (
            prop::collection::vec(-3.0..-0.5f64, d),
            prop::collection::vec(0.5..3.0f64, d),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tightened_box_plus_ellipsoid_stays_in_box(
        (lo, hi) in box_strategy(),
        radius in 0.01..0.4f64,
        t in prop::collection::vec(-1.0..1.0f64, 3),
        dir in prop::collection::vec(-1.0..1.0f64, 3),
    ) {
        let d = lo.len();
        let set = Polytope::from_bounds(&lo, &hi).unwrap();
        let inverse = DMatrix::identity(d, d) * (radius * radius);
        let tight = tighten_polytope(&set, &DMatrix::identity(d, d), &inverse, "box").unwrap();
        // a point of the tightened box
        let z = DVector::from_fn(d, |k, _| {
            let s = (t[k] + 1.0) / 2.0;
            (lo[k] + radius) + s * (hi[k] - lo[k] - 2.0 * radius)
        });
        prop_assert!(tight.contains(&z, 1e-9));
        // a point of the ball
        let mut e = DVector::from_fn(d, |k, _| dir[k]);
        let n = e.norm();
        if n > 0.0 { e *= radius / n; }
        prop_assert!(set.contains(&(z + e), 1e-9));
    }

    #[test]
    fn support_is_attained_on_the_boundary(c in prop::collection::vec(-2.0..2.0f64, 2), a in 0.1..3.0f64, b in 0.1..3.0f64) {
        let c = DVector::from_vec(c);
        let inverse = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / a, 1.0 / b]));
        let h = support(&c, &inverse);
        // maximizer e* = P⁻¹c / h
        if h > 1e-9 {
            let e = &inverse * &c / h;
            prop_assert!((c.dot(&e) - h).abs() <= 1e-9 * h.max(1.0));
            prop_assert!((a * e[0] * e[0] + b * e[1] * e[1] - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn negotiation_null_space_sums_to_zero_on_paths_and_cycles(n in 3usize..12, cycle in any::<bool>(), seed in any::<u64>()) {
        let nb: Vec<Vec<usize>> = (0..n).map(|i| {
            let mut v = vec![i];
            if i > 0 { v.push(i - 1); }
            if i + 1 < n { v.push(i + 1); }
            if cycle && i == 0 { v.push(n - 1); }
            if cycle && i == n - 1 { v.push(0); }
            v.sort();
            v.dedup();
            v
        }).collect();
        let m = NegotiationRows::new(&nb).matrix(n);
        let eig = (m.transpose() * &m).symmetric_eigen();
        let mut state = seed;
        for k in 0..n {
            if eig.eigenvalues[k] <= 1e-12 {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                let col = eig.eigenvectors.column(k) * ((state >> 11) as f64 / (1u64 << 53) as f64);
                prop_assert!(col.sum().abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn stage_cost_is_nonnegative_and_quadratic(x in prop::collection::vec(-5.0..5.0f64, 1..6), u in prop::collection::vec(-5.0..5.0f64, 1..3), s in -3.0..3.0f64) {
        let x = DVector::from_vec(x);
        let u = DVector::from_vec(u);
        let l = stage_cost(&x, &u);
        prop_assert!(l >= 0.0);
        prop_assert!((stage_cost(&(&x * s), &(&u * s)) - s * s * l).abs() <= 1e-12 * (1.0 + s * s * l));
    }

    #[test]
    fn chain_models_round_trip_through_json(masses in 1usize..6, spring in 0.0..0.5f64, damper in 0.0..0.5f64) {
        let params = ChainParams { masses, spring, damper, position_override: None, ..ChainParams::benchmark() };
        let model = build_chain_benchmark(&params).unwrap();
        let back = NetworkModel::from_json_str(&model.to_json_string().unwrap()).unwrap();
        prop_assert_eq!(back.global_dynamics(), model.global_dynamics());
        prop_assert_eq!(back.global_state_constraints(), model.global_state_constraints());
        prop_assert_eq!(back.neighborhoods(), model.neighborhoods());
    }
}
