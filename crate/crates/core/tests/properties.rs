//! Invariants of demand, equilibrium, dynamics, statics and inversion over
//! randomly generated markets.

mod common;

use admissions_core::demand::{demand, demand_in_order, demand_with_weights, verify_equilibrium};
use admissions_core::equilibrium::{adjacent_gap, solve, unclipped_cutoffs};
use admissions_core::inverse::{invert_recursion, invert_rootfind, MarketObservation};
use admissions_core::market::{build_a, sort_by_competitiveness};
use admissions_core::statics::{equilibrium_jacobians, unconstrained_jacobians};
use admissions_core::tatonnement::{da_tatonnement, simultaneous_tatonnement, step_schedule, TatonnementConfig};
use admissions_core::{MarketParams, SortOrder};
use common::max_abs_diff;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn weights(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.2f64..2.0, n)
}

fn market(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = MarketParams> {
    weights(n).prop_flat_map(|g| {
        let n = g.len();
        (Just(g), prop::collection::vec(0.02f64..0.6, n), 0.2f64..2.0)
    })
    .prop_map(|(g, q, load)| {
        let total: f64 = q.iter().sum();
        let q = q.iter().map(|v| v * load / total).collect();
        MarketParams::new(g, q).unwrap()
    })
}

fn weights_and_cutoffs(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    weights(n).prop_flat_map(|g| {
        let n = g.len();
        (Just(g), prop::collection::vec(0.0f64..1.0, n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn closed_form_inverse_matches_numeric(g in weights(1..=50)) {
        let order = SortOrder::ascending_by(&g);
        let m = build_a(&g, &order);
        let numeric = m.a.clone().try_inverse().unwrap();
        let err = (&numeric - &m.a_inv).abs().max();
        prop_assert!(err < 1e-10, "inverse error {err}");
        let id = &m.a * &m.a_inv;
        prop_assert!((id - DMatrix::identity(g.len(), g.len())).abs().max() < 1e-10);
    }

    #[test]
    fn demand_boundary_values(g in weights(1..=12)) {
        let n = g.len();
        let top = demand_with_weights(&g, &vec![1.0; n]).unwrap();
        prop_assert!(top.demand.iter().all(|&d| d.abs() < 1e-15));
        let bottom = demand_with_weights(&g, &vec![0.0; n]).unwrap();
        let total: f64 = g.iter().sum();
        let share: Vec<f64> = g.iter().map(|v| v / total).collect();
        prop_assert!(max_abs_diff(&bottom.demand, &share) < 1e-15);
    }

    #[test]
    fn demand_matches_a_times_p_plus_share((g, p) in weights_and_cutoffs(1..=20)) {
        let order = SortOrder::ascending_by(&p);
        let a = build_a(&g, &order).a;
        let total: f64 = g.iter().sum();
        let ps = nalgebra::DVector::from_vec(order.to_sorted(&p));
        let share = nalgebra::DVector::from_vec(order.to_sorted(&g)) / total;
        let linear = order.to_original((a * ps + share).as_slice());
        let d = demand_with_weights(&g, &p).unwrap().demand;
        prop_assert!(max_abs_diff(&d, &linear) < 1e-12);
    }

    #[test]
    fn demand_normalization_and_appeal_bounds((g, p) in weights_and_cutoffs(1..=20)) {
        let d = demand_with_weights(&g, &p).unwrap();
        prop_assert!((d.total() + d.unassigned - 1.0).abs() < 1e-12);
        let lowest = p.iter().copied().fold(1.0, f64::min);
        prop_assert!((d.unassigned - lowest).abs() < 1e-12);
        for c in 0..g.len() {
            prop_assert!(d.demand[c] >= -1e-15);
            // every enrolled score lies in [p_c, 1]
            prop_assert!(d.appeal[c] >= p[c] * d.demand[c] - 1e-12);
            prop_assert!(d.appeal[c] <= d.demand[c] + 1e-12);
        }
    }

    #[test]
    fn demand_monotone_in_cutoffs((g, p) in weights_and_cutoffs(2..=12), c in 0usize..12, eps in 1e-4f64..0.05) {
        let c = c % g.len();
        prop_assume!(p[c] + eps < 1.0);
        let mut up = p.clone();
        up[c] += eps;
        let before = demand_with_weights(&g, &p).unwrap().demand;
        let after = demand_with_weights(&g, &up).unwrap().demand;
        prop_assert!(after[c] < before[c]);
        for k in 0..g.len() {
            if k != c {
                prop_assert!(after[k] >= before[k] - 1e-15);
            }
        }
    }

    #[test]
    fn demand_lipschitz_across_ties((g, mut p) in weights_and_cutoffs(2..=8), c in 0usize..8, eps in 1e-6f64..1e-3) {
        let c = c % g.len();
        let other = (c + 1) % g.len();
        p[c] = p[other].min(1.0 - 2.0 * eps);
        let mut shifted = p.clone();
        shifted[c] += eps;
        let a = demand_with_weights(&g, &p).unwrap().demand;
        let b = demand_with_weights(&g, &shifted).unwrap().demand;
        prop_assert!(max_abs_diff(&a, &b) <= eps * (1.0 + 1e-9) + 1e-15);
    }

    #[test]
    fn tie_block_order_is_irrelevant(g in weights(2..=7), level in 0.0f64..1.0, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let n = g.len();
        let mut p = vec![level; n];
        p[0] = level * 0.5;
        let base = SortOrder::ascending_by(&p);
        let mut r = common::rng(seed);
        let mut tail = base.as_slice()[1..].to_vec();
        tail.shuffle(&mut r);
        let mut shuffled = vec![base.as_slice()[0]];
        shuffled.extend(tail);
        let order = SortOrder::from_sorted(shuffled).unwrap();
        let x = demand_in_order(&g, &p, &base).unwrap();
        let y = demand_in_order(&g, &p, &order).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn equilibrium_certificate_and_clearing(m in market(1..=20)) {
        let sol = solve(&m);
        let cert = verify_equilibrium(&m, sol.cutoffs(), 1e-10).unwrap();
        prop_assert!(cert.is_equilibrium(), "{cert:?}");
        prop_assert!((sol.demand.total() - m.total_capacity().min(1.0)).abs() < 1e-10);
    }

    #[test]
    fn cutoffs_sorted_by_competitiveness(m in market(1..=20)) {
        let sol = solve(&m);
        let sorted = SortOrder::ascending_by(&m.competitiveness()).to_sorted(sol.cutoffs());
        prop_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn adjacent_gaps_are_nonnegative(m in market(2..=20)) {
        for c in 0..m.n_schools() - 1 {
            prop_assert!(adjacent_gap(&m, c).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn one_tatonnement_step_fixes_equilibrium(m in market(1..=15), alpha in 0.01f64..1.0) {
        let p_star = solve(&m).cutoffs().to_vec();
        let cfg = TatonnementConfig::new(alpha, 0.0, 1e-300, 1, p_star.clone());
        let traj = simultaneous_tatonnement(&m, &cfg).unwrap();
        // the excess at p* is zero up to rounding in the demand sums
        prop_assert!(max_abs_diff(&traj.final_cutoffs, &p_star) < 1e-14);
    }

    #[test]
    fn zero_cutoff_capacity_slack_is_irrelevant(m in market(2..=15), shrink in 0.0f64..1.0) {
        let sol = solve(&m);
        let zero = (0..m.n_schools()).find(|&c| sol.cutoffs()[c] == 0.0 && sol.demand.demand[c] < m.capacity()[c]);
        prop_assume!(zero.is_some());
        let c = zero.unwrap();
        let mut q = m.capacity().to_vec();
        q[c] = sol.demand.demand[c] + shrink * (q[c] - sol.demand.demand[c]);
        let moved = solve(&m.with_capacity(q).unwrap());
        prop_assert!(max_abs_diff(moved.cutoffs(), sol.cutoffs()) < 1e-12);
    }

    #[test]
    fn da_process_is_monotone_and_lands_on_equilibrium(m in market(1..=10)) {
        let n = m.n_schools();
        let p_star = solve(&m).cutoffs().to_vec();
        for (start, rising) in [(0.0, true), (1.0, false)] {
            let traj = da_tatonnement(&m, &vec![start; n], 500).unwrap();
            prop_assert!(traj.converged);
            let mut path: Vec<&[f64]> = traj.iterates.iter().map(|it| it.cutoffs.as_slice()).collect();
            path.push(&traj.final_cutoffs);
            for w in path.windows(2) {
                for c in 0..n {
                    if rising {
                        prop_assert!(w[1][c] >= w[0][c] - 1e-12);
                    } else {
                        prop_assert!(w[1][c] <= w[0][c] + 1e-12);
                    }
                }
            }
            let cert = verify_equilibrium(&m, &traj.final_cutoffs, 1e-9).unwrap();
            prop_assert!(cert.max_violation() < 1e-9, "{cert:?}");
            prop_assert!(max_abs_diff(&traj.final_cutoffs, &p_star) < 1e-9);
        }
    }

    #[test]
    fn scaling_weights_changes_nothing(m in market(1..=15), k in 0.01f64..100.0) {
        let scaled = m.scaled(k).unwrap();
        prop_assert!(max_abs_diff(solve(&m).cutoffs(), solve(&scaled).cutoffs()) < 1e-12);
        let p = solve(&m).cutoffs().to_vec();
        let d = demand(&m, &p).unwrap().demand;
        let ds = demand(&scaled, &p).unwrap().demand;
        prop_assert!(max_abs_diff(&d, &ds) < 1e-14);
    }

    #[test]
    fn statics_structure(m in market(1..=15)) {
        let order = sort_by_competitiveness(&m);
        let p_bar = unclipped_cutoffs(&m, &order);
        prop_assume!(p_bar.iter().all(|v| v.abs() > 1e-6));
        let sol = solve(&m);
        let u = unconstrained_jacobians(&m, sol.cutoffs()).unwrap();
        let a = build_a(m.gamma(), &SortOrder::ascending_by(sol.cutoffs()));
        prop_assert_eq!(&u.cutoff_demand, &a.order.matrix_to_original(&a.a));

        let e = equilibrium_jacobians(&m).unwrap();
        let wc = DMatrix::from_fn(m.n_schools(), m.n_schools(), |i, j| {
            e.weight_cutoff[(order.school(i), order.school(j))]
        });
        for i in 0..m.n_schools() {
            for j in (i + 1)..m.n_schools() {
                prop_assert_eq!(wc[(i, j)], 0.0);
            }
        }
        prop_assert!(wc.row(0).iter().all(|&v| v == 0.0));
        for c in 0..m.n_schools() {
            if sol.cutoffs()[c] > 0.0 {
                prop_assert!(e.weight_demand.row(c).iter().all(|&v| v == 0.0));
            } else {
                prop_assert!(e.weight_cutoff.row(c).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn inversion_is_scale_invariant((g, p) in weights_and_cutoffs(1..=12), k in 0.01f64..100.0) {
        let mut sorted = p.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-3));
        let scaled: Vec<f64> = g.iter().map(|v| v * k).collect();
        let obs = MarketObservation::unlabeled(p.clone(), demand_with_weights(&g, &p).unwrap().demand).unwrap();
        let obs_k = MarketObservation::unlabeled(p.clone(), demand_with_weights(&scaled, &p).unwrap().demand).unwrap();
        let a = invert_recursion(&obs).unwrap().gamma;
        let b = invert_recursion(&obs_k).unwrap().gamma;
        prop_assert!(max_abs_diff(&a, &b) < 1e-12);
        let c = invert_rootfind(&obs_k).unwrap().gamma;
        prop_assert!(max_abs_diff(&a, &c) < 1e-10);
    }
}

#[test]
fn step_schedule_diverges() {
    let partial: f64 = step_schedule(0.2, 0.99).take(1_000_000).sum();
    // alpha * sum k^-0.99 grows without bound; the first 10^6 terms exceed 2.
    assert!(partial > 2.0, "partial sum {partial}");
    let slower: f64 = step_schedule(0.2, 0.5).take(10_000).sum();
    assert!(slower > 0.2 * 2.0 * (10_000f64.sqrt() - 1.0));
}

#[test]
fn two_school_fixture_separates_weights_not_true_yields() {
    let obs = MarketObservation::unlabeled(vec![0.0, 0.99], vec![100.0 / 101.0, 1.0 / 101.0]).unwrap();
    let est = invert_recursion(&obs).unwrap();
    assert!(max_abs_diff(&est.true_yield, &[100.0 / 101.0, 100.0 / 101.0]) < 1e-12);
    assert!(max_abs_diff(&est.gamma, &[1.0 / 101.0, 100.0 / 101.0]) < 1e-12);
}

#[test]
fn pallet_cutoff_jacobian_is_not_symmetric() {
    let m = MarketParams::pallet_town();
    let u = unconstrained_jacobians(&m, &[0.2, 0.3, 0.4, 0.6]).unwrap();
    let a = &u.cutoff_demand;
    let asym = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).any(|(i, j)| (a[(i, j)] - a[(j, i)]).abs() > 1e-9);
    assert!(asym);
}
