//! Mean-field fixed points and measures against the single-queue CTMC. With
//! one choice for arrivals and repairs every server is an independent queue
//! with breakdowns, so the stationary tails are known exactly.

mod common;

use common::{sup_gap, Ctmc};
use smrepair::fixedpoint::{model1_recursion, solve_fixed_point, solve_fixed_point_with, SolveOptions};
use smrepair::meanfield::{steady_state_with, SteadyStateOptions};
use smrepair::metrics::metrics_from_fixed_point;
use smrepair::{FractionState, Model, ModelConfig};

#[test]
fn single_choice_fixed_points_match_ctmc_at_other_rates() {
    for (lambda, mu, alpha, beta) in [(0.5, 1.0, 0.3, 2.0), (2.0, 4.0, 1.0, 1.5), (6.0, 10.0, 0.5, 4.0)] {
        let (uw, ur) = Ctmc::solve(lambda, mu, alpha, beta, 400).tails();
        for m in Model::ALL {
            let c = ModelConfig::new(m, lambda, mu, alpha, beta, 1, 1);
            let fp = solve_fixed_point(&c, 1e-11).unwrap();
            let gap = sup_gap(&fp.pi_w, &fp.pi_r, &uw, &ur);
            assert!(gap < 1e-7, "{m} {lambda} {mu} {alpha} {beta}: {gap:e}");
        }
    }
}

#[test]
fn model1_recursion_matches_ctmc_for_d1_one() {
    let c = ModelConfig::new(Model::I, 3.0, 9.0, 2.0, 5.0, 1, 1);
    let fp = model1_recursion(&c, 1 << 14, 1e-13).unwrap();
    let (uw, ur) = Ctmc::solve(3.0, 9.0, 2.0, 5.0, 200).tails();
    assert!(sup_gap(&fp.pi_w, &fp.pi_r, &uw, &ur) < 1e-6);
}

#[test]
fn mean_and_variance_match_ctmc() {
    for lambda in [1.0, 3.0, 5.0] {
        let ctmc = Ctmc::solve(lambda, 9.0, 2.0, 5.0, 300);
        let c = ModelConfig::new(Model::I, lambda, 9.0, 2.0, 5.0, 1, 1);
        let m = metrics_from_fixed_point(&solve_fixed_point(&c, 1e-11).unwrap(), &c).unwrap();
        assert!((m.mean_q - ctmc.mean()).abs() < 1e-6, "{} vs {}", m.mean_q, ctmc.mean());
        assert!((m.var_q - ctmc.variance()).abs() < 1e-6, "{} vs {}", m.var_q, ctmc.variance());
        assert!((m.availability - ctmc.pw.iter().sum::<f64>()).abs() < 1e-9);
    }
}

#[test]
fn truncation_insensitivity() {
    for m in Model::ALL {
        let c = ModelConfig::new(m, 4.0, 9.0, 2.0, 5.0, 2, 2);
        let tol = 1e-10;
        let a = steady_state_with(&c, &FractionState::empty(32), tol, &SteadyStateOptions::default()).unwrap();
        let b = steady_state_with(&c, &FractionState::empty(64), tol, &SteadyStateOptions::default()).unwrap();
        assert!(a.state.sup_diff(&b.state) < 10.0 * tol, "{m}");
    }
}

#[test]
fn initial_truncation_option_is_honoured() {
    let c = ModelConfig::new(Model::III, 3.0, 9.0, 2.0, 5.0, 2, 1);
    let mut o = SolveOptions::new(1e-10);
    o.truncation = 8;
    let small = solve_fixed_point_with(&c, &o).unwrap();
    let big = solve_fixed_point(&c, 1e-10).unwrap();
    assert!(small.sup_diff(&big) < 1e-9);
}

#[test]
fn comparative_statics_in_d() {
    // E[Q] nonincreasing in d1 and d2 at moderate load, for every model
    for m in Model::ALL {
        let mut prev = f64::INFINITY;
        for d in 1..=4 {
            let c = ModelConfig::new(m, 3.0, 9.0, 2.0, 5.0, d, d);
            let q = metrics_from_fixed_point(&solve_fixed_point(&c, 1e-10).unwrap(), &c).unwrap().mean_q;
            assert!(q <= prev + 1e-12, "{m} d={d}: {q} > {prev}");
            prev = q;
        }
    }
}
