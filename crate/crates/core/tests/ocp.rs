mod common;

use std::sync::Arc;

use common::{bundled, Setup};
use measure_mdp::dissimilarity::Dissimilarity;
use measure_mdp::dissipativity::{CertificateStatus, ClassKInf, SynthesisConfig, C_MIN};
use measure_mdp::functionals::q_functional;
use measure_mdp::ocp::{
    check_theorem3, check_theorem3_with, check_theorem4, exactness_construction, finite_horizon_value, psi_theta,
    psi_theta_direct, q_theta, theta_star, theta_value, FiniteHorizonOcp, Theorem4Config, ThetaParameters,
};
use measure_mdp::rng::random_measures;
use measure_mdp::{FiniteMdp, Measure, ValueFunctional};

const CAP: usize = 4096;

#[test]
fn exactness_identities_on_seeded_instances() {
    for (seed, gamma) in [(1, 0.8), (2, 0.9), (3, 0.99)] {
        let setup = Setup::new(FiniteMdp::random(3, 2, gamma, seed).unwrap());
        let report = check_theorem3(&setup.mdp, &setup.stage, &setup.solution, 5, seed, CAP).unwrap();
        assert!(report.passed(), "seed {seed}: {:?}", report.violations);
        assert_eq!(report.horizons.len(), 5);
    }
}

#[test]
fn exactness_check_flags_corrupted_terminal() {
    let setup = Setup::new(FiniteMdp::random(3, 2, 0.9, 11).unwrap());
    let stage = setup.stage.clone();
    let report = check_theorem3_with(&setup.mdp, &setup.solution, 4, 0, CAP, |n| {
        let exact = exactness_construction(&setup.solution, &setup.mdp, &stage, n)?;
        let sol = setup.solution.clone();
        FiniteHorizonOcp::new(n, Arc::new(move |r: &Measure| sol.value(r) + r[0]), exact.stage)
    })
    .unwrap();
    assert!(!report.passed());
    assert!(report.violations.iter().any(|v| v.contains("differs from V*")));
    assert!(report.horizons.iter().all(|h| h.max_value_gap > 1e-3));
}

#[test]
fn zero_cost_exactness_is_trivial() {
    let base = FiniteMdp::random(3, 2, 0.9, 4).unwrap().to_file();
    let setup = Setup::new(FiniteMdp::new(base.transition, vec![vec![0.0; 2]; 3], 0.9).unwrap());
    let report = check_theorem3(&setup.mdp, &setup.stage, &setup.solution, 3, 0, CAP).unwrap();
    assert!(report.passed());
    assert!(report.horizons.iter().all(|h| h.max_value_gap == 0.0 && h.max_q_gap == 0.0));
}

#[test]
fn exact_stage_near_original_cost_as_gamma_approaches_one() {
    let base = FiniteMdp::random(3, 2, 0.9, 6).unwrap().to_file();
    let setup = Setup::new(FiniteMdp::new(base.transition, base.cost, 0.999_999).unwrap());
    let ocp = exactness_construction(&setup.solution, &setup.mdp, &setup.stage, 1).unwrap();
    let pi = &setup.solution.pi_star;
    let v_scale = setup.solution.v_star.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    for rho in random_measures(2, 0, 3, 20) {
        let gap = ((ocp.stage)(&rho, pi) - setup.stage.eval(&rho, pi)).abs();
        assert!(gap <= 1e-4 * v_scale.max(1e-12), "{gap}");
    }
}

fn certified_theta(horizon: usize) -> (Setup, ThetaParameters, ClassKInf) {
    let setup = Setup::new(bundled("dissipative.json"));
    let tv = Dissimilarity::TotalVariation;
    let cert = setup.certify(&tv, &SynthesisConfig::default());
    assert_eq!(cert.status, CertificateStatus::Certified);
    let theta = theta_star(&setup.mdp, &setup.stage, &setup.solution, &cert.storage, &setup.steady, &tv, horizon).unwrap();
    (setup, theta, cert.alpha)
}

#[test]
fn theta_star_reproduces_optimal_values() {
    for horizon in 1..=3 {
        let (setup, theta, _) = certified_theta(horizon);
        let policies = setup.mdp.policy_space().enumerate(CAP).unwrap();
        for rho in random_measures(5, 1, 3, 15) {
            let (v, pi) = theta_value(&setup.mdp, &theta, &rho, CAP).unwrap();
            assert!((v - setup.solution.value(&rho)).abs() <= 1e-8);
            assert_eq!(pi, setup.solution.pi_star);
            let mut q_min = f64::INFINITY;
            for p in &policies {
                let qt = q_theta(&setup.mdp, &theta, &rho, p, CAP).unwrap();
                let qs = q_functional(&setup.mdp, &setup.stage, &setup.solution, &rho, p).unwrap();
                assert!((qt - qs).abs() <= 1e-7, "{qt} vs {qs}");
                q_min = q_min.min(qt);
            }
            assert!((q_min - v).abs() <= 1e-8, "Bellman consistency {q_min} vs {v}");
        }
    }
}

#[test]
fn psi_routes_agree_and_are_nonnegative() {
    let (setup, theta, _) = certified_theta(2);
    for rho in random_measures(9, 0, 3, 50) {
        let a = psi_theta(&setup.mdp, &theta, &rho, CAP).unwrap();
        let b = psi_theta_direct(&setup.mdp, &theta, &rho, CAP).unwrap();
        assert!((a - b).abs() <= 1e-9);
        assert!(b >= -1e-9);
    }
}

#[test]
fn storage_shift_leaves_policy_unchanged() {
    let (setup, theta, _) = certified_theta(2);
    let mut shifted = theta.clone();
    shifted.lambda_w.iter_mut().for_each(|w| *w += 3.0);
    for rho in random_measures(10, 0, 3, 20) {
        let (v0, p0) = theta_value(&setup.mdp, &theta, &rho, CAP).unwrap();
        let (v1, p1) = theta_value(&setup.mdp, &shifted, &rho, CAP).unwrap();
        assert_eq!(p0, p1);
        assert!((v0 - (v1 + 3.0)).abs() <= 1e-12);
    }
    let mut tilted = theta.clone();
    tilted.lambda_w = vec![5.0, -2.0, 1.0];
    for rho in random_measures(11, 0, 3, 20) {
        assert_eq!(theta_value(&setup.mdp, &theta, &rho, CAP).unwrap().1, theta_value(&setup.mdp, &tilted, &rho, CAP).unwrap().1);
    }
}

#[test]
fn parameterized_pipeline_passes_on_certified_instance() {
    let (setup, theta, alpha) = certified_theta(3);
    let tv = Dissimilarity::TotalVariation;
    let report = check_theorem4(
        &setup.mdp,
        &setup.stage,
        &theta,
        &setup.solution,
        &setup.steady,
        &tv,
        &alpha,
        &Theorem4Config::default(),
    )
    .unwrap();
    assert!(report.conclusion, "{:?}", report.failures);
    assert!(report.terminal_nonnegative.passed && report.q_consistency.passed && report.stage_lower_bound.passed);
    assert!(report.fsdsd.as_ref().unwrap().worst >= -1e-8);
    assert!(report.psi_min >= -1e-9);
}

#[test]
fn parameterized_audit_flags_stage_bound_violation() {
    let (setup, mut theta, alpha) = certified_theta(2);
    theta.stage_table[1][0] -= 5.0;
    let tv = Dissimilarity::TotalVariation;
    let report = check_theorem4(
        &setup.mdp,
        &setup.stage,
        &theta,
        &setup.solution,
        &setup.steady,
        &tv,
        &alpha,
        &Theorem4Config::default(),
    )
    .unwrap();
    assert!(!report.stage_lower_bound.passed);
    assert!(!report.conclusion);
    assert!(report.fsdsd.is_none());
}

#[test]
fn zero_cost_instance_fails_the_alpha_floor() {
    let base = FiniteMdp::random(3, 2, 0.9, 4).unwrap().to_file();
    let setup = Setup::new(FiniteMdp::new(base.transition, vec![vec![0.0; 2]; 3], 0.9).unwrap());
    let tv = Dissimilarity::TotalVariation;
    let zero = measure_mdp::dissipativity::StorageFunctional::zero(3);
    let theta = theta_star(&setup.mdp, &setup.stage, &setup.solution, &zero, &setup.steady, &tv, 1).unwrap();
    let alpha0 = ClassKInf::linear(C_MIN).unwrap();
    let report = check_theorem4(
        &setup.mdp,
        &setup.stage,
        &theta,
        &setup.solution,
        &setup.steady,
        &tv,
        &alpha0,
        &Theorem4Config { n_samples: 20, ..Default::default() },
    )
    .unwrap();
    assert!(!report.stage_lower_bound.passed);
    assert!(!report.conclusion);
}

#[test]
fn finite_horizon_without_terminal_accumulates_stage_costs() {
    // Absorbing chain: state 1 is absorbing and free, state 0 costs 1 and moves to 1.
    let mdp = FiniteMdp::new(vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]], vec![vec![1.0], vec![0.0]], 0.9).unwrap();
    let m = mdp.clone();
    let ocp = FiniteHorizonOcp::new(
        10,
        Arc::new(|_| 0.0),
        Arc::new(move |r: &Measure, p| r.weights().iter().enumerate().map(|(s, w)| w * m.cost(s, p.action(s))).sum()),
    )
    .unwrap();
    let (v, _) = finite_horizon_value(&mdp, &ocp, &Measure::dirac(0, 2).unwrap(), CAP).unwrap();
    assert_eq!(v, 1.0);
}
