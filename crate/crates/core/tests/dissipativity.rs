mod common;

use common::{bundled, Setup};
use measure_mdp::dissimilarity::Dissimilarity;
use measure_mdp::dissipativity::{
    check_lyapunov, check_theorem1, rotated_cost, CertificateStatus, ClassKInf, LyapunovConfig, StorageFunctional,
    SynthesisConfig, AUDIT_TOL,
};
use measure_mdp::functionals::discounted_rollout;
use measure_mdp::rng::random_measures;
use measure_mdp::{DeterministicPolicy, FiniteMdp, Measure, DEFAULT_POLICY_CAP};

fn audit_min(setup: &Setup, dissim: &Dissimilarity, storage: &StorageFunctional, alpha: &ClassKInf, seed: u64, count: usize) -> f64 {
    let problem = setup.problem(dissim);
    let policies = setup.mdp.policy_space().enumerate(DEFAULT_POLICY_CAP).unwrap();
    let mut worst = f64::INFINITY;
    for rho in random_measures(seed, 77, setup.mdp.n_states(), count) {
        for pi in &policies {
            let (ra, rb) = problem.residuals(storage, alpha, &rho, pi).unwrap();
            worst = worst.min(ra).min(rb);
        }
    }
    worst
}

#[test]
fn dissipative_instance_is_certified_and_sound() {
    let setup = Setup::new(bundled("dissipative.json"));
    let tv = Dissimilarity::TotalVariation;
    let cert = setup.certify(&tv, &SynthesisConfig::default());
    assert_eq!(cert.status, CertificateStatus::Certified);
    assert!(cert.margin >= 0.0, "margin {}", cert.margin);
    assert!(cert.alpha.c >= 1e-6);
    assert!(cert.storage.eval(&setup.steady.rho_star).abs() <= 1e-12);
    let fresh = audit_min(&setup, &tv, &cert.storage, &cert.alpha, 12345, 10_000);
    assert!(fresh >= -AUDIT_TOL, "fresh audit min {fresh}");
}

#[test]
fn rotated_cost_dominates_alpha_under_certificate() {
    let setup = Setup::new(bundled("dissipative.json"));
    let tv = Dissimilarity::TotalVariation;
    let cert = setup.certify(&tv, &SynthesisConfig::default());
    for rho in random_measures(3, 9, 3, 500) {
        for pi in setup.mdp.policy_space().enumerate(64).unwrap() {
            let lhs = rotated_cost(&setup.stage, &cert.storage, &setup.mdp, &rho, &pi).unwrap();
            let rhs = cert.alpha.eval(tv.eval(&rho, &setup.steady.rho_star).unwrap());
            assert!(lhs >= rhs - 1e-9, "{lhs} < {rhs}");
        }
    }
}

#[test]
fn zero_storage_is_not_enough_for_the_dissipative_instance() {
    let setup = Setup::new(bundled("dissipative.json"));
    let tv = Dissimilarity::TotalVariation;
    let cert = setup.certify(&tv, &SynthesisConfig::default());
    assert!(cert.storage.linear_weights.iter().any(|w| w.abs() > 1e-6));
    let zero = audit_min(&setup, &tv, &StorageFunctional::zero(3), &ClassKInf::linear(1e-6).unwrap(), 1, 200);
    assert!(zero < 0.0);
}

#[test]
fn anti_dissipative_instance_is_rejected_with_violating_pair() {
    let setup = Setup::new(bundled("anti_dissipative.json"));
    let tv = Dissimilarity::TotalVariation;
    let cert = setup.certify(&tv, &SynthesisConfig::default());
    assert_eq!(cert.status, CertificateStatus::NotCertified);
    let w = &cert.worst_point;
    assert!(w.r_a.min(w.r_b) < 0.0);
    let (ra, rb) = setup.problem(&tv).residuals(&cert.storage, &cert.alpha, &w.rho, &w.policy).unwrap();
    assert_eq!((ra, rb), (w.r_a, w.r_b));
}

#[test]
fn absorbing_instance_certifies_with_zero_storage_admissible() {
    // Every action leads to state 0, which is free; other states cost 1.
    let mdp = FiniteMdp::new(
        vec![
            vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]],
            vec![vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.0]],
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]],
        ],
        vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0]],
        0.9,
    )
    .unwrap();
    let setup = Setup::new(mdp);
    let tv = Dissimilarity::TotalVariation;
    let cert = setup.certify(&tv, &SynthesisConfig { n_samples: 200, ..Default::default() });
    assert_eq!(cert.status, CertificateStatus::Certified);
    assert!(cert.margin >= 0.0);
    let zero_min = audit_min(&setup, &tv, &StorageFunctional::zero(3), &ClassKInf::linear(1e-6).unwrap(), 2, 500);
    assert!(zero_min >= -1e-12);
}

#[test]
fn certificates_are_deterministic() {
    let setup = Setup::new(bundled("dissipative.json"));
    let tv = Dissimilarity::TotalVariation;
    let config = SynthesisConfig { n_samples: 300, seed: 42, ..Default::default() };
    let a = serde_json::to_string(&setup.certify(&tv, &config)).unwrap();
    let b = serde_json::to_string(&setup.certify(&tv, &config)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn quadratic_storage_also_certifies() {
    let setup = Setup::new(bundled("dissipative.json"));
    let tv = Dissimilarity::TotalVariation;
    let cert = setup.certify(&tv, &SynthesisConfig { n_samples: 300, use_quadratic: true, ..Default::default() });
    assert_ne!(cert.status, CertificateStatus::NotCertified);
    assert!(cert.storage.quadratic_weights.is_some());
}

#[test]
fn rotated_value_matches_rotated_rollout() {
    let setup = Setup::new(bundled("dissipative.json"));
    let tv = Dissimilarity::TotalVariation;
    let cert = setup.certify(&tv, &SynthesisConfig::default());
    let problem = setup.problem(&tv);
    let pi = &setup.solution.pi_star;
    for rho in random_measures(8, 0, 3, 20) {
        let gamma = setup.mdp.gamma();
        let roll = discounted_rollout(&setup.mdp, pi, &rho, 1e-10, 10.0, |r| {
            let next = setup.mdp.apply_transition(pi, r).unwrap();
            setup.stage.eval(r, pi) - gamma * cert.storage.eval(&next) + cert.storage.eval(r)
        })
        .unwrap();
        assert!((roll.value - problem.rotated_value(&cert.storage, &rho)).abs() <= 1e-7);
    }
}

#[test]
fn telescoping_and_lyapunov_on_certified_instance() {
    let setup = Setup::new(bundled("dissipative.json"));
    let tv = Dissimilarity::TotalVariation;
    let cert = setup.certify(&tv, &SynthesisConfig::default());
    let t1 = check_theorem1(
        &setup.mdp,
        &setup.stage,
        &setup.solution,
        &cert.storage,
        Some(&setup.solution.pi_star),
        30,
        4,
        DEFAULT_POLICY_CAP,
    )
    .unwrap();
    assert!(t1.passed(), "{:?}", t1.violations);

    let pi = setup.solution.pi_star.clone();
    let report = check_lyapunov(
        &setup.problem(&tv),
        &cert.storage,
        &cert.alpha,
        &|_: &Measure| Ok::<DeterministicPolicy, measure_mdp::Error>(pi.clone()),
        &LyapunovConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.violations);
    assert_eq!(report.descent_violations, 0);
    assert!(report.max_final_dissimilarity < 1e-6);
    assert!(report.alpha1.is_some());
}
