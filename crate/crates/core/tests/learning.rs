mod common;

use common::{bundled, Setup};
use measure_mdp::dissimilarity::Dissimilarity;
use measure_mdp::dissipativity::{ClassKInf, C_MIN};
use measure_mdp::functionals::solve_optimal_linear;
use measure_mdp::learning::{
    exact_q_sweep, fitted_q_learning, theta_from_learned, LearningConfig, LearningStatus, LiftConfig, QParameterization,
};
use measure_mdp::ocp::{check_theorem4, q_theta, Theorem4Config};
use measure_mdp::{FiniteMdp, Measure};

fn config_file() -> LearningConfig {
    let path = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../cli/examples/learning_config.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn tabular_learning_reaches_optimal_values_on_three_state_instance() {
    let start = std::time::Instant::now();
    let mdp = bundled("three_state.json");
    let sol = solve_optimal_linear(&mdp).unwrap();
    let config = config_file();
    assert!(config.n_episodes <= 2000);
    let out = fitted_q_learning(&mdp, &QParameterization::tabular_zero(3, 2), &config, Some(&sol)).unwrap();
    assert_eq!(out.status, LearningStatus::Converged);
    assert!(out.unvisited.is_empty());
    assert!(sup(&out.param.q_table(), &sol.q_star) < 1e-3, "{}", out.final_error);
    assert_eq!(out.param.greedy_policy(), sol.pi_star);
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn learning_is_deterministic_per_seed() {
    let mdp = bundled("three_state.json");
    let config = LearningConfig { n_episodes: 200, ..config_file() };
    let a = fitted_q_learning(&mdp, &QParameterization::tabular_zero(3, 2), &config, None).unwrap();
    let b = fitted_q_learning(&mdp, &QParameterization::tabular_zero(3, 2), &config, None).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn one_hot_features_track_the_tabular_run() {
    let mdp = FiniteMdp::random(3, 2, 0.9, 21).unwrap();
    let config = LearningConfig { n_episodes: 300, ..config_file() };
    let tab = fitted_q_learning(&mdp, &QParameterization::tabular_zero(3, 2), &config, None).unwrap();
    let hot = fitted_q_learning(&mdp, &QParameterization::one_hot(3, 2, vec![0.0; 6]).unwrap(), &config, None).unwrap();
    assert!(sup(&tab.param.q_table(), &hot.param.q_table()) <= 1e-9);
}

#[test]
fn exact_sweep_contraction_factor_is_at_most_gamma() {
    for seed in 0..5 {
        let mdp = FiniteMdp::random(4, 3, 0.9, seed).unwrap();
        let sol = solve_optimal_linear(&mdp).unwrap();
        let mut q = vec![0.0; 12];
        for _ in 0..100 {
            let before = sup(&q, &sol.q_star);
            q = exact_q_sweep(&mdp, &q);
            assert!(sup(&q, &sol.q_star) <= mdp.gamma() * before + 1e-12);
        }
    }
}

#[test]
fn lifting_optimal_table_yields_admissible_parameters() {
    let setup = Setup::new(bundled("dissipative.json"));
    let tv = Dissimilarity::TotalVariation;
    let raw = solve_optimal_linear(&setup.mdp).unwrap();
    let learned = QParameterization::tabular(3, 2, raw.q_star.clone()).unwrap();
    let lift = theta_from_learned(&setup.mdp, &setup.stage, &learned, &setup.steady, &tv, &LiftConfig::default()).unwrap();
    assert!(lift.report.accepted, "{:?}", lift.report.reasons);
    assert!(lift.report.dirac_residual <= 1e-8);
    for s in 0..3 {
        for pi in setup.mdp.policy_space().enumerate(64).unwrap() {
            let q = q_theta(&setup.mdp, &lift.theta, &Measure::dirac(s, 3).unwrap(), &pi, 64).unwrap();
            assert!((q - setup.solution.q(s, pi.action(s))).abs() <= 1e-8);
        }
    }
    let alpha0 = ClassKInf::linear(C_MIN).unwrap();
    let report = check_theorem4(
        &setup.mdp,
        &setup.stage,
        &lift.theta,
        &setup.solution,
        &setup.steady,
        &tv,
        &alpha0,
        &Theorem4Config { n_samples: 100, ..Default::default() },
    )
    .unwrap();
    assert!(report.conclusion, "{:?}", report.failures);
}

#[test]
fn untrained_values_are_rejected() {
    let setup = Setup::new(bundled("dissipative.json"));
    let lift = theta_from_learned(
        &setup.mdp,
        &setup.stage,
        &QParameterization::tabular_zero(3, 2),
        &setup.steady,
        &Dissimilarity::TotalVariation,
        &LiftConfig::default(),
    )
    .unwrap();
    assert!(!lift.report.accepted);
    assert!(!lift.report.reasons.is_empty());
}
