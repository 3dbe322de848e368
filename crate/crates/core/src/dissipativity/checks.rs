use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dissimilarity::Dissimilarity;
use crate::error::{Error, Result};
use crate::functionals::{argmin_with_ties, StageCostFunctional, ValueFunctional};
use crate::mdp::{DeterministicPolicy, FiniteMdp};
use crate::measure::Measure;
use crate::rng::{random_measure, random_measures, rng_for, stream};

use super::{rotated_value, ClassKInf, DissipativityProblem, StorageFunctional, AUDIT_TOL};

const TELESCOPING_TOL: f64 = 1e-7;
const ROLLOUT_TOL: f64 = 1e-10;
const ASYMPTOTIC_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub n_test: usize,
    /// `max |J_rot - J - lambda[rho0]|` over every tested measure and policy.
    pub max_telescoping_gap: f64,
    /// `max |min_pi J_rot - (V*[rho0] + lambda[rho0])|`.
    pub max_value_gap: f64,
    /// Test indices where the rotated argmin differs from the original one.
    pub policy_mismatches: Vec<usize>,
    /// Test indices where the rotated argmin differs from the supplied `pi*`
    /// (empty when none was supplied).
    pub reference_policy_mismatches: Vec<usize>,
    pub violations: Vec<String>,
}

impl Theorem1Report {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Original and rotated discounted sums over the same horizon.
fn paired_rollout(
    mdp: &FiniteMdp,
    stage: &StageCostFunctional,
    storage: &StorageFunctional,
    policy: &DeterministicPolicy,
    rho0: &Measure,
    steps: usize,
) -> (f64, f64) {
    let gamma = mdp.gamma();
    let mut rho = rho0.clone();
    let mut discount = 1.0;
    let (mut original, mut rotated) = (0.0, 0.0);
    let mut lam = storage.eval(&rho);
    for _ in 0..steps {
        let next = mdp.propagate(policy, &rho);
        let lam_next = storage.eval(&next);
        let cost = stage.eval(&rho, policy);
        original += discount * cost;
        rotated += discount * (cost - gamma * lam_next + lam);
        discount *= gamma;
        rho = next;
        lam = lam_next;
    }
    (original, rotated)
}

/// Horizon after which both discounted tails are below `tol`.
fn rollout_horizon(gamma: f64, bound: f64, tol: f64) -> usize {
    if bound <= 0.0 {
        return 1;
    }
    let n = ((tol * (1.0 - gamma) / bound).ln() / gamma.ln()).ceil();
    (n.max(1.0) as usize).saturating_add(1)
}

/// Verifies that rotating the stage cost keeps the optimal policy and shifts
/// the optimal value by exactly `lambda[rho0]`.
///
/// For `n_test` seeded random initial measures every enumerated policy is
/// rolled out under the original and the rotated stage cost on the same
/// horizon. Only boundedness of the storage is required for these identities.
#[allow(clippy::too_many_arguments)]
pub fn check_theorem1(
    mdp: &FiniteMdp,
    stage: &StageCostFunctional,
    value: &dyn ValueFunctional,
    storage: &StorageFunctional,
    reference_policy: Option<&DeterministicPolicy>,
    n_test: usize,
    seed: u64,
    cap: usize,
) -> Result<Theorem1Report> {
    let space = mdp.policy_space();
    let count = space.checked_count(cap)?;
    let gamma = mdp.gamma();
    let bound = stage.magnitude_bound() + (1.0 + gamma) * storage.magnitude_bound();
    let steps = rollout_horizon(gamma, 2.0 * bound, ROLLOUT_TOL);
    let measures = random_measures(seed, stream::IDENTITY_CHECK, mdp.n_states(), n_test);

    let mut report = Theorem1Report {
        n_test,
        max_telescoping_gap: 0.0,
        max_value_gap: 0.0,
        policy_mismatches: Vec::new(),
        reference_policy_mismatches: Vec::new(),
        violations: Vec::new(),
    };
    for (i, rho0) in measures.iter().enumerate() {
        let sums: Vec<(f64, f64)> = (0..count)
            .into_par_iter()
            .map(|k| paired_rollout(mdp, stage, storage, &space.policy(k), rho0, steps))
            .collect();
        let lam0 = storage.eval(rho0);
        let scale = 1.0 + lam0.abs();
        for (k, (j, jr)) in sums.iter().enumerate() {
            let gap = (jr - j - lam0).abs();
            report.max_telescoping_gap = report.max_telescoping_gap.max(gap);
            if gap > TELESCOPING_TOL * scale {
                report
                    .violations
                    .push(format!("telescoping gap {gap:e} at test {i}, policy {}", space.policy(k)));
            }
        }
        let originals: Vec<f64> = sums.iter().map(|s| s.0).collect();
        let rotated: Vec<f64> = sums.iter().map(|s| s.1).collect();
        let best_rot = argmin_with_ties(&rotated);
        let best_orig = argmin_with_ties(&originals);
        if best_rot != best_orig {
            report.policy_mismatches.push(i);
            report.violations.push(format!(
                "test {i}: rotated argmin {} differs from original argmin {}",
                space.policy(best_rot),
                space.policy(best_orig)
            ));
        }
        if let Some(pi) = reference_policy {
            if space.policy(best_rot) != *pi {
                report.reference_policy_mismatches.push(i);
                report
                    .violations
                    .push(format!("test {i}: rotated argmin {} differs from pi* {pi}", space.policy(best_rot)));
            }
        }
        let expected = rotated_value(value, storage, rho0);
        let gap = (rotated[best_rot] - expected).abs();
        report.max_value_gap = report.max_value_gap.max(gap);
        if gap > TELESCOPING_TOL * (1.0 + expected.abs()) {
            report.violations.push(format!("test {i}: rotated optimum off V* + lambda by {gap:e}"));
        }
    }
    Ok(report)
}

/// A closed-loop measure trajectory with its distance to `rho*` and the
/// rotated value along the way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureTrajectory {
    pub measures: Vec<Measure>,
    pub dissimilarities: Vec<f64>,
    pub lyapunov: Vec<f64>,
}

impl MeasureTrajectory {
    pub fn len(&self) -> usize {
        self.measures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measures.is_empty()
    }
}

/// Simulates `steps` transitions of `rho_{k+1} = T_pi rho_k`.
pub fn simulate_measure_trajectory(
    problem: &DissipativityProblem<'_>,
    storage: &StorageFunctional,
    policy: &DeterministicPolicy,
    rho0: &Measure,
    steps: usize,
) -> Result<MeasureTrajectory> {
    policy.check(problem.mdp)?;
    problem.mdp.check_measure(rho0)?;
    let mut measures = Vec::with_capacity(steps + 1);
    measures.push(rho0.clone());
    for k in 0..steps {
        let next = problem.mdp.propagate(policy, &measures[k]);
        measures.push(next);
    }
    let dissimilarities = measures.iter().map(|m| problem.distance_to_steady(m)).collect::<Result<_>>()?;
    let lyapunov = measures.iter().map(|m| problem.rotated_value(storage, m)).collect();
    Ok(MeasureTrajectory { measures, dissimilarities, lyapunov })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovConfig {
    pub n_trajectories: usize,
    pub steps: usize,
    pub seed: u64,
    /// Extra random measures used when fitting the upper envelope.
    pub envelope_samples: usize,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        LyapunovConfig { n_trajectories: 20, steps: 200, seed: 0, envelope_samples: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    /// Fitted `alpha_1(x) = c_1 x`; absent when no finite slope exists.
    pub alpha1: Option<ClassKInf>,
    pub upper_bound_holds: bool,
    pub lower_bound_violations: usize,
    pub descent_violations: usize,
    /// `max_k (V[rho_{k+1}] - V[rho_k] + alpha(D(rho_k)))` over every step.
    pub worst_descent: f64,
    pub final_dissimilarities: Vec<f64>,
    pub max_final_dissimilarity: f64,
    pub violations: Vec<String>,
}

impl LyapunovReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that the rotated value is a Lyapunov functional of the closed loop:
/// `alpha(D) <= V_rot <= alpha_1(D)` and `V_rot[rho+] - V_rot[rho] <= -alpha(D(rho))`.
///
/// `policy_for` returns the closed-loop policy from each initial measure;
/// trajectories start from seeded random measures.
pub fn check_lyapunov(
    problem: &DissipativityProblem<'_>,
    storage: &StorageFunctional,
    alpha: &ClassKInf,
    policy_for: &(dyn Fn(&Measure) -> Result<DeterministicPolicy> + Sync),
    config: &LyapunovConfig,
) -> Result<LyapunovReport> {
    let n = problem.mdp.n_states();
    let starts = random_measures(config.seed, stream::LYAPUNOV, n, config.n_trajectories);
    let trajectories = starts
        .par_iter()
        .map(|rho0| {
            let policy = policy_for(rho0)?;
            simulate_measure_trajectory(problem, storage, &policy, rho0, config.steps)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = LyapunovReport {
        alpha1: None,
        upper_bound_holds: true,
        lower_bound_violations: 0,
        descent_violations: 0,
        worst_descent: f64::NEG_INFINITY,
        final_dissimilarities: Vec::new(),
        max_final_dissimilarity: 0.0,
        violations: Vec::new(),
    };

    // Envelope samples: trajectory points plus fresh random measures.
    let mut env: Vec<(f64, f64)> = trajectories
        .iter()
        .flat_map(|t| t.dissimilarities.iter().copied().zip(t.lyapunov.iter().copied()))
        .collect();
    let extra = random_measures(config.seed.wrapping_add(1), stream::LYAPUNOV, n, config.envelope_samples);
    for rho in &extra {
        env.push((problem.distance_to_steady(rho)?, problem.rotated_value(storage, rho)));
    }
    let mut c1 = 0.0_f64;
    let mut finite = true;
    for &(d, v) in &env {
        if d > 1e-12 {
            c1 = c1.max(v / d);
        } else if v > AUDIT_TOL {
            finite = false;
        }
        if alpha.eval(d) > v + AUDIT_TOL {
            report.lower_bound_violations += 1;
        }
    }
    if finite {
        report.alpha1 = Some(ClassKInf::linear(c1.max(alpha.c))?);
    } else {
        report.upper_bound_holds = false;
        report
            .violations
            .push("no finite upper envelope: rotated value positive where D vanishes".to_string());
    }
    if report.lower_bound_violations > 0 {
        report
            .violations
            .push(format!("{} samples below the lower bound alpha(D)", report.lower_bound_violations));
    }

    for (i, t) in trajectories.iter().enumerate() {
        for k in 0..t.len() - 1 {
            let excess = t.lyapunov[k + 1] - t.lyapunov[k] + alpha.eval(t.dissimilarities[k]);
            report.worst_descent = report.worst_descent.max(excess);
            if excess > AUDIT_TOL {
                report.descent_violations += 1;
                if report.descent_violations <= 10 {
                    report.violations.push(format!("trajectory {i}, step {k}: descent excess {excess:e}"));
                }
            }
        }
        let last = *t.dissimilarities.last().expect("trajectory has a start");
        report.final_dissimilarities.push(last);
        report.max_final_dissimilarity = report.max_final_dissimilarity.max(last);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub eps_grid: Vec<f64>,
    pub samples_per_delta: usize,
    pub steps: usize,
    /// First step from which `D(rho_k || rho*) < eps` is required.
    pub tail_start: usize,
    pub seed: u64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig { eps_grid: vec![0.5, 0.1, 0.01], samples_per_delta: 50, steps: 200, tail_start: 0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonAudit {
    pub eps: f64,
    /// Largest accepted candidate, if any.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub audits: Vec<EpsilonAudit>,
    /// `D(rho_K || rho*)` at the last step, one per sampled initial measure.
    pub final_dissimilarities: Vec<f64>,
    /// Every sampled trajectory ends within `1e-6` of `rho*`.
    pub asymptotic: bool,
}

impl StabilityReport {
    pub fn stable(&self) -> bool {
        self.audits.iter().all(|a| a.delta.is_some())
    }
}

const DELTA_FACTORS: [f64; 7] = [1.0, 0.5, 0.25, 0.1, 0.05, 0.01, 1e-3];

/// A random measure with `D(rho || rho*) < delta`, found by pulling a random
/// direction towards `rho*`.
fn sample_near(rng: &mut crate::rng::SimRng, rho_star: &Measure, dissim: &Dissimilarity, delta: f64) -> Result<Measure> {
    let n = rho_star.len();
    let mut direction = random_measure(rng, n);
    if matches!(dissim, Dissimilarity::KullbackLeibler) {
        let masked: Vec<f64> = direction
            .weights()
            .iter()
            .zip(rho_star.weights())
            .map(|(d, r)| if *r > 0.0 { *d } else { 0.0 })
            .collect();
        direction = Measure::normalized(masked)?;
    }
    let mut t = 1.0;
    for _ in 0..200 {
        let candidate = direction.mix(rho_star, t)?;
        if dissim.eval(&candidate, rho_star)? < delta {
            return Ok(candidate);
        }
        t *= 0.5;
    }
    Ok(rho_star.clone())
}

/// Empirical `(eps, delta)` audit of stability of `rho*` under a fixed policy.
///
/// For each `eps` the candidates `eps * {1, 0.5, 0.25, 0.1, 0.05, 0.01, 0.001}`
/// are tried from largest to smallest; a candidate is accepted when every
/// sampled initial measure within it keeps `D(rho_k || rho*) < eps` for all
/// `k >= tail_start`.
pub fn check_d_stability(
    mdp: &FiniteMdp,
    policy: &DeterministicPolicy,
    rho_star: &Measure,
    dissim: &Dissimilarity,
    config: &StabilityConfig,
) -> Result<StabilityReport> {
    policy.check(mdp)?;
    mdp.check_measure(rho_star)?;
    let mut rng = rng_for(config.seed, stream::STABILITY);
    let mut audits = Vec::new();
    let mut finals = Vec::new();
    for &eps in &config.eps_grid {
        if !(eps > 0.0) {
            return Err(Error::input(format!("eps must be positive, got {eps}")));
        }
        let mut accepted = None;
        for factor in DELTA_FACTORS {
            let delta = eps * factor;
            let mut ok = true;
            for _ in 0..config.samples_per_delta {
                let mut rho = sample_near(&mut rng, rho_star, dissim, delta)?;
                for k in 0..=config.steps {
                    if k >= config.tail_start && dissim.eval(&rho, rho_star)? >= eps {
                        ok = false;
                    }
                    if k < config.steps {
                        rho = mdp.propagate(policy, &rho);
                    }
                }
                finals.push(dissim.eval(&rho, rho_star)?);
            }
            if ok {
                accepted = Some(delta);
                break;
            }
        }
        audits.push(EpsilonAudit { eps, delta: accepted });
    }
    let asymptotic = finals.iter().all(|d| *d < ASYMPTOTIC_TOL);
    Ok(StabilityReport { audits, final_dissimilarities: finals, asymptotic })
}
