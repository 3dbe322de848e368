//! Undiscounted finite-horizon optimal control problems over measures.
//!
//! A [`FiniteHorizonOcp`] with terminal cost `T` and stage cost `L` defines
//!
//! ```text
//! V_hat[rho0] = min_pi  T[rho_N] + sum_{k<N} L[rho_k, pi],   rho_{k+1} = T_pi rho_k
//! ```
//!
//! with the minimum taken over deterministic stationary policies. Choosing
//! `T = V*` and `L = Q* - V* o T_pi` reproduces the discounted solution
//! exactly for every horizon. [`ThetaParameters`] is the parameterized
//! version with storage `lambda_theta`, affine terminal cost and a tabular
//! stage cost plus an optional dissimilarity term.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dissimilarity::Dissimilarity;
use crate::dissipativity::{ClassKInf, DissipativityProblem, StorageFunctional, AUDIT_TOL};
use crate::error::{Error, Result};
use crate::functionals::{argmin_with_ties, q_functional, StageCostFunctional, SteadyState, ValueFunctional, ValueSolution};
use crate::mdp::{DeterministicPolicy, FiniteMdp};
use crate::measure::Measure;
use crate::rng::{random_measures, stream};

pub type TerminalFn = Arc<dyn Fn(&Measure) -> f64 + Send + Sync>;
pub type StageFn = Arc<dyn Fn(&Measure, &DeterministicPolicy) -> f64 + Send + Sync>;

/// Tolerance of the exactness identities.
pub const EXACTNESS_TOL: f64 = 1e-8;
pub const MAX_TEST_HORIZON: usize = 5;

#[derive(Clone)]
pub struct FiniteHorizonOcp {
    pub horizon: usize,
    pub terminal: TerminalFn,
    pub stage: StageFn,
}

impl FiniteHorizonOcp {
    pub fn new(horizon: usize, terminal: TerminalFn, stage: StageFn) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::input("horizon must be at least 1"));
        }
        Ok(FiniteHorizonOcp { horizon, terminal, stage })
    }

    /// Cost of one policy from `rho0`.
    pub fn cost(&self, mdp: &FiniteMdp, policy: &DeterministicPolicy, rho0: &Measure) -> f64 {
        let mut rho = rho0.clone();
        let mut total = 0.0;
        for _ in 0..self.horizon {
            total += (self.stage)(&rho, policy);
            rho = mdp.propagate(policy, &rho);
        }
        total + (self.terminal)(&rho)
    }
}

/// Exhaustive minimization with index-ordered results and lowest-index ties.
fn minimize_over_policies<F>(mdp: &FiniteMdp, cap: usize, cost: F) -> Result<(f64, DeterministicPolicy)>
where
    F: Fn(&DeterministicPolicy) -> Result<f64> + Sync,
{
    let space = mdp.policy_space();
    let count = space.checked_count(cap)?;
    let values = (0..count)
        .into_par_iter()
        .map(|i| cost(&space.policy(i)))
        .collect::<Result<Vec<f64>>>()?;
    let best = argmin_with_ties(&values);
    Ok((values[best], space.policy(best)))
}

pub fn finite_horizon_value(mdp: &FiniteMdp, ocp: &FiniteHorizonOcp, rho0: &Measure, cap: usize) -> Result<(f64, DeterministicPolicy)> {
    mdp.check_measure(rho0)?;
    minimize_over_policies(mdp, cap, |pi| Ok(ocp.cost(mdp, pi, rho0)))
}

/// `T = V*` and `L[rho, pi] = Q*[rho, pi] - V*[T_pi rho]`.
pub fn exactness_construction(
    solution: &ValueSolution,
    mdp: &FiniteMdp,
    functional: &StageCostFunctional,
    horizon: usize,
) -> Result<FiniteHorizonOcp> {
    let terminal_sol = solution.clone();
    let terminal: TerminalFn = Arc::new(move |rho| terminal_sol.value(rho));
    let (sol, m, f) = (solution.clone(), mdp.clone(), functional.clone());
    let stage: StageFn = Arc::new(move |rho, pi| {
        let next = m.propagate(pi, rho);
        f.eval(rho, pi) + m.gamma() * sol.value(&next) - sol.value(&next)
    });
    FiniteHorizonOcp::new(horizon, terminal, stage)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonCheck {
    pub horizon: usize,
    pub policy_mismatches: usize,
    pub max_value_gap: f64,
    pub max_q_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Report {
    pub n_test: usize,
    pub horizons: Vec<HorizonCheck>,
    pub violations: Vec<String>,
}

impl Theorem3Report {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks policy, value and action-value identities of the exactness
/// construction for horizons `1..=5` on seeded random measures.
pub fn check_theorem3(
    mdp: &FiniteMdp,
    functional: &StageCostFunctional,
    solution: &ValueSolution,
    n_test: usize,
    seed: u64,
    cap: usize,
) -> Result<Theorem3Report> {
    check_theorem3_with(mdp, solution, n_test, seed, cap, |n| exactness_construction(solution, mdp, functional, n))
}

/// As [`check_theorem3`] with a caller-supplied OCP per horizon.
pub fn check_theorem3_with<B>(
    mdp: &FiniteMdp,
    solution: &ValueSolution,
    n_test: usize,
    seed: u64,
    cap: usize,
    build: B,
) -> Result<Theorem3Report>
where
    B: Fn(usize) -> Result<FiniteHorizonOcp>,
{
    let policies = mdp.policy_space().enumerate(cap)?;
    let measures = random_measures(seed, stream::IDENTITY_CHECK, mdp.n_states(), n_test);
    let mut report = Theorem3Report { n_test, horizons: Vec::new(), violations: Vec::new() };
    for horizon in 1..=MAX_TEST_HORIZON {
        let ocp = build(horizon)?;
        let mut check = HorizonCheck { horizon, policy_mismatches: 0, max_value_gap: 0.0, max_q_gap: 0.0 };
        for (i, rho) in measures.iter().enumerate() {
            let (value, policy) = finite_horizon_value(mdp, &ocp, rho, cap)?;
            if policy != solution.pi_star {
                check.policy_mismatches += 1;
                report
                    .violations
                    .push(format!("N={horizon}, test {i}: policy {policy} differs from pi* {}", solution.pi_star));
            }
            let v_star = solution.value(rho);
            let gap = (value - v_star).abs();
            check.max_value_gap = check.max_value_gap.max(gap);
            if gap > EXACTNESS_TOL {
                report
                    .violations
                    .push(format!("N={horizon}, test {i}: value {value} differs from V* {v_star} by {gap:e}"));
            }
            let q_gaps = policies
                .par_iter()
                .map(|pi| {
                    let next = mdp.propagate(pi, rho);
                    let (v_next, _) = finite_horizon_value(mdp, &ocp, &next, cap)?;
                    let q_hat = (ocp.stage)(rho, pi) + v_next;
                    let q_star: f64 = rho
                        .weights()
                        .iter()
                        .enumerate()
                        .map(|(s, p)| p * solution.q(s, pi.action(s)))
                        .sum();
                    Ok((q_hat - q_star).abs())
                })
                .collect::<Result<Vec<f64>>>()?;
            for (pi, gap) in policies.iter().zip(q_gaps) {
                check.max_q_gap = check.max_q_gap.max(gap);
                if gap > EXACTNESS_TOL {
                    report
                        .violations
                        .push(format!("N={horizon}, test {i}: Q_hat differs from Q* by {gap:e} under {pi}"));
                }
            }
        }
        report.horizons.push(check);
    }
    Ok(report)
}

/// Parameters of the finite-horizon approximator.
///
/// `lambda[rho] = lambda_w . rho + rho^T lambda_M rho - lambda_normalization`,
/// `T[rho] = terminal_w . rho` and
/// `L[rho, pi] = sum_s rho(s) stage_table[s][pi(s)] + stage_d_weight D(rho || rho*)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaParameters {
    pub lambda_w: Vec<f64>,
    #[serde(rename = "lambda_M", default, skip_serializing_if = "Option::is_none")]
    pub lambda_m: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub lambda_normalization: f64,
    pub terminal_w: Vec<f64>,
    pub stage_table: Vec<Vec<f64>>,
    #[serde(default)]
    pub stage_d_weight: f64,
    #[serde(rename = "N")]
    pub horizon: usize,
    pub rho_star: Measure,
    #[serde(default)]
    pub dissimilarity: Dissimilarity,
}

impl ThetaParameters {
    pub fn zero(n_states: usize, n_actions: usize, horizon: usize, rho_star: Measure, dissimilarity: Dissimilarity) -> Self {
        ThetaParameters {
            lambda_w: vec![0.0; n_states],
            lambda_m: None,
            lambda_normalization: 0.0,
            terminal_w: vec![0.0; n_states],
            stage_table: vec![vec![0.0; n_actions]; n_states],
            stage_d_weight: 0.0,
            horizon,
            rho_star,
            dissimilarity,
        }
    }

    pub fn check(&self, mdp: &FiniteMdp) -> Result<()> {
        let n = mdp.n_states();
        let m = mdp.n_actions();
        let shapes_ok = self.lambda_w.len() == n
            && self.terminal_w.len() == n
            && self.rho_star.len() == n
            && self.stage_table.len() == n
            && self.stage_table.iter().all(|r| r.len() == m)
            && self.lambda_m.as_ref().is_none_or(|q| q.len() == n && q.iter().all(|r| r.len() == n));
        if !shapes_ok {
            return Err(Error::input("theta parameters do not match the MDP dimensions"));
        }
        if self.horizon == 0 {
            return Err(Error::input("theta horizon N must be at least 1"));
        }
        Ok(())
    }

    pub fn storage(&self) -> StorageFunctional {
        StorageFunctional {
            linear_weights: self.lambda_w.clone(),
            quadratic_weights: self.lambda_m.clone(),
            normalization: self.lambda_normalization,
        }
    }

    pub fn with_storage(mut self, storage: &StorageFunctional) -> Self {
        self.lambda_w = storage.linear_weights.clone();
        self.lambda_m = storage.quadratic_weights.clone();
        self.lambda_normalization = storage.normalization;
        self
    }

    pub fn lambda(&self, rho: &Measure) -> f64 {
        self.storage().eval(rho)
    }

    pub fn terminal(&self, rho: &Measure) -> f64 {
        rho.dot(&self.terminal_w)
    }

    pub fn stage(&self, rho: &Measure, policy: &DeterministicPolicy) -> Result<f64> {
        let linear: f64 = rho
            .weights()
            .iter()
            .enumerate()
            .map(|(s, p)| p * self.stage_table[s][policy.action(s)])
            .sum();
        if self.stage_d_weight == 0.0 {
            return Ok(linear);
        }
        Ok(linear + self.stage_d_weight * self.dissimilarity.eval(rho, &self.rho_star)?)
    }

    /// `T[rho_N] + sum_{k<N} L[rho_k, pi]` for one policy.
    pub fn ocp_cost(&self, mdp: &FiniteMdp, policy: &DeterministicPolicy, rho0: &Measure) -> Result<f64> {
        let mut rho = rho0.clone();
        let mut total = 0.0;
        for _ in 0..self.horizon {
            total += self.stage(&rho, policy)?;
            rho = mdp.propagate(policy, &rho);
        }
        Ok(total + self.terminal(&rho))
    }

    /// Smallest terminal cost over the simplex (attained at a vertex).
    pub fn terminal_min(&self) -> f64 {
        self.terminal_w.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `V_theta[rho0] = min_pi -lambda[rho0] + T[rho_N] + sum_{k<N} L[rho_k, pi]`.
pub fn theta_value(mdp: &FiniteMdp, theta: &ThetaParameters, rho0: &Measure, cap: usize) -> Result<(f64, DeterministicPolicy)> {
    theta.check(mdp)?;
    mdp.check_measure(rho0)?;
    let offset = -theta.lambda(rho0);
    minimize_over_policies(mdp, cap, |pi| Ok(offset + theta.ocp_cost(mdp, pi, rho0)?))
}

/// `Psi_theta[rho0] = lambda[rho0] + V_theta[rho0]`.
pub fn psi_theta(mdp: &FiniteMdp, theta: &ThetaParameters, rho0: &Measure, cap: usize) -> Result<f64> {
    Ok(theta.lambda(rho0) + theta_value(mdp, theta, rho0, cap)?.0)
}

/// `Psi_theta` as the storage-free OCP `min_pi T[rho_N] + sum_{k<N} L[rho_k, pi]`.
pub fn psi_theta_direct(mdp: &FiniteMdp, theta: &ThetaParameters, rho0: &Measure, cap: usize) -> Result<f64> {
    theta.check(mdp)?;
    mdp.check_measure(rho0)?;
    Ok(minimize_over_policies(mdp, cap, |pi| theta.ocp_cost(mdp, pi, rho0))?.0)
}

/// `Q_theta[rho, pi] = -lambda[rho] + L[rho, pi] + Psi_theta[T_pi rho]`.
pub fn q_theta(mdp: &FiniteMdp, theta: &ThetaParameters, rho: &Measure, policy: &DeterministicPolicy, cap: usize) -> Result<f64> {
    let next = mdp.apply_transition(policy, rho)?;
    Ok(-theta.lambda(rho) + theta.stage(rho, policy)? + psi_theta_direct(mdp, theta, &next, cap)?)
}

/// Tabular parameters whose induced `Q_theta` equals `Q*` exactly.
///
/// With `lambda` affine, `T = V* + lambda` and
/// `L[rho, pi] = Q*[rho, pi] - V*[T_pi rho] + lambda[rho] - lambda[T_pi rho]`,
/// which is linear in `rho` and therefore a table.
pub fn theta_star(
    mdp: &FiniteMdp,
    functional: &StageCostFunctional,
    solution: &ValueSolution,
    storage: &StorageFunctional,
    steady: &SteadyState,
    dissimilarity: &Dissimilarity,
    horizon: usize,
) -> Result<ThetaParameters> {
    if !functional.is_linear() {
        return Err(Error::input("the tabular construction needs a linear stage cost"));
    }
    if !storage.is_affine() {
        return Err(Error::input("the tabular construction needs an affine storage"));
    }
    let q: Vec<Vec<f64>> = (0..mdp.n_states())
        .map(|s| (0..mdp.n_actions()).map(|a| solution.q(s, a)).collect())
        .collect();
    tabular_theta(mdp, &q, &solution.v_star, storage, steady, dissimilarity, horizon)
}

/// Shared tabular construction from any action-value table `q` and values `v`.
pub(crate) fn tabular_theta(
    mdp: &FiniteMdp,
    q: &[Vec<f64>],
    v: &[f64],
    storage: &StorageFunctional,
    steady: &SteadyState,
    dissimilarity: &Dissimilarity,
    horizon: usize,
) -> Result<ThetaParameters> {
    let n = mdp.n_states();
    let w = &storage.linear_weights;
    let anchor = steady.rho_star.dot(w);
    let expect = |row: &[f64], x: &[f64]| row.iter().zip(x).map(|(p, y)| p * y).sum::<f64>();
    let stage_table = (0..n)
        .map(|s| {
            (0..mdp.n_actions())
                .map(|a| {
                    let row = mdp.row(s, a);
                    q[s][a] - expect(row, v) + w[s] - expect(row, w)
                })
                .collect()
        })
        .collect();
    let theta = ThetaParameters {
        lambda_w: w.clone(),
        lambda_m: None,
        lambda_normalization: storage.normalization,
        terminal_w: (0..n).map(|s| v[s] + w[s] - anchor).collect(),
        stage_table,
        stage_d_weight: 0.0,
        horizon,
        rho_star: steady.rho_star.clone(),
        dissimilarity: dissimilarity.clone(),
    };
    theta.check(mdp)?;
    Ok(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem4Config {
    pub n_samples: usize,
    pub seed: u64,
    pub cap: usize,
    /// Allowed `|Q_theta - Q*|` and `|V_theta - V*|` for the action-value audit.
    pub q_tolerance: f64,
    /// Allowed negative residual in the final dissipativity audit.
    pub fsdsd_tolerance: f64,
}

impl Default for Theorem4Config {
    fn default() -> Self {
        Theorem4Config { n_samples: 200, seed: 0, cap: crate::mdp::DEFAULT_POLICY_CAP, q_tolerance: 1e-6, fsdsd_tolerance: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditOutcome {
    pub passed: bool,
    /// Worst value of the audited quantity (a gap or a slack, see field docs).
    pub worst: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem4Report {
    /// Worst is the smallest terminal weight.
    pub terminal_nonnegative: AuditOutcome,
    /// Worst is the largest `|Q_theta - Q*|` or `|V_theta - V*|`.
    pub q_consistency: AuditOutcome,
    /// Worst is the smallest `L_theta - alpha0(D)`.
    pub stage_lower_bound: AuditOutcome,
    /// Smallest `Psi_theta` on the audit set.
    pub psi_min: f64,
    /// Worst is the smallest residual of the extracted storage; absent when a
    /// precondition failed.
    pub fsdsd: Option<AuditOutcome>,
    pub storage: StorageFunctional,
    pub alpha0: ClassKInf,
    pub failures: Vec<String>,
    pub conclusion: bool,
}

/// Audits the assumptions that make `lambda_theta` a valid storage and, when
/// they hold, verifies the dissipativity inequalities for it with `alpha0`.
#[allow(clippy::too_many_arguments)]
pub fn check_theorem4(
    mdp: &FiniteMdp,
    functional: &StageCostFunctional,
    theta: &ThetaParameters,
    solution: &ValueSolution,
    steady: &SteadyState,
    dissimilarity: &Dissimilarity,
    alpha0: &ClassKInf,
    config: &Theorem4Config,
) -> Result<Theorem4Report> {
    theta.check(mdp)?;
    let n = mdp.n_states();
    let policies = mdp.policy_space().enumerate(config.cap)?;
    let mut measures: Vec<Measure> = (0..n).map(|s| Measure::dirac(s, n)).collect::<Result<_>>()?;
    measures.push(steady.rho_star.clone());
    measures.extend(random_measures(config.seed, stream::AUDIT, n, config.n_samples));
    let mut failures = Vec::new();

    let t_min = theta.terminal_min();
    let terminal_nonnegative = AuditOutcome { passed: t_min >= -AUDIT_TOL, worst: t_min, checked: n };
    if !terminal_nonnegative.passed {
        failures.push(format!("terminal-cost nonnegativity fails: {t_min} < 0 at a vertex"));
    }

    struct PointAudit {
        q_gap: f64,
        stage_slack: f64,
        psi: f64,
    }
    let audits = measures
        .par_iter()
        .map(|rho| {
            let (v_theta, _) = theta_value(mdp, theta, rho, config.cap)?;
            let mut q_gap = (v_theta - solution.value(rho)).abs();
            let d = dissimilarity.eval(rho, &steady.rho_star)?;
            let mut stage_slack = f64::INFINITY;
            for pi in &policies {
                let qt = q_theta(mdp, theta, rho, pi, config.cap)?;
                let qs = q_functional(mdp, functional, solution, rho, pi)?;
                q_gap = q_gap.max((qt - qs).abs());
                stage_slack = stage_slack.min(theta.stage(rho, pi)? - alpha0.eval(d));
            }
            Ok(PointAudit { q_gap, stage_slack, psi: theta.lambda(rho) + v_theta })
        })
        .collect::<Result<Vec<_>>>()?;
    let checked = measures.len() * policies.len();
    let q_worst = audits.iter().map(|a| a.q_gap).fold(0.0, f64::max);
    let q_consistency = AuditOutcome { passed: q_worst <= config.q_tolerance, worst: q_worst, checked };
    if !q_consistency.passed {
        failures.push(format!(
            "Q_theta consistency unattained: |Q_theta - Q*| reaches {q_worst:e}; the instance may be non-dissipative or the parameters not yet converged"
        ));
    }
    let slack = audits.iter().map(|a| a.stage_slack).fold(f64::INFINITY, f64::min);
    let stage_lower_bound = AuditOutcome { passed: slack >= -AUDIT_TOL, worst: slack, checked };
    if !stage_lower_bound.passed {
        failures.push(format!("stage cost falls below alpha0(D) by {:e}", -slack));
    }
    let psi_min = audits.iter().map(|a| a.psi).fold(f64::INFINITY, f64::min);

    let storage = theta.storage();
    let fsdsd = if failures.is_empty() {
        let problem = DissipativityProblem {
            mdp,
            stage: functional,
            value: solution,
            rho_star: &steady.rho_star,
            dissimilarity,
        };
        let mut worst = f64::INFINITY;
        for rho in &measures {
            for pi in &policies {
                let (ra, rb) = problem.residuals(&storage, alpha0, rho, pi)?;
                worst = worst.min(ra).min(rb);
            }
        }
        let outcome = AuditOutcome { passed: worst >= -config.fsdsd_tolerance, worst, checked };
        if !outcome.passed {
            failures.push(format!("extracted storage violates the dissipativity inequalities by {:e}", -worst));
        }
        Some(outcome)
    } else {
        None
    };
    let conclusion = failures.is_empty();
    Ok(Theorem4Report { terminal_nonnegative, q_consistency, stage_lower_bound, psi_min, fsdsd, storage, alpha0: *alpha0, failures, conclusion })
}
