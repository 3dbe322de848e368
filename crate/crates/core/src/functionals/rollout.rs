use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{DeterministicPolicy, FiniteMdp};
use crate::measure::Measure;

use super::stage::StageCostFunctional;
use super::value::ValueFunctional;

/// Hard ceiling on rollout length, far beyond what any tail bound needs for
/// `gamma <= 1 - 1e-6`.
const MAX_ROLLOUT_STEPS: usize = 100_000_000;
/// Relative tie tolerance between policy values during enumeration.
pub(crate) const POLICY_TIE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub value: f64,
    /// Number of stage terms summed.
    pub steps: usize,
}

/// Truncated sum `sum_k gamma^k stage(rho_k)` along `rho_{k+1} = T_pi rho_k`.
///
/// Stops at the first `N` with `gamma^N B / (1 - gamma) <= tol`, where `B` is
/// twice the larger of the largest observed `|stage|` and `bound_hint`.
pub fn discounted_rollout<F>(
    mdp: &FiniteMdp,
    policy: &DeterministicPolicy,
    rho0: &Measure,
    tol: f64,
    bound_hint: f64,
    mut stage: F,
) -> Result<Rollout>
where
    F: FnMut(&Measure) -> f64,
{
    if !(tol > 0.0) {
        return Err(Error::input("rollout tolerance must be positive"));
    }
    let gamma = mdp.gamma();
    let mut rho = rho0.clone();
    let mut bound = bound_hint.abs();
    let mut discount = 1.0;
    let mut value = 0.0;
    for k in 0..MAX_ROLLOUT_STEPS {
        let c = stage(&rho);
        if !c.is_finite() {
            return Err(Error::Numerical(format!("stage cost is {c} at step {k}")));
        }
        bound = bound.max(c.abs());
        value += discount * c;
        discount *= gamma;
        if discount * 2.0 * bound / (1.0 - gamma) <= tol {
            return Ok(Rollout { value, steps: k + 1 });
        }
        rho = mdp.propagate(policy, &rho);
    }
    Err(Error::NonConvergence {
        what: "discounted rollout",
        iterations: MAX_ROLLOUT_STEPS,
        residual: discount * 2.0 * bound / (1.0 - gamma),
    })
}

/// Discounted value of a fixed policy for a general stage-cost functional.
pub fn nonlinear_rollout_value(
    mdp: &FiniteMdp,
    functional: &StageCostFunctional,
    policy: &DeterministicPolicy,
    rho0: &Measure,
    tol: f64,
) -> Result<Rollout> {
    policy.check(mdp)?;
    mdp.check_measure(rho0)?;
    discounted_rollout(mdp, policy, rho0, tol, functional.magnitude_bound(), |rho| {
        functional.eval(rho, policy)
    })
}

/// Index of the lowest-index entry within the tie tolerance of the minimum.
pub(crate) fn argmin_with_ties(values: &[f64]) -> usize {
    let best = values.iter().copied().fold(f64::INFINITY, f64::min);
    let slack = POLICY_TIE_TOL * best.abs().max(1.0);
    values
        .iter()
        .position(|v| *v <= best + slack)
        .expect("at least one policy")
}

/// Exhaustive minimization of the discounted cost over deterministic
/// stationary policies. Optimal within that class only.
pub fn solve_optimal_nonlinear(
    mdp: &FiniteMdp,
    functional: &StageCostFunctional,
    rho0: &Measure,
    tol: f64,
    cap: usize,
) -> Result<(f64, DeterministicPolicy)> {
    mdp.check_measure(rho0)?;
    let space = mdp.policy_space();
    let count = space.checked_count(cap)?;
    let values = (0..count)
        .into_par_iter()
        .map(|i| nonlinear_rollout_value(mdp, functional, &space.policy(i), rho0, tol).map(|r| r.value))
        .collect::<Result<Vec<f64>>>()?;
    let best = argmin_with_ties(&values);
    Ok((values[best], space.policy(best)))
}

/// `V*` of a general stage-cost functional, evaluated by policy enumeration
/// and truncated rollouts.
#[derive(Debug, Clone)]
pub struct RolloutValue {
    mdp: FiniteMdp,
    functional: StageCostFunctional,
    tol: f64,
    cap: usize,
}

impl RolloutValue {
    pub fn new(mdp: &FiniteMdp, functional: &StageCostFunctional, tol: f64, cap: usize) -> Result<Self> {
        mdp.policy_space().checked_count(cap)?;
        if !(tol > 0.0) {
            return Err(Error::input("rollout tolerance must be positive"));
        }
        Ok(RolloutValue { mdp: mdp.clone(), functional: functional.clone(), tol, cap })
    }

    pub fn solve(&self, rho: &Measure) -> Result<(f64, DeterministicPolicy)> {
        solve_optimal_nonlinear(&self.mdp, &self.functional, rho, self.tol, self.cap)
    }
}

impl ValueFunctional for RolloutValue {
    fn value(&self, rho: &Measure) -> f64 {
        // Construction checked the cap and the functional is bounded, so the
        // only failure left is a dimension mismatch.
        self.solve(rho).expect("measure matches the MDP dimension").0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::value::{policy_value_linear, solve_optimal_linear};
    use crate::rng::random_measures;

    #[test]
    fn linear_rollout_matches_exact_solve() {
        let mdp = FiniteMdp::random(3, 2, 0.9, 21).unwrap();
        let f = StageCostFunctional::linear(&mdp);
        for (i, rho) in random_measures(1, 0, 3, 10).iter().enumerate() {
            let pi = mdp.policy_space().policy(i % 8);
            let exact = rho.dot(&policy_value_linear(&mdp, &pi).unwrap());
            let r = nonlinear_rollout_value(&mdp, &f, &pi, rho, 1e-10).unwrap();
            assert!((r.value - exact).abs() <= 1e-10, "{} vs {exact}", r.value);
        }
    }

    #[test]
    fn zero_functional_is_zero() {
        let mdp = FiniteMdp::random(3, 2, 0.9, 2).unwrap();
        let file = mdp.to_file();
        let zero = FiniteMdp::new(file.transition, vec![vec![0.0; 2]; 3], 0.9).unwrap();
        let f = StageCostFunctional::linear(&zero);
        let r = nonlinear_rollout_value(&zero, &f, &DeterministicPolicy::constant(3, 1), &Measure::uniform(3), 1e-9).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn degenerate_beta_matches_linear_exactly() {
        let mdp = FiniteMdp::random(3, 2, 0.8, 6).unwrap();
        let lin = StageCostFunctional::linear(&mdp);
        let var = StageCostFunctional::with_variance(&mdp, 0.0).unwrap();
        let pi = DeterministicPolicy::new(vec![0, 1, 1]);
        let rho = Measure::new(vec![0.1, 0.6, 0.3]).unwrap();
        let a = nonlinear_rollout_value(&mdp, &lin, &pi, &rho, 1e-9).unwrap();
        let b = nonlinear_rollout_value(&mdp, &var, &pi, &rho, 1e-9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn late_costs_are_not_truncated() {
        // Costs only appear after one step: an empirical bound alone would stop at N = 1.
        let mdp = FiniteMdp::new(
            vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]],
            vec![vec![0.0], vec![1.0]],
            0.5,
        )
        .unwrap();
        let f = StageCostFunctional::linear(&mdp);
        let r = nonlinear_rollout_value(&mdp, &f, &DeterministicPolicy::constant(2, 0), &Measure::dirac(0, 2).unwrap(), 1e-10).unwrap();
        assert!((r.value - 1.0).abs() < 1e-10);
    }

    #[test]
    fn nonlinear_solver_agrees_with_linear_for_zero_beta() {
        let mdp = FiniteMdp::random(3, 2, 0.9, 13).unwrap();
        let f = StageCostFunctional::with_variance(&mdp, 0.0).unwrap();
        let sol = solve_optimal_linear(&mdp).unwrap();
        let rho = Measure::new(vec![0.3, 0.3, 0.4]).unwrap();
        let (v, pi) = solve_optimal_nonlinear(&mdp, &f, &rho, 1e-10, 4096).unwrap();
        assert!((v - sol.value(&rho)).abs() < 1e-9);
        assert_eq!(pi, sol.pi_star);
    }

    #[test]
    fn single_action_returns_only_policy() {
        let mdp = FiniteMdp::random(4, 1, 0.9, 1).unwrap();
        let f = StageCostFunctional::with_variance(&mdp, 1.0).unwrap();
        let (_, pi) = solve_optimal_nonlinear(&mdp, &f, &Measure::uniform(4), 1e-8, 4096).unwrap();
        assert_eq!(pi, DeterministicPolicy::constant(4, 0));
    }

    #[test]
    fn enumeration_cap_enforced() {
        let mdp = FiniteMdp::random(13, 2, 0.9, 1).unwrap();
        let f = StageCostFunctional::linear(&mdp);
        let err = solve_optimal_nonlinear(&mdp, &f, &Measure::uniform(13), 1e-6, 4096).unwrap_err();
        assert!(matches!(err, Error::EnumerationCap { .. }));
    }
}
