use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{DeterministicPolicy, FiniteMdp};
use crate::measure::Measure;

use super::stage::StageCostFunctional;

pub const VALUE_ITERATION_TOL: f64 = 1e-12;
pub const VALUE_ITERATION_MAX_ITER: usize = 1_000_000;
/// Relative gap under which two action values count as tied.
const TIE_TOL: f64 = 1e-11;
/// Sweeps between attempts to close value iteration with an exact policy evaluation.
const CERTIFY_EVERY: usize = 256;

/// A value functional `V : measures -> R`.
pub trait ValueFunctional: Send + Sync {
    fn value(&self, rho: &Measure) -> f64;
}

impl<F> ValueFunctional for F
where
    F: Fn(&Measure) -> f64 + Send + Sync,
{
    fn value(&self, rho: &Measure) -> f64 {
        self(rho)
    }
}

/// Optimal classic value and action-value functions of a linear problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSolution {
    pub v_star: Vec<f64>,
    /// Row-major `n_states x n_actions`.
    pub q_star: Vec<f64>,
    pub n_actions: usize,
    pub pi_star: DeterministicPolicy,
    /// Final Bellman sup-norm residual `max_s |v(s) - min_a q(s, a)|`.
    pub residual: f64,
    pub iterations: usize,
}

impl ValueSolution {
    pub fn q(&self, state: usize, action: usize) -> f64 {
        self.q_star[state * self.n_actions + action]
    }

    /// Smallest gap between the best and second-best action over all states
    /// (infinite with a single action).
    pub fn min_action_gap(&self) -> f64 {
        self.q_star
            .chunks(self.n_actions)
            .map(|row| {
                let mut sorted = row.to_vec();
                sorted.sort_by(f64::total_cmp);
                sorted.get(1).map_or(f64::INFINITY, |second| second - sorted[0])
            })
            .fold(f64::INFINITY, f64::min)
    }
}

impl ValueFunctional for ValueSolution {
    /// `V*[rho] = E_{s~rho}[v*(s)]`.
    fn value(&self, rho: &Measure) -> f64 {
        rho.dot(&self.v_star)
    }
}

pub fn value_functional(solution: &ValueSolution, rho: &Measure) -> f64 {
    solution.value(rho)
}

/// Optimal values for the raw cost table of `mdp`.
pub fn solve_optimal_linear(mdp: &FiniteMdp) -> Result<ValueSolution> {
    solve_with_costs(mdp, mdp.cost_table())
}

/// Optimal values for a linear stage-cost functional, shift included.
pub fn solve_linear_functional(mdp: &FiniteMdp, functional: &StageCostFunctional) -> Result<ValueSolution> {
    if !functional.is_linear() {
        return Err(Error::input(
            "the value-iteration solver needs a linear stage cost; use solve_optimal_nonlinear",
        ));
    }
    solve_with_costs(mdp, &functional.shifted_costs())
}

fn backup(mdp: &FiniteMdp, costs: &[f64], v: &[f64]) -> Vec<f64> {
    let m = mdp.n_actions();
    let gamma = mdp.gamma();
    (0..mdp.n_states())
        .flat_map(|s| (0..m).map(move |a| (s, a)))
        .map(|(s, a)| {
            let expected: f64 = mdp.row(s, a).iter().zip(v).map(|(p, x)| p * x).sum();
            costs[s * m + a] + gamma * expected
        })
        .collect()
}

fn greedy(q: &[f64], n_actions: usize) -> DeterministicPolicy {
    let scale = q.iter().fold(1.0_f64, |acc, x| acc.max(x.abs()));
    DeterministicPolicy::new(
        q.chunks(n_actions)
            .map(|row| {
                let best = row.iter().copied().fold(f64::INFINITY, f64::min);
                row.iter()
                    .position(|x| *x <= best + TIE_TOL * scale)
                    .expect("non-empty action row")
            })
            .collect(),
    )
}

/// Exact value of the greedy policy of `v`, if it already solves the Bellman
/// equation to within the value-iteration tolerance.
fn certified_fixed_point(mdp: &FiniteMdp, costs: &[f64], v: &[f64]) -> Result<Option<Vec<f64>>> {
    let m = mdp.n_actions();
    let policy = greedy(&backup(mdp, costs, v), m);
    let exact = policy_value_with_costs(mdp, &policy, costs)?;
    let q = backup(mdp, costs, &exact);
    let scale = exact.iter().fold(1.0_f64, |acc, x| acc.max(x.abs()));
    let residual = q
        .chunks(m)
        .zip(&exact)
        .map(|(row, vs)| (row.iter().copied().fold(f64::INFINITY, f64::min) - vs).abs())
        .fold(0.0, f64::max);
    Ok((residual <= VALUE_ITERATION_TOL * scale).then_some(exact))
}

fn solve_with_costs(mdp: &FiniteMdp, costs: &[f64]) -> Result<ValueSolution> {
    let m = mdp.n_actions();
    let mut v = vec![0.0; mdp.n_states()];
    let mut iterations = 0;
    loop {
        let q = backup(mdp, costs, &v);
        let next: Vec<f64> = q
            .chunks(m)
            .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = next.iter().fold(1.0_f64, |acc, x| acc.max(x.abs()));
        v = next;
        iterations += 1;
        if change <= VALUE_ITERATION_TOL * scale {
            break;
        }
        if iterations % CERTIFY_EVERY == 0 {
            if let Some(exact) = certified_fixed_point(mdp, costs, &v)? {
                v = exact;
                break;
            }
        }
        if iterations >= VALUE_ITERATION_MAX_ITER {
            return Err(Error::NonConvergence {
                what: "value iteration",
                iterations,
                residual: change,
            });
        }
    }

    // Polish with exact policy evaluation until the greedy policy is stable.
    let mut policy = greedy(&backup(mdp, costs, &v), m);
    for _ in 0..mdp.n_states() * m + 1 {
        v = policy_value_with_costs(mdp, &policy, costs)?;
        let improved = greedy(&backup(mdp, costs, &v), m);
        if improved == policy {
            break;
        }
        policy = improved;
    }
    let q_star = backup(mdp, costs, &v);
    let pi_star = greedy(&q_star, m);
    let residual = q_star
        .chunks(m)
        .zip(&v)
        .map(|(row, vs)| (row.iter().copied().fold(f64::INFINITY, f64::min) - vs).abs())
        .fold(0.0, f64::max);
    Ok(ValueSolution { v_star: v, q_star, n_actions: m, pi_star, residual, iterations })
}

/// Exact discounted value of a fixed policy: solves `v = l_pi + gamma P_pi v`.
pub fn policy_value_linear(mdp: &FiniteMdp, policy: &DeterministicPolicy) -> Result<Vec<f64>> {
    policy_value_with_costs(mdp, policy, mdp.cost_table())
}

pub(crate) fn policy_value_with_costs(
    mdp: &FiniteMdp,
    policy: &DeterministicPolicy,
    costs: &[f64],
) -> Result<Vec<f64>> {
    let p = mdp.closed_loop_matrix(policy)?;
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let system = DMatrix::identity(n, n) - p * mdp.gamma();
    let rhs = DVector::from_iterator(n, (0..n).map(|s| costs[s * m + policy.action(s)]));
    let solution = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular policy-evaluation system".into()))?;
    Ok(solution.iter().copied().collect())
}

/// `Q[rho, pi] = L[rho, pi] + gamma V[T_pi rho]`.
pub fn q_functional(
    mdp: &FiniteMdp,
    functional: &StageCostFunctional,
    value: &dyn ValueFunctional,
    rho: &Measure,
    policy: &DeterministicPolicy,
) -> Result<f64> {
    let next = mdp.apply_transition(policy, rho)?;
    Ok(functional.eval(rho, policy) + mdp.gamma() * value.value(&next))
}

/// `A[rho, pi] = Q[rho, pi] - V[rho]`.
pub fn advantage_functional(
    mdp: &FiniteMdp,
    functional: &StageCostFunctional,
    value: &dyn ValueFunctional,
    rho: &Measure,
    policy: &DeterministicPolicy,
) -> Result<f64> {
    Ok(q_functional(mdp, functional, value, rho, policy)? - value.value(rho))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::dirac;

    fn single(cost: f64, gamma: f64) -> FiniteMdp {
        FiniteMdp::new(vec![vec![vec![1.0]]], vec![vec![cost]], gamma).unwrap()
    }

    #[test]
    fn geometric_series() {
        let sol = solve_optimal_linear(&single(1.0, 0.9)).unwrap();
        assert!((sol.v_star[0] - 10.0).abs() < 1e-10);
        assert!(sol.residual <= 1e-10);
        let v = policy_value_linear(&single(2.0, 0.5), &DeterministicPolicy::constant(1, 0)).unwrap();
        assert!((v[0] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn zero_cost_ties_break_low() {
        let mdp = FiniteMdp::random(3, 3, 0.9, 3).unwrap();
        let file = mdp.to_file();
        let zero = FiniteMdp::new(file.transition, vec![vec![0.0; 3]; 3], 0.9).unwrap();
        let sol = solve_optimal_linear(&zero).unwrap();
        assert_eq!(sol.v_star, vec![0.0; 3]);
        assert_eq!(sol.pi_star.actions(), &[0, 0, 0]);
        let v = policy_value_linear(&zero, &DeterministicPolicy::new(vec![2, 1, 0])).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn bellman_residual_small() {
        for seed in 0..5 {
            let mdp = FiniteMdp::random(4, 3, 0.99, seed).unwrap();
            let sol = solve_optimal_linear(&mdp).unwrap();
            assert!(sol.residual <= 1e-10, "{}", sol.residual);
            for s in 0..4 {
                assert_eq!(sol.q(s, sol.pi_star.action(s)), (0..3).map(|a| sol.q(s, a)).fold(f64::INFINITY, f64::min));
            }
        }
    }

    #[test]
    fn q_and_advantage_at_optimum() {
        let mdp = FiniteMdp::random(3, 2, 0.9, 8).unwrap();
        let f = StageCostFunctional::linear(&mdp);
        let sol = solve_optimal_linear(&mdp).unwrap();
        let rho = Measure::new(vec![0.2, 0.3, 0.5]).unwrap();
        let q = q_functional(&mdp, &f, &sol, &rho, &sol.pi_star).unwrap();
        assert!((q - sol.value(&rho)).abs() < 1e-8);
        assert!(advantage_functional(&mdp, &f, &sol, &rho, &sol.pi_star).unwrap().abs() < 1e-8);
        let s = 1;
        let pi = DeterministicPolicy::new(vec![1, 0, 1]);
        let q = q_functional(&mdp, &f, &sol, &dirac(s, 3).unwrap(), &pi).unwrap();
        assert!((q - sol.q(s, 0)).abs() < 1e-8);
    }

    #[test]
    fn small_discount_q_is_stage_cost() {
        let mdp = FiniteMdp::random(3, 2, 0.01, 4).unwrap();
        let f = StageCostFunctional::linear(&mdp);
        let sol = solve_optimal_linear(&mdp).unwrap();
        let vmax = sol.v_star.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let rho = Measure::uniform(3);
        let pi = DeterministicPolicy::new(vec![1, 1, 0]);
        let q = q_functional(&mdp, &f, &sol, &rho, &pi).unwrap();
        assert!((q - f.eval(&rho, &pi)).abs() <= 0.01 * vmax);
    }

    #[test]
    fn nonlinear_functional_rejected_by_linear_solver() {
        let mdp = single(1.0, 0.9);
        let f = StageCostFunctional::with_variance(&mdp, 1.0).unwrap();
        assert!(solve_linear_functional(&mdp, &f).is_err());
        let f = StageCostFunctional::linear(&mdp).shifted(1.0);
        let sol = solve_linear_functional(&mdp, &f).unwrap();
        assert!(sol.v_star[0].abs() < 1e-12);
    }
}
