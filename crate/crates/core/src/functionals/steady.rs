use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mdp::{DeterministicPolicy, FiniteMdp};
use crate::measure::Measure;

use super::stage::StageCostFunctional;

/// Optimal steady state `(rho*, pi)` and its unshifted stage cost `L_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub rho_star: Measure,
    pub l0: f64,
    pub policy: DeterministicPolicy,
}

impl SteadyState {
    /// The functional shifted so that it vanishes at the steady state.
    pub fn normalize(&self, functional: &StageCostFunctional) -> StageCostFunctional {
        functional.shifted(self.l0)
    }
}

/// Minimizes `L[rho, pi]` over stationary pairs: every deterministic policy and
/// every extreme stationary measure of its closed loop (one per recurrent
/// class). Ties keep the lowest policy index, then the lowest class.
pub fn optimal_steady_state(mdp: &FiniteMdp, functional: &StageCostFunctional, cap: usize) -> Result<SteadyState> {
    let policies = mdp.policy_space().enumerate(cap)?;
    let mut best: Option<SteadyState> = None;
    for policy in policies {
        for (_, rho) in mdp.class_stationary_measures(&policy)? {
            let cost = functional.eval_unshifted(&rho, &policy);
            let improves = match &best {
                None => true,
                Some(b) => cost < b.l0 - 1e-12 * b.l0.abs().max(1.0),
            };
            if improves {
                best = Some(SteadyState { rho_star: rho, l0: cost, policy: policy.clone() });
            }
        }
    }
    Ok(best.expect("at least one policy and one recurrent class"))
}
