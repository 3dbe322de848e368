//! Stage-cost functionals on measures and the discounted optimal-control
//! objects built on them: `V*`, `Q*`, `A*`, and the optimal steady state.
//!
//! For linear stage costs `L[rho, pi] = E_{s~rho}[l(s, pi(s))]` the value
//! functional is `V*[rho] = rho . v*`, where `v*` solves the classic Bellman
//! equation, and `Q*[delta_s, pi] = q*(s, pi(s))`. Nonlinear functionals are
//! handled by truncated measure-space rollouts and exhaustive search over
//! deterministic stationary policies.

mod rollout;
mod stage;
mod steady;
mod value;

pub use rollout::{
    discounted_rollout, nonlinear_rollout_value, solve_optimal_nonlinear, Rollout, RolloutValue,
};
pub(crate) use rollout::argmin_with_ties;
pub use stage::{FunctionalKindName, FunctionalSpec, StageCostFunctional, StageKind};
pub use steady::{optimal_steady_state, SteadyState};
pub use value::{
    advantage_functional, policy_value_linear, q_functional, solve_linear_functional,
    solve_optimal_linear, value_functional, ValueFunctional, ValueSolution,
};
