//! Dissipativity analysis of finite Markov decision processes lifted to the
//! space of probability measures over states.
//!
//! The crate covers the measure-space dynamics `rho+ = T_pi rho`, stage-cost
//! and value functionals, dissimilarities between measures, storage synthesis
//! for strict dissipativity certificates, finite-horizon surrogates of the
//! optimal action-value functional, and learning of their parameters.

pub mod dissimilarity;
pub mod dissipativity;
pub mod error;
pub mod functionals;
pub mod learning;
mod lp;
pub mod mdp;
pub mod measure;
pub mod ocp;
pub mod rng;
pub mod trajectory;

pub use dissimilarity::{Dissimilarity, GroundMetric};
pub use error::{Error, Result};
pub use functionals::{
    optimal_steady_state, solve_optimal_linear, FunctionalSpec, StageCostFunctional, SteadyState,
    ValueFunctional, ValueSolution,
};
pub use mdp::{DeterministicPolicy, FiniteMdp, MdpFile, PolicySpace, DEFAULT_POLICY_CAP};
pub use measure::Measure;
