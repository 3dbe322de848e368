//! Storage functionals, strict-dissipativity residuals and certificates.
//!
//! A storage functional `lambda` is bounded on the simplex and vanishes at the
//! optimal steady state `rho*`. Given a class-K-infinity function `alpha`, the
//! two residuals at a pair `(rho, pi)` with `rho+ = T_pi rho` are
//!
//! ```text
//! r_a = L[rho, pi] - gamma lambda[rho+] + lambda[rho] - alpha(D(rho || rho*))
//! r_b = L[rho, pi] - lambda[rho+] + lambda[rho] + (gamma - 1) V*[rho+] - alpha(D(rho || rho*))
//! ```
//!
//! and both must be nonnegative everywhere for the storage to certify the
//! problem. Certification in this crate is always relative to a finite audited
//! set of measures; see [`synthesize_storage`].

mod checks;
mod synthesis;

use serde::{Deserialize, Serialize};

use crate::dissimilarity::Dissimilarity;
use crate::error::{Error, Result};
use crate::functionals::{StageCostFunctional, SteadyState, ValueFunctional};
use crate::mdp::{DeterministicPolicy, FiniteMdp};
use crate::measure::Measure;

pub use checks::{
    check_d_stability, check_lyapunov, check_theorem1, simulate_measure_trajectory, EpsilonAudit,
    LyapunovConfig, LyapunovReport, MeasureTrajectory, StabilityConfig, StabilityReport,
    Theorem1Report,
};
pub use synthesis::{
    synthesize_storage, CertificateStatus, FsdsdCertificate, PolicySet, SampleManifest,
    SynthesisConfig, WorstPoint, C_MIN,
};

/// Tolerance used when auditing residuals on sample sets.
pub const AUDIT_TOL: f64 = 1e-9;

/// `lambda[rho] = w . rho + rho^T M rho - normalization`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageFunctional {
    pub linear_weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic_weights: Option<Vec<Vec<f64>>>,
    pub normalization: f64,
}

impl StorageFunctional {
    pub fn zero(n_states: usize) -> Self {
        StorageFunctional { linear_weights: vec![0.0; n_states], quadratic_weights: None, normalization: 0.0 }
    }

    /// Storage with the normalization chosen so that `lambda[rho*] = 0`.
    pub fn anchored(linear_weights: Vec<f64>, quadratic_weights: Option<Vec<Vec<f64>>>, rho_star: &Measure) -> Result<Self> {
        let n = linear_weights.len();
        if rho_star.len() != n {
            return Err(Error::input("storage weights and rho* have different sizes"));
        }
        if let Some(m) = &quadratic_weights {
            if m.len() != n || m.iter().any(|r| r.len() != n) {
                return Err(Error::input("quadratic storage weights must be an n x n matrix"));
            }
            for i in 0..n {
                for j in 0..i {
                    if (m[i][j] - m[j][i]).abs() > 1e-12 * (1.0 + m[i][j].abs()) {
                        return Err(Error::input(format!("quadratic storage weights not symmetric at ({i},{j})")));
                    }
                }
            }
        }
        if linear_weights.iter().chain(quadratic_weights.iter().flatten().flatten()).any(|x| !x.is_finite()) {
            return Err(Error::input("storage weights must be finite"));
        }
        let mut storage = StorageFunctional { linear_weights, quadratic_weights, normalization: 0.0 };
        storage.normalization = storage.raw(rho_star);
        Ok(storage)
    }

    pub fn len(&self) -> usize {
        self.linear_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.linear_weights.is_empty()
    }

    pub fn is_affine(&self) -> bool {
        self.quadratic_weights.is_none()
    }

    fn raw(&self, rho: &Measure) -> f64 {
        let w = rho.weights();
        let mut value = rho.dot(&self.linear_weights);
        if let Some(m) = &self.quadratic_weights {
            for (i, row) in m.iter().enumerate() {
                value += w[i] * row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        value
    }

    pub fn eval(&self, rho: &Measure) -> f64 {
        self.raw(rho) - self.normalization
    }

    /// Bound on `|lambda|` over the simplex.
    pub fn magnitude_bound(&self) -> f64 {
        let lin = self.linear_weights.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let quad = self
            .quadratic_weights
            .iter()
            .flatten()
            .flatten()
            .fold(0.0_f64, |m, x| m.max(x.abs()));
        lin + quad + self.normalization.abs()
    }
}

pub fn eval_storage(storage: &StorageFunctional, rho: &Measure) -> f64 {
    storage.eval(rho)
}

/// `alpha(x) = c x^p` with `c > 0`, `p >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassKInf {
    pub c: f64,
    pub p: f64,
}

impl ClassKInf {
    pub fn new(c: f64, p: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::input(format!("class-K-infinity slope must be positive, got {c}")));
        }
        if !(p >= 1.0 && p.is_finite()) {
            return Err(Error::input(format!("class-K-infinity exponent must be >= 1, got {p}")));
        }
        Ok(ClassKInf { c, p })
    }

    pub fn linear(c: f64) -> Result<Self> {
        ClassKInf::new(c, 1.0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        if self.p == 1.0 {
            self.c * x
        } else {
            self.c * x.powf(self.p)
        }
    }
}

/// Everything the residuals need besides the storage and `alpha`.
///
/// `stage` must already be normalized so that it vanishes at the steady
/// state, and `value` must be the optimal value functional of that stage cost.
#[derive(Clone, Copy)]
pub struct DissipativityProblem<'a> {
    pub mdp: &'a FiniteMdp,
    pub stage: &'a StageCostFunctional,
    pub value: &'a dyn ValueFunctional,
    pub rho_star: &'a Measure,
    pub dissimilarity: &'a Dissimilarity,
}

impl<'a> DissipativityProblem<'a> {
    pub fn new(
        mdp: &'a FiniteMdp,
        stage: &'a StageCostFunctional,
        value: &'a dyn ValueFunctional,
        steady: &'a SteadyState,
        dissimilarity: &'a Dissimilarity,
    ) -> Self {
        DissipativityProblem { mdp, stage, value, rho_star: &steady.rho_star, dissimilarity }
    }

    pub fn distance_to_steady(&self, rho: &Measure) -> Result<f64> {
        self.dissimilarity.eval(rho, self.rho_star)
    }

    pub fn rotated_cost(&self, storage: &StorageFunctional, rho: &Measure, policy: &DeterministicPolicy) -> Result<f64> {
        rotated_cost(self.stage, storage, self.mdp, rho, policy)
    }

    pub fn residuals(
        &self,
        storage: &StorageFunctional,
        alpha: &ClassKInf,
        rho: &Measure,
        policy: &DeterministicPolicy,
    ) -> Result<(f64, f64)> {
        let next = self.mdp.apply_transition(policy, rho)?;
        let d = self.distance_to_steady(rho)?;
        Ok(residuals_with(self, storage, alpha, rho, policy, &next, d, self.value.value(&next)))
    }

    pub fn rotated_value(&self, storage: &StorageFunctional, rho: &Measure) -> f64 {
        rotated_value(self.value, storage, rho)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn residuals_with(
    problem: &DissipativityProblem<'_>,
    storage: &StorageFunctional,
    alpha: &ClassKInf,
    rho: &Measure,
    policy: &DeterministicPolicy,
    next: &Measure,
    d: f64,
    v_next: f64,
) -> (f64, f64) {
    let gamma = problem.mdp.gamma();
    let cost = problem.stage.eval(rho, policy);
    let lam = storage.eval(rho);
    let lam_next = storage.eval(next);
    let a = alpha.eval(d);
    let r_a = cost - gamma * lam_next + lam - a;
    let r_b = cost - lam_next + lam + (gamma - 1.0) * v_next - a;
    (r_a, r_b)
}

/// `L[rho, pi] - gamma lambda[T_pi rho] + lambda[rho]`.
pub fn rotated_cost(
    functional: &StageCostFunctional,
    storage: &StorageFunctional,
    mdp: &FiniteMdp,
    rho: &Measure,
    policy: &DeterministicPolicy,
) -> Result<f64> {
    let next = mdp.apply_transition(policy, rho)?;
    Ok(functional.eval(rho, policy) - mdp.gamma() * storage.eval(&next) + storage.eval(rho))
}

pub fn fsdsd_residuals(
    problem: &DissipativityProblem<'_>,
    storage: &StorageFunctional,
    alpha: &ClassKInf,
    rho: &Measure,
    policy: &DeterministicPolicy,
) -> Result<(f64, f64)> {
    problem.residuals(storage, alpha, rho, policy)
}

/// `V*[rho] + lambda[rho]`.
pub fn rotated_value(value: &dyn ValueFunctional, storage: &StorageFunctional, rho: &Measure) -> f64 {
    value.value(rho) + storage.eval(rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::{optimal_steady_state, solve_linear_functional};
    use crate::mdp::DEFAULT_POLICY_CAP;
    use crate::rng::random_measures;

    #[test]
    fn storage_hand_value() {
        let rho_star = Measure::uniform(2);
        let s = StorageFunctional::anchored(vec![1.0, 2.0], None, &rho_star).unwrap();
        assert_eq!(s.normalization, 1.5);
        assert_eq!(s.eval(&Measure::dirac(0, 2).unwrap()), -0.5);
        assert_eq!(s.eval(&rho_star), 0.0);
        assert_eq!(StorageFunctional::zero(2).eval(&Measure::dirac(1, 2).unwrap()), 0.0);
    }

    #[test]
    fn quadratic_storage_vanishes_at_anchor() {
        let rho_star = Measure::new(vec![0.2, 0.3, 0.5]).unwrap();
        let m = vec![vec![1.0, -0.5, 0.0], vec![-0.5, 2.0, 0.3], vec![0.0, 0.3, -1.0]];
        let s = StorageFunctional::anchored(vec![0.1, 0.0, -0.4], Some(m), &rho_star).unwrap();
        assert!(s.eval(&rho_star).abs() <= 1e-12);
        let bad = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
        assert!(StorageFunctional::anchored(vec![0.0; 2], Some(bad), &Measure::uniform(2)).is_err());
    }

    #[test]
    fn alpha_validation() {
        assert!(ClassKInf::new(0.0, 1.0).is_err());
        assert!(ClassKInf::new(1.0, 0.5).is_err());
        let a = ClassKInf::new(2.0, 2.0).unwrap();
        assert_eq!(a.eval(0.0), 0.0);
        assert_eq!(a.eval(3.0), 18.0);
    }

    #[test]
    fn residuals_vanish_at_steady_pair_and_rotation_is_neutral_without_storage() {
        let mdp = FiniteMdp::random(3, 2, 0.9, 8).unwrap();
        let raw = StageCostFunctional::linear(&mdp);
        let steady = optimal_steady_state(&mdp, &raw, DEFAULT_POLICY_CAP).unwrap();
        let stage = steady.normalize(&raw);
        let sol = solve_linear_functional(&mdp, &stage).unwrap();
        let tv = Dissimilarity::TotalVariation;
        let problem = DissipativityProblem::new(&mdp, &stage, &sol, &steady, &tv);
        let zero = StorageFunctional::zero(3);
        let alpha = ClassKInf::linear(1.0).unwrap();
        let (ra, rb) = problem.residuals(&zero, &alpha, &steady.rho_star, &steady.policy).unwrap();
        let scale = sol.v_star.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        assert!(ra.abs() < 1e-8 * scale);
        assert!((rb - (mdp.gamma() - 1.0) * sol.value(&steady.rho_star)).abs() < 1e-8 * scale);
        for rho in random_measures(5, 0, 3, 10) {
            let pi = mdp.policy_space().policy(3);
            let lhs = problem.rotated_cost(&zero, &rho, &pi).unwrap();
            assert_eq!(lhs, stage.eval(&rho, &pi));
            assert_eq!(problem.rotated_value(&zero, &rho), sol.value(&rho));
        }
    }

    #[test]
    fn residuals_coincide_as_gamma_approaches_one() {
        let base = FiniteMdp::random(3, 2, 0.9, 3).unwrap().to_file();
        let mdp = FiniteMdp::new(base.transition, base.cost, 0.999_999).unwrap();
        let raw = StageCostFunctional::linear(&mdp);
        let steady = optimal_steady_state(&mdp, &raw, DEFAULT_POLICY_CAP).unwrap();
        let stage = steady.normalize(&raw);
        let sol = solve_linear_functional(&mdp, &stage).unwrap();
        let tv = Dissimilarity::TotalVariation;
        let problem = DissipativityProblem::new(&mdp, &stage, &sol, &steady, &tv);
        let storage = StorageFunctional::anchored(vec![0.3, -0.2, 0.5], None, &steady.rho_star).unwrap();
        let alpha = ClassKInf::linear(0.1).unwrap();
        for rho in random_measures(6, 0, 3, 10) {
            for pi in mdp.policy_space().enumerate(16).unwrap() {
                let (ra, rb) = problem.residuals(&storage, &alpha, &rho, &pi).unwrap();
                let next = mdp.apply_transition(&pi, &rho).unwrap();
                let scale = storage.eval(&next).abs() + sol.value(&next).abs();
                assert!((ra - rb).abs() <= 1e-4 * scale.max(1e-12), "{ra} vs {rb}");
            }
        }
    }
}
