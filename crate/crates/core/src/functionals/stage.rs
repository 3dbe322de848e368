use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{DeterministicPolicy, FiniteMdp};
use crate::measure::Measure;

/// File form of a stage-cost functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSpec {
    pub kind: FunctionalKindName,
    #[serde(default)]
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalKindName {
    Linear,
    LinearPlusVariance,
    #[serde(rename = "linear_plus_kl")]
    LinearPlusKl,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageKind {
    /// `E_{s~rho}[l(s, pi(s))]`
    Linear,
    /// Linear part plus `beta * Var_{s~rho}[l(s, pi(s))]`.
    LinearPlusVariance { beta: f64 },
    /// Linear part plus `beta * KL(rho || reference)`.
    LinearPlusKl { beta: f64, reference: Measure },
}

/// A stage cost `L[rho, pi]` on measures, built on an MDP cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCostFunctional {
    n_actions: usize,
    costs: Vec<f64>,
    kind: StageKind,
    shift: f64,
}

impl StageCostFunctional {
    pub fn linear(mdp: &FiniteMdp) -> Self {
        StageCostFunctional {
            n_actions: mdp.n_actions(),
            costs: mdp.cost_table().to_vec(),
            kind: StageKind::Linear,
            shift: 0.0,
        }
    }

    pub fn with_variance(mdp: &FiniteMdp, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        Ok(StageCostFunctional {
            kind: StageKind::LinearPlusVariance { beta },
            ..Self::linear(mdp)
        })
    }

    pub fn with_kl(mdp: &FiniteMdp, beta: f64, reference: Measure) -> Result<Self> {
        check_beta(beta)?;
        if reference.len() != mdp.n_states() {
            return Err(Error::input("KL reference measure has the wrong number of states"));
        }
        if let Some(s) = reference.weights().iter().position(|w| *w <= 0.0) {
            return Err(Error::Domain(format!(
                "KL reference measure has zero weight at state {s}"
            )));
        }
        Ok(StageCostFunctional {
            kind: StageKind::LinearPlusKl { beta, reference },
            ..Self::linear(mdp)
        })
    }

    pub fn from_spec(mdp: &FiniteMdp, spec: &FunctionalSpec) -> Result<Self> {
        match spec.kind {
            FunctionalKindName::Linear => Ok(Self::linear(mdp)),
            FunctionalKindName::LinearPlusVariance => Self::with_variance(mdp, spec.beta),
            FunctionalKindName::LinearPlusKl => {
                let reference = spec
                    .reference
                    .clone()
                    .ok_or_else(|| Error::input("linear_plus_kl needs a reference measure"))?;
                Self::with_kl(mdp, spec.beta, Measure::new(reference)?)
            }
        }
    }

    pub fn to_spec(&self) -> FunctionalSpec {
        match &self.kind {
            StageKind::Linear => FunctionalSpec { kind: FunctionalKindName::Linear, beta: 0.0, reference: None },
            StageKind::LinearPlusVariance { beta } => FunctionalSpec {
                kind: FunctionalKindName::LinearPlusVariance,
                beta: *beta,
                reference: None,
            },
            StageKind::LinearPlusKl { beta, reference } => FunctionalSpec {
                kind: FunctionalKindName::LinearPlusKl,
                beta: *beta,
                reference: Some(reference.weights().to_vec()),
            },
        }
    }

    /// The same functional with `L_0 = shift` subtracted.
    pub fn shifted(&self, shift: f64) -> Self {
        StageCostFunctional { shift, ..self.clone() }
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn kind(&self) -> &StageKind {
        &self.kind
    }

    /// True when the functional is exactly linear in `rho` (Linear kind, or a
    /// nonlinear kind with `beta = 0`).
    pub fn is_linear(&self) -> bool {
        match &self.kind {
            StageKind::Linear => true,
            StageKind::LinearPlusVariance { beta } | StageKind::LinearPlusKl { beta, .. } => *beta == 0.0,
        }
    }

    pub fn cost(&self, state: usize, action: usize) -> f64 {
        self.costs[state * self.n_actions + action]
    }

    /// Shifted per-(state, action) costs of the linear part.
    pub fn shifted_costs(&self) -> Vec<f64> {
        self.costs.iter().map(|c| c - self.shift).collect()
    }

    pub fn eval(&self, rho: &Measure, policy: &DeterministicPolicy) -> f64 {
        self.eval_unshifted(rho, policy) - self.shift
    }

    pub fn eval_unshifted(&self, rho: &Measure, policy: &DeterministicPolicy) -> f64 {
        let w = rho.weights();
        let mean: f64 = w
            .iter()
            .enumerate()
            .map(|(s, p)| p * self.cost(s, policy.action(s)))
            .sum();
        match &self.kind {
            StageKind::Linear => mean,
            StageKind::LinearPlusVariance { beta } => {
                let second: f64 = w
                    .iter()
                    .enumerate()
                    .map(|(s, p)| p * self.cost(s, policy.action(s)).powi(2))
                    .sum();
                mean + beta * (second - mean * mean).max(0.0)
            }
            StageKind::LinearPlusKl { beta, reference } => mean + beta * kl_unchecked(w, reference.weights()),
        }
    }

    /// Bound on `|L[rho, pi]|` over the whole simplex.
    pub fn magnitude_bound(&self) -> f64 {
        let max_abs = self.costs.iter().fold(0.0_f64, |m, c| m.max((c - self.shift).abs()));
        let extra = match &self.kind {
            StageKind::Linear => 0.0,
            StageKind::LinearPlusVariance { beta } => {
                let (lo, hi) = self
                    .costs
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(*c), hi.max(*c)));
                beta * (hi - lo).powi(2) / 4.0
            }
            StageKind::LinearPlusKl { beta, reference } => {
                let min_ref = reference.weights().iter().fold(1.0_f64, |m, w| m.min(*w));
                beta * (1.0 / min_ref).ln()
            }
        };
        max_abs + extra
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta >= 0.0 {
        Ok(())
    } else {
        Err(Error::input(format!("beta must be finite and nonnegative, got {beta}")))
    }
}

/// KL divergence for a reference with full support.
fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}
