//! Finite MDPs, deterministic policies and the closed-loop measure dynamics.

use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::FunctionalSpec;
use crate::measure::Measure;
use crate::rng::{random_measure, rng_for, stream};

/// Row-sum tolerance for transition probabilities.
pub const ROW_TOL: f64 = 1e-12;
/// Residual tolerance for stationary measures.
pub const STATIONARY_TOL: f64 = 1e-10;
pub const STATIONARY_MAX_ITER: usize = 1_000_000;
/// Default cap on `n_actions ^ n_states` for exhaustive policy search.
pub const DEFAULT_POLICY_CAP: usize = 4096;

/// On-disk problem description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `cost[s][a]`
    pub cost: Vec<Vec<f64>>,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functional: Option<FunctionalSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    EmptyDimension,
    Shape { detail: String },
    NegativeProbability { state: usize, action: usize, next: usize, value: f64 },
    RowSum { state: usize, action: usize, sum: f64 },
    NonFinite { location: String },
    GammaOutOfRange { gamma: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyDimension => write!(f, "n_states and n_actions must be positive"),
            Violation::Shape { detail } => write!(f, "shape mismatch: {detail}"),
            Violation::NegativeProbability { state, action, next, value } => {
                write!(f, "P[{state}][{action}][{next}] = {value} is negative")
            }
            Violation::RowSum { state, action, sum } => {
                write!(f, "row ({state},{action}) sums to {sum}")
            }
            Violation::NonFinite { location } => write!(f, "{location} is not finite"),
            Violation::GammaOutOfRange { gamma } => write!(f, "gamma out of (0,1): {gamma}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        let lines: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", lines.join("; "))
    }
}

impl MdpFile {
    /// Lists every violated invariant; an empty report means the problem is well formed.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let (n, m) = (self.n_states, self.n_actions);
        if n == 0 || m == 0 {
            violations.push(Violation::EmptyDimension);
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            violations.push(Violation::GammaOutOfRange { gamma: self.gamma });
        }
        if self.transition.len() != n {
            violations.push(Violation::Shape {
                detail: format!("transition has {} states, expected {n}", self.transition.len()),
            });
        }
        if self.cost.len() != n {
            violations.push(Violation::Shape {
                detail: format!("cost has {} states, expected {n}", self.cost.len()),
            });
        }
        for (s, per_action) in self.transition.iter().enumerate() {
            if per_action.len() != m {
                violations.push(Violation::Shape {
                    detail: format!("transition[{s}] has {} actions, expected {m}", per_action.len()),
                });
                continue;
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != n {
                    violations.push(Violation::Shape {
                        detail: format!("transition[{s}][{a}] has length {}, expected {n}", row.len()),
                    });
                    continue;
                }
                let mut finite = true;
                for (next, &p) in row.iter().enumerate() {
                    if !p.is_finite() {
                        finite = false;
                        violations.push(Violation::NonFinite {
                            location: format!("transition[{s}][{a}][{next}]"),
                        });
                    } else if p < 0.0 {
                        violations.push(Violation::NegativeProbability { state: s, action: a, next, value: p });
                    }
                }
                let sum: f64 = row.iter().sum();
                if finite && (sum - 1.0).abs() > ROW_TOL {
                    violations.push(Violation::RowSum { state: s, action: a, sum });
                }
            }
        }
        for (s, row) in self.cost.iter().enumerate() {
            if row.len() != m {
                violations.push(Violation::Shape {
                    detail: format!("cost[{s}] has {} actions, expected {m}", row.len()),
                });
                continue;
            }
            for (a, c) in row.iter().enumerate() {
                if !c.is_finite() {
                    violations.push(Violation::NonFinite { location: format!("cost[{s}][{a}]") });
                }
            }
        }
        ValidationReport { violations }
    }
}

/// A finite MDP: transition tensor, stage-cost table and discount factor.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    cost: Vec<f64>,
    gamma: f64,
}

impl FiniteMdp {
    pub fn new(transition: Vec<Vec<Vec<f64>>>, cost: Vec<Vec<f64>>, gamma: f64) -> Result<Self> {
        let n_states = transition.len();
        let n_actions = transition.first().map_or(0, Vec::len);
        FiniteMdp::from_file(&MdpFile {
            n_states,
            n_actions,
            transition,
            cost,
            gamma,
            functional: None,
        })
    }

    pub fn from_file(file: &MdpFile) -> Result<Self> {
        let report = file.validate();
        if !report.is_valid() {
            return Err(Error::InvalidMdp(report));
        }
        Ok(FiniteMdp {
            n_states: file.n_states,
            n_actions: file.n_actions,
            transition: file.transition.iter().flatten().flatten().copied().collect(),
            cost: file.cost.iter().flatten().copied().collect(),
            gamma: file.gamma,
        })
    }

    pub fn to_file(&self) -> MdpFile {
        let (n, m) = (self.n_states, self.n_actions);
        MdpFile {
            n_states: n,
            n_actions: m,
            transition: (0..n)
                .map(|s| (0..m).map(|a| self.row(s, a).to_vec()).collect())
                .collect(),
            cost: (0..n).map(|s| self.cost[s * m..(s + 1) * m].to_vec()).collect(),
            gamma: self.gamma,
            functional: None,
        }
    }

    /// Seeded random instance: Dirichlet(1) transition rows, costs uniform in `[-1, 1)`.
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, stream::INSTANCE);
        let transition = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| random_measure(&mut rng, n_states).into())
                    .collect()
            })
            .collect();
        let cost = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        FiniteMdp::new(transition, cost, gamma)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Distribution of the next state from `(state, action)`.
    pub fn row(&self, state: usize, action: usize) -> &[f64] {
        let n = self.n_states;
        let start = (state * self.n_actions + action) * n;
        &self.transition[start..start + n]
    }

    pub fn cost(&self, state: usize, action: usize) -> f64 {
        self.cost[state * self.n_actions + action]
    }

    /// Flat `n_states * n_actions` cost table, row-major in the state.
    pub fn cost_table(&self) -> &[f64] {
        &self.cost
    }

    pub fn max_abs_cost(&self) -> f64 {
        self.cost.iter().fold(0.0, |acc, c| acc.max(c.abs()))
    }

    pub fn policy_space(&self) -> PolicySpace {
        PolicySpace { n_states: self.n_states, n_actions: self.n_actions }
    }

    /// `P_pi[s][s'] = P[s][pi(s)][s']`.
    pub fn closed_loop_matrix(&self, policy: &DeterministicPolicy) -> Result<DMatrix<f64>> {
        policy.check(self)?;
        let n = self.n_states;
        Ok(DMatrix::from_fn(n, n, |s, t| self.row(s, policy.action(s))[t]))
    }

    /// The measure transition operator `T_pi`.
    pub fn apply_transition(&self, policy: &DeterministicPolicy, rho: &Measure) -> Result<Measure> {
        policy.check(self)?;
        if rho.len() != self.n_states {
            return Err(Error::input(format!(
                "measure has {} states, MDP has {}",
                rho.len(),
                self.n_states
            )));
        }
        Ok(self.propagate(policy, rho))
    }

    /// `T_pi` without argument checks; callers validate once up front.
    pub(crate) fn propagate(&self, policy: &DeterministicPolicy, rho: &Measure) -> Measure {
        let n = self.n_states;
        let mut next = vec![0.0; n];
        for (s, &mass) in rho.weights().iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (t, p) in self.row(s, policy.action(s)).iter().enumerate() {
                next[t] += p * mass;
            }
        }
        Measure::from_raw(next)
    }

    pub(crate) fn check_measure(&self, rho: &Measure) -> Result<()> {
        if rho.len() != self.n_states {
            return Err(Error::input(format!(
                "measure has {} states, MDP has {}",
                rho.len(),
                self.n_states
            )));
        }
        Ok(())
    }

    /// Long-run average of the closed-loop chain started from the uniform measure.
    ///
    /// The Cesàro limit is computed by iterating the lazy chain `(I + P_pi) / 2`,
    /// which shares its limit with the Cesàro average of `P_pi` but converges
    /// geometrically on periodic chains.
    pub fn stationary_measure(&self, policy: &DeterministicPolicy) -> Result<StationaryMeasure> {
        policy.check(self)?;
        let classes = self.recurrent_classes(policy);
        let start = Measure::uniform(self.n_states);
        let (measure, iterations, residual) = self.lazy_limit(policy, start)?;
        Ok(StationaryMeasure {
            unique: classes.len() == 1,
            measure,
            recurrent_classes: classes,
            iterations,
            residual,
        })
    }

    /// One stationary measure per closed recurrent class (the extreme points of
    /// the set of stationary measures).
    pub fn class_stationary_measures(&self, policy: &DeterministicPolicy) -> Result<Vec<(Vec<usize>, Measure)>> {
        policy.check(self)?;
        self.recurrent_classes(policy)
            .into_iter()
            .map(|class| {
                let mut w = vec![0.0; self.n_states];
                for &s in &class {
                    w[s] = 1.0;
                }
                let start = Measure::normalized(w)?;
                let (m, _, _) = self.lazy_limit(policy, start)?;
                Ok((class, m))
            })
            .collect()
    }

    fn lazy_limit(&self, policy: &DeterministicPolicy, start: Measure) -> Result<(Measure, usize, f64)> {
        let mut rho = start;
        let mut residual = f64::INFINITY;
        for it in 0..STATIONARY_MAX_ITER {
            let next = self.propagate(policy, &rho);
            residual = next.max_abs_diff(&rho);
            if residual <= STATIONARY_TOL {
                return Ok((rho, it, residual));
            }
            let lazy = rho
                .weights()
                .iter()
                .zip(next.weights())
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            rho = Measure::from_raw(lazy);
        }
        Err(Error::NonConvergence {
            what: "stationary measure",
            iterations: STATIONARY_MAX_ITER,
            residual,
        })
    }

    /// Closed communicating classes of the closed-loop chain, each sorted, in
    /// order of their smallest state.
    pub fn recurrent_classes(&self, policy: &DeterministicPolicy) -> Vec<Vec<usize>> {
        let n = self.n_states;
        let mut reach = vec![false; n * n];
        for s in 0..n {
            reach[s * n + s] = true;
            for (t, &p) in self.row(s, policy.action(s)).iter().enumerate() {
                if p > 0.0 {
                    reach[s * n + t] = true;
                }
            }
        }
        for k in 0..n {
            for i in 0..n {
                if reach[i * n + k] {
                    for j in 0..n {
                        if reach[k * n + j] {
                            reach[i * n + j] = true;
                        }
                    }
                }
            }
        }
        let recurrent: Vec<bool> = (0..n)
            .map(|i| (0..n).all(|j| !reach[i * n + j] || reach[j * n + i]))
            .collect();
        let mut assigned = vec![false; n];
        let mut classes = Vec::new();
        for i in 0..n {
            if !recurrent[i] || assigned[i] {
                continue;
            }
            let class: Vec<usize> = (0..n).filter(|&j| reach[i * n + j]).collect();
            for &j in &class {
                assigned[j] = true;
            }
            classes.push(class);
        }
        classes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryMeasure {
    pub measure: Measure,
    /// False when the closed loop has several recurrent classes; the measure
    /// is then the one reached from the uniform initial measure.
    pub unique: bool,
    pub recurrent_classes: Vec<Vec<usize>>,
    pub iterations: usize,
    pub residual: f64,
}

/// Stationary deterministic policy `pi: state -> action`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeterministicPolicy(Vec<usize>);

impl DeterministicPolicy {
    pub fn new(actions: Vec<usize>) -> Self {
        DeterministicPolicy(actions)
    }

    pub fn constant(n_states: usize, action: usize) -> Self {
        DeterministicPolicy(vec![action; n_states])
    }

    pub fn action(&self, state: usize) -> usize {
        self.0[state]
    }

    pub fn actions(&self) -> &[usize] {
        &self.0
    }

    pub fn check(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.0.len() != mdp.n_states() {
            return Err(Error::input(format!(
                "policy covers {} states, MDP has {}",
                self.0.len(),
                mdp.n_states()
            )));
        }
        if let Some((s, a)) = self.0.iter().enumerate().find(|(_, a)| **a >= mdp.n_actions()) {
            return Err(Error::input(format!(
                "policy picks action {a} in state {s}, only {} actions exist",
                mdp.n_actions()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for DeterministicPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// All deterministic stationary policies, in lexicographic order of the action
/// vector (state 0 most significant).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicySpace {
    pub(crate) n_states: usize,
    pub(crate) n_actions: usize,
}

impl PolicySpace {
    /// `n_actions ^ n_states`, or `None` on overflow.
    pub fn count(&self) -> Option<usize> {
        self.n_actions.checked_pow(u32::try_from(self.n_states).ok()?)
    }

    /// Policy count if it does not exceed `cap`.
    pub fn checked_count(&self, cap: usize) -> Result<usize> {
        match self.count() {
            Some(c) if c <= cap => Ok(c),
            Some(c) => Err(Error::EnumerationCap { count: c.to_string(), cap }),
            None => Err(Error::EnumerationCap {
                count: format!("{}^{}", self.n_actions, self.n_states),
                cap,
            }),
        }
    }

    pub fn policy(&self, mut index: usize) -> DeterministicPolicy {
        let mut actions = vec![0; self.n_states];
        for s in (0..self.n_states).rev() {
            actions[s] = index % self.n_actions;
            index /= self.n_actions;
        }
        DeterministicPolicy(actions)
    }

    pub fn index_of(&self, policy: &DeterministicPolicy) -> usize {
        policy.0.iter().fold(0, |acc, &a| acc * self.n_actions + a)
    }

    /// Enumerates every policy, failing if there are more than `cap`.
    pub fn enumerate(&self, cap: usize) -> Result<Vec<DeterministicPolicy>> {
        let count = self.checked_count(cap)?;
        Ok((0..count).map(|i| self.policy(i)).collect())
    }
}
