//! Batch fitted Q-iteration for classic action values, and the lift of a
//! learned table back to finite-horizon parameters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dissimilarity::Dissimilarity;
use crate::dissipativity::StorageFunctional;
use crate::error::{Error, Result};
use crate::functionals::{StageCostFunctional, SteadyState, ValueSolution};
use crate::lp::LinearProgram;
use crate::mdp::{DeterministicPolicy, FiniteMdp};
use crate::measure::Measure;
use crate::ocp::{q_theta, tabular_theta, ThetaParameters};
use crate::rng::{random_measures, rng_for, stream};
use crate::trajectory::TransitionSampler;

const TIE_TOL: f64 = 1e-11;
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 5;
const SVD_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QParameterization {
    Tabular {
        n_states: usize,
        n_actions: usize,
        /// Row-major `n_states x n_actions`.
        table: Vec<f64>,
    },
    LinearFeatures {
        n_states: usize,
        n_actions: usize,
        /// One feature vector per `(s, a)`, row-major.
        features: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
}

impl QParameterization {
    pub fn tabular(n_states: usize, n_actions: usize, table: Vec<f64>) -> Result<Self> {
        if table.len() != n_states * n_actions {
            return Err(Error::input(format!(
                "tabular parameters need {} entries, got {}",
                n_states * n_actions,
                table.len()
            )));
        }
        Ok(QParameterization::Tabular { n_states, n_actions, table })
    }

    pub fn tabular_zero(n_states: usize, n_actions: usize) -> Self {
        QParameterization::Tabular { n_states, n_actions, table: vec![0.0; n_states * n_actions] }
    }

    pub fn linear(n_states: usize, n_actions: usize, features: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if features.len() != n_states * n_actions {
            return Err(Error::input("one feature vector per (state, action) pair is required"));
        }
        if features.iter().any(|f| f.len() != weights.len()) {
            return Err(Error::input("feature dimension does not match the weight length"));
        }
        Ok(QParameterization::LinearFeatures { n_states, n_actions, features, weights })
    }

    /// Linear features equal to the indicator of each `(s, a)` pair.
    pub fn one_hot(n_states: usize, n_actions: usize, weights: Vec<f64>) -> Result<Self> {
        let d = n_states * n_actions;
        let features = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        QParameterization::linear(n_states, n_actions, features, weights)
    }

    pub fn n_states(&self) -> usize {
        match self {
            QParameterization::Tabular { n_states, .. } | QParameterization::LinearFeatures { n_states, .. } => *n_states,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            QParameterization::Tabular { n_actions, .. } | QParameterization::LinearFeatures { n_actions, .. } => *n_actions,
        }
    }

    pub fn q_eval(&self, state: usize, action: usize) -> Result<f64> {
        if state >= self.n_states() || action >= self.n_actions() {
            return Err(Error::input(format!("(state {state}, action {action}) out of range")));
        }
        Ok(self.q_unchecked(state, action))
    }

    fn q_unchecked(&self, state: usize, action: usize) -> f64 {
        match self {
            QParameterization::Tabular { n_actions, table, .. } => table[state * n_actions + action],
            QParameterization::LinearFeatures { n_actions, features, weights, .. } => {
                features[state * n_actions + action].iter().zip(weights).map(|(f, w)| f * w).sum()
            }
        }
    }

    /// All values, row-major.
    pub fn q_table(&self) -> Vec<f64> {
        (0..self.n_states())
            .flat_map(|s| (0..self.n_actions()).map(move |a| (s, a)))
            .map(|(s, a)| self.q_unchecked(s, a))
            .collect()
    }

    /// `pi(s) = argmin_a q(s, a)`, lowest index among ties.
    pub fn greedy_policy(&self) -> DeterministicPolicy {
        greedy_from_table(&self.q_table(), self.n_actions())
    }

    fn check_mdp(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.n_states() != mdp.n_states() || self.n_actions() != mdp.n_actions() {
            return Err(Error::input("parameterization dimensions do not match the MDP"));
        }
        Ok(())
    }
}

pub fn q_eval(param: &QParameterization, state: usize, action: usize) -> Result<f64> {
    param.q_eval(state, action)
}

pub fn greedy_policy(param: &QParameterization) -> DeterministicPolicy {
    param.greedy_policy()
}

fn greedy_from_table(q: &[f64], n_actions: usize) -> DeterministicPolicy {
    let scale = q.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    DeterministicPolicy::new(
        q.chunks(n_actions)
            .map(|row| {
                let best = row.iter().copied().fold(f64::INFINITY, f64::min);
                row.iter().position(|x| *x <= best + TIE_TOL * scale).expect("non-empty row")
            })
            .collect(),
    )
}

fn row_minima(q: &[f64], n_actions: usize) -> Vec<f64> {
    q.chunks(n_actions).map(|row| row.iter().copied().fold(f64::INFINITY, f64::min)).collect()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One exact Bellman backup `l(s, a) + gamma E[min_a' q(s', a')]`.
pub fn exact_q_sweep(mdp: &FiniteMdp, q: &[f64]) -> Vec<f64> {
    let m = mdp.n_actions();
    let v = row_minima(q, m);
    (0..mdp.n_states())
        .flat_map(|s| (0..m).map(move |a| (s, a)))
        .map(|(s, a)| mdp.cost(s, a) + mdp.gamma() * mdp.row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum::<f64>())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSize {
    pub initial: f64,
    /// `eta_t = initial / (1 + decay t)`.
    pub decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exploration {
    pub start: f64,
    pub end: f64,
    /// `eps_r = end + (start - end) decay^r` after `r` batches.
    pub decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningConfig {
    pub n_episodes: usize,
    pub episode_length: usize,
    /// Episodes collected between fitting rounds.
    pub batch_size: usize,
    /// Least-squares solves per fitting round.
    pub fitted_iterations: usize,
    /// Maximum solves in the final round, which stops early once iterates settle.
    pub final_iterations: usize,
    /// Solves between refreshes of the frozen target parameters.
    pub target_update: usize,
    pub step_size: StepSize,
    pub epsilon: Exploration,
    pub seed: u64,
    /// Success threshold on the reported error.
    pub tolerance: f64,
    /// Initial states drawn uniformly from this list; all states when absent.
    pub start_states: Option<Vec<usize>>,
}

impl Default for LearningConfig {
    fn default() -> Self {
        LearningConfig {
            n_episodes: 2000,
            episode_length: 20,
            batch_size: 100,
            fitted_iterations: 50,
            final_iterations: 10_000,
            target_update: 1,
            step_size: StepSize { initial: 1.0, decay: 0.0 },
            epsilon: Exploration { start: 1.0, end: 0.05, decay: 0.9 },
            seed: 0,
            tolerance: 1e-3,
            start_states: None,
        }
    }
}

impl LearningConfig {
    pub fn validate(&self, mdp: &FiniteMdp) -> Result<()> {
        let positive = [
            ("n_episodes", self.n_episodes),
            ("episode_length", self.episode_length),
            ("batch_size", self.batch_size),
            ("fitted_iterations", self.fitted_iterations),
            ("final_iterations", self.final_iterations),
            ("target_update", self.target_update),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::input(format!("{name} must be positive")));
            }
        }
        if !(self.step_size.initial > 0.0 && self.step_size.initial.is_finite()) {
            return Err(Error::input("step size must be positive"));
        }
        if !(self.step_size.decay >= 0.0) {
            return Err(Error::input("step-size decay must be nonnegative"));
        }
        let e = &self.epsilon;
        if ![e.start, e.end, e.decay].iter().all(|x| (0.0..=1.0).contains(x)) {
            return Err(Error::input("epsilon start, end and decay must lie in [0, 1]"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::input("tolerance must be positive"));
        }
        if let Some(starts) = &self.start_states {
            if starts.is_empty() || starts.iter().any(|s| *s >= mdp.n_states()) {
                return Err(Error::input("start states must be a non-empty list of valid states"));
            }
        }
        Ok(())
    }

    fn epsilon_at(&self, round: usize) -> f64 {
        let e = &self.epsilon;
        e.end + (e.start - e.end) * e.decay.powi(round as i32)
    }

    fn step_at(&self, t: usize) -> f64 {
        self.step_size.initial / (1.0 + self.step_size.decay * t as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    /// `||q - q*||_inf` when a reference solution is supplied.
    pub sup_error: Option<f64>,
    /// Root-mean-square least-squares residual over all transitions.
    pub ls_residual: f64,
    /// Sup-norm Bellman residual of the empirical model on visited pairs.
    pub bellman_residual: f64,
    pub epsilon: f64,
    pub transitions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningStatus {
    Converged,
    NotConverged,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningOutcome {
    pub param: QParameterization,
    pub history: Vec<HistoryEntry>,
    pub status: LearningStatus,
    /// `(state, action)` pairs never observed.
    pub unvisited: Vec<(usize, usize)>,
    /// Sup-norm error against the reference, or the empirical Bellman residual without one.
    pub final_error: f64,
}

/// Aggregated transition counts.
struct Dataset {
    n: usize,
    m: usize,
    visits: Vec<usize>,
    next: Vec<usize>,
    cost_sum: Vec<f64>,
    transitions: usize,
}

impl Dataset {
    fn new(n: usize, m: usize) -> Self {
        Dataset { n, m, visits: vec![0; n * m], next: vec![0; n * m * n], cost_sum: vec![0.0; n * m], transitions: 0 }
    }

    fn record(&mut self, s: usize, a: usize, cost: f64, s_next: usize) {
        let i = s * self.m + a;
        self.visits[i] += 1;
        self.next[i * self.n + s_next] += 1;
        self.cost_sum[i] += cost;
        self.transitions += 1;
    }

    /// Per-pair mean targets `mean(cost) + gamma mean(min_a' q(s', a'))`.
    fn targets(&self, gamma: f64, target_q: &[f64]) -> Vec<Option<f64>> {
        let v = row_minima(target_q, self.m);
        (0..self.n * self.m)
            .map(|i| {
                let k = self.visits[i];
                (k > 0).then(|| {
                    let nexts = &self.next[i * self.n..(i + 1) * self.n];
                    let future: f64 = nexts.iter().zip(&v).map(|(c, x)| *c as f64 * x).sum();
                    (self.cost_sum[i] + gamma * future) / k as f64
                })
            })
            .collect()
    }

    /// RMS of `q(s, a) - target` over individual transitions.
    fn ls_residual(&self, gamma: f64, q: &[f64], target_q: &[f64]) -> f64 {
        if self.transitions == 0 {
            return 0.0;
        }
        let v = row_minima(target_q, self.m);
        let mut total = 0.0;
        for i in 0..self.n * self.m {
            let k = self.visits[i];
            if k == 0 {
                continue;
            }
            let mean_cost = self.cost_sum[i] / k as f64;
            for (s_next, c) in self.next[i * self.n..(i + 1) * self.n].iter().enumerate() {
                if *c > 0 {
                    let r = q[i] - (mean_cost + gamma * v[s_next]);
                    total += *c as f64 * r * r;
                }
            }
        }
        (total / self.transitions as f64).sqrt()
    }

    fn unvisited(&self) -> Vec<(usize, usize)> {
        (0..self.n * self.m).filter(|i| self.visits[*i] == 0).map(|i| (i / self.m, i % self.m)).collect()
    }
}

/// Least-squares fit of the parameters to per-pair targets; parameters with
/// no data keep their current values.
fn ls_solve(param: &QParameterization, targets: &[Option<f64>], visits: &[usize]) -> Result<QParameterization> {
    match param {
        QParameterization::Tabular { n_states, n_actions, table } => {
            let table = table.iter().zip(targets).map(|(old, t)| t.unwrap_or(*old)).collect();
            Ok(QParameterization::Tabular { n_states: *n_states, n_actions: *n_actions, table })
        }
        QParameterization::LinearFeatures { n_states, n_actions, features, weights } => {
            let rows: Vec<usize> = (0..targets.len()).filter(|i| targets[*i].is_some()).collect();
            if rows.is_empty() {
                return Ok(param.clone());
            }
            let d = weights.len();
            let current = param.q_table();
            let a = DMatrix::from_fn(rows.len(), d, |r, j| (visits[rows[r]] as f64).sqrt() * features[rows[r]][j]);
            let b = DVector::from_iterator(
                rows.len(),
                rows.iter().map(|&i| (visits[i] as f64).sqrt() * (targets[i].expect("visited") - current[i])),
            );
            let delta = a
                .svd(true, true)
                .solve(&b, SVD_EPS)
                .map_err(|e| Error::Numerical(format!("least-squares solve failed: {e}")))?;
            let weights = weights.iter().zip(delta.iter()).map(|(w, dw)| w + dw).collect();
            Ok(QParameterization::LinearFeatures {
                n_states: *n_states,
                n_actions: *n_actions,
                features: features.clone(),
                weights,
            })
        }
    }
}

/// `param + eta (fitted - param)` in parameter space.
fn damped(param: &QParameterization, fitted: QParameterization, eta: f64) -> QParameterization {
    if eta == 1.0 {
        return fitted;
    }
    match (param, fitted) {
        (QParameterization::Tabular { table: old, .. }, QParameterization::Tabular { n_states, n_actions, table }) => {
            let table = old.iter().zip(&table).map(|(o, n)| o + eta * (n - o)).collect();
            QParameterization::Tabular { n_states, n_actions, table }
        }
        (
            QParameterization::LinearFeatures { weights: old, .. },
            QParameterization::LinearFeatures { n_states, n_actions, features, weights },
        ) => {
            let weights = old.iter().zip(&weights).map(|(o, n)| o + eta * (n - o)).collect();
            QParameterization::LinearFeatures { n_states, n_actions, features, weights }
        }
        _ => unreachable!("fitting preserves the parameterization kind"),
    }
}

/// Batch fitted Q-iteration on epsilon-greedy data.
///
/// Episodes are collected in batches under an epsilon-greedy policy derived
/// from the current parameters; after each batch the parameters are refit
/// `fitted_iterations` times on all data gathered so far against frozen
/// targets `l + gamma min_a' q_target(s', a')`. Deterministic for a given seed.
/// When `reference` is given, the history records `||q - q*||_inf`.
pub fn fitted_q_learning(
    mdp: &FiniteMdp,
    param0: &QParameterization,
    config: &LearningConfig,
    reference: Option<&ValueSolution>,
) -> Result<LearningOutcome> {
    param0.check_mdp(mdp)?;
    config.validate(mdp)?;
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let gamma = mdp.gamma();
    let sampler = TransitionSampler::new(mdp);
    let mut rng = rng_for(config.seed, stream::LEARNING);
    let mut data = Dataset::new(n, m);

    let error_of = |q: &[f64], data: &Dataset| -> (Option<f64>, f64) {
        let sup = reference.map(|r| sup_diff(q, &r.q_star));
        let targets = data.targets(gamma, q);
        let bellman = q
            .iter()
            .zip(&targets)
            .filter_map(|(x, t)| t.map(|t| (x - t).abs()))
            .fold(0.0, f64::max);
        (sup, bellman)
    };

    let mut param = param0.clone();
    let mut target = param.clone();
    let initial_error = reference.map(|r| sup_diff(&param.q_table(), &r.q_star));
    let mut history = Vec::new();
    let mut t = 0;
    let mut strikes = 0;
    let mut status = LearningStatus::NotConverged;
    let rounds = config.n_episodes.div_ceil(config.batch_size);

    'rounds: for round in 0..rounds {
        let eps = config.epsilon_at(round);
        let policy = param.greedy_policy();
        let episodes = config.batch_size.min(config.n_episodes - round * config.batch_size);
        for _ in 0..episodes {
            let s0 = match &config.start_states {
                Some(list) => list[rng.random_range(0..list.len())],
                None => rng.random_range(0..n),
            };
            let (states, actions, costs) = sampler.rollout(s0, config.episode_length, &mut rng, |s, r| {
                if eps > 0.0 && r.random::<f64>() < eps {
                    r.random_range(0..m)
                } else {
                    policy.action(s)
                }
            });
            for k in 0..actions.len() {
                data.record(states[k], actions[k], costs[k], states[k + 1]);
            }
        }

        let last = round + 1 == rounds;
        let iterations = if last { config.final_iterations } else { config.fitted_iterations };
        for _ in 0..iterations {
            if t % config.target_update == 0 {
                target = param.clone();
            }
            let target_q = target.q_table();
            let fitted = ls_solve(&param, &data.targets(gamma, &target_q), &data.visits)?;
            let next = damped(&param, fitted, config.step_at(t));
            let change = sup_diff(&next.q_table(), &param.q_table());
            param = next;
            let q = param.q_table();
            let (sup_error, bellman_residual) = error_of(&q, &data);
            history.push(HistoryEntry {
                iteration: t,
                sup_error,
                ls_residual: data.ls_residual(gamma, &q, &target_q),
                bellman_residual,
                epsilon: eps,
                transitions: data.transitions,
            });
            t += 1;

            let metric = sup_error.unwrap_or(bellman_residual);
            let baseline = initial_error.unwrap_or(history[0].bellman_residual).max(1e-12);
            if metric >= DIVERGENCE_FACTOR * baseline {
                strikes += 1;
                if strikes >= DIVERGENCE_PATIENCE {
                    status = LearningStatus::Diverged;
                    break 'rounds;
                }
            } else {
                strikes = 0;
            }
            let scale = q.iter().fold(1.0_f64, |acc, x| acc.max(x.abs()));
            if last && change <= 1e-13 * scale {
                break;
            }
        }
    }

    let q = param.q_table();
    let (sup, bellman) = error_of(&q, &data);
    let final_error = sup.unwrap_or(bellman);
    if status != LearningStatus::Diverged && final_error <= config.tolerance {
        status = LearningStatus::Converged;
    }
    Ok(LearningOutcome { param, history, status, unvisited: data.unvisited(), final_error })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiftConfig {
    pub horizon: usize,
    /// Random measures added to the Dirac design set.
    pub n_samples: usize,
    pub seed: u64,
    /// Acceptance threshold on the relative Bellman residual and the fit residuals.
    pub tolerance: f64,
    /// Slope of `alpha0` imposed on the stage cost.
    pub alpha0_c: f64,
    pub cap: usize,
}

impl Default for LiftConfig {
    fn default() -> Self {
        LiftConfig {
            horizon: 3,
            n_samples: 50,
            seed: 0,
            tolerance: 1e-2,
            alpha0_c: crate::dissipativity::C_MIN,
            cap: crate::mdp::DEFAULT_POLICY_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftReport {
    pub accepted: bool,
    /// `max |q - (l + gamma P min q)| / max(1, ||q||_inf)` of the shifted learned table.
    pub bellman_residual: f64,
    /// `max |Q_theta[delta_s, pi] - q(s, pi(s))|` over states and policies.
    pub dirac_residual: f64,
    /// `max |Q_theta[rho, pi] - sum_s rho(s) q(s, pi(s))|` over sampled measures.
    pub design_residual: f64,
    /// Best achievable minimum slack of the storage constraints.
    pub storage_slack: f64,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftOutcome {
    pub theta: ThetaParameters,
    pub report: LiftReport,
}

/// Turns a learned action-value table for the raw costs into a
/// [`ThetaParameters`] candidate.
///
/// The table is shifted to the normalized cost, the stage and terminal
/// tables are built so that `Q_theta` interpolates it exactly, and an affine
/// storage is chosen by linear programming so that the terminal cost is
/// nonnegative and the stage cost dominates `alpha0(D)` at every vertex.
/// The candidate is rejected when the table is not Bellman-consistent with
/// the model, when no storage meets the constraints, or when the fit
/// residuals exceed the tolerance.
pub fn theta_from_learned(
    mdp: &FiniteMdp,
    functional: &StageCostFunctional,
    learned: &QParameterization,
    steady: &SteadyState,
    dissimilarity: &Dissimilarity,
    config: &LiftConfig,
) -> Result<LiftOutcome> {
    learned.check_mdp(mdp)?;
    if !functional.is_linear() {
        return Err(Error::input("lifting learned values needs a linear stage cost"));
    }
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let gamma = mdp.gamma();
    let offset = functional.shift() / (1.0 - gamma);
    let q_flat: Vec<f64> = learned.q_table().iter().map(|x| x - offset).collect();
    let q: Vec<Vec<f64>> = q_flat.chunks(m).map(<[f64]>::to_vec).collect();
    let v = row_minima(&q_flat, m);
    let mut reasons = Vec::new();

    let backup: Vec<f64> = (0..n * m)
        .map(|i| {
            let (s, a) = (i / m, i % m);
            functional.cost(s, a) - functional.shift() + gamma * mdp.row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum::<f64>()
        })
        .collect();
    let q_scale = q_flat.iter().fold(1.0_f64, |acc, x| acc.max(x.abs()));
    let bellman_residual = sup_diff(&q_flat, &backup) / q_scale;
    if bellman_residual > config.tolerance {
        reasons.push(format!("learned values are not Bellman-consistent (relative residual {bellman_residual:e})"));
    }

    // Storage LP: vertex constraints on the terminal and stage tables.
    let expect = |row: &[f64], x: &[f64]| row.iter().zip(x).map(|(p, y)| p * y).sum::<f64>();
    let d_vertex: Vec<f64> = (0..n)
        .map(|s| dissimilarity.eval(&Measure::dirac(s, n)?, &steady.rho_star))
        .collect::<Result<_>>()?;
    let bound = 10.0 * q_scale.max(1.0);
    let build = |lp: &mut LinearProgram, t: Option<crate::lp::Var>, floor: f64| {
        let w: Vec<_> = (0..n).map(|_| lp.var(0.0, (-bound, bound))).collect();
        for s in 0..n {
            for a in 0..m {
                let row = mdp.row(s, a);
                let constant = q[s][a] - expect(row, &v) - config.alpha0_c * d_vertex[s];
                let mut terms: Vec<_> = (0..n).map(|j| (w[j], -row[j])).collect();
                terms[s].1 += 1.0;
                if let Some(t) = t {
                    terms.push((t, -1.0));
                }
                lp.ge(&terms, floor - constant);
            }
            let mut terms: Vec<_> = (0..n).map(|j| (w[j], -steady.rho_star[j])).collect();
            terms[s].1 += 1.0;
            if let Some(t) = t {
                terms.push((t, -1.0));
            }
            lp.ge(&terms, floor - v[s]);
        }
        w
    };
    let mut lp = LinearProgram::maximize();
    let t = lp.var(1.0, (f64::NEG_INFINITY, 1.0));
    build(&mut lp, Some(t), 0.0);
    let storage_slack = lp.solve()?.get(t);
    let weights = if storage_slack >= -crate::dissipativity::AUDIT_TOL {
        let mut lp = LinearProgram::minimize();
        let w = build(&mut lp, None, storage_slack.min(0.0));
        for wj in &w {
            let u = lp.var(1.0, (0.0, f64::INFINITY));
            lp.ge(&[(u, 1.0), (*wj, -1.0)], 0.0);
            lp.ge(&[(u, 1.0), (*wj, 1.0)], 0.0);
        }
        let sol = lp.solve()?;
        w.iter().map(|x| sol.get(*x)).collect()
    } else {
        reasons.push(format!("no affine storage makes the lifted costs admissible (best slack {storage_slack:e})"));
        vec![0.0; n]
    };
    let storage = StorageFunctional::anchored(weights, None, &steady.rho_star)?;
    let theta = tabular_theta(mdp, &q, &v, &storage, steady, dissimilarity, config.horizon)?;

    let policies = mdp.policy_space().enumerate(config.cap)?;
    let mut dirac_residual = 0.0_f64;
    for s in 0..n {
        let rho = Measure::dirac(s, n)?;
        for pi in &policies {
            let gap = (q_theta(mdp, &theta, &rho, pi, config.cap)? - q[s][pi.action(s)]).abs();
            dirac_residual = dirac_residual.max(gap);
        }
    }
    let mut design_residual = 0.0_f64;
    for rho in random_measures(config.seed, stream::LIFT, n, config.n_samples) {
        for pi in &policies {
            let target: f64 = rho.weights().iter().enumerate().map(|(s, p)| p * q[s][pi.action(s)]).sum();
            design_residual = design_residual.max((q_theta(mdp, &theta, &rho, pi, config.cap)? - target).abs());
        }
    }
    if dirac_residual > config.tolerance * q_scale {
        reasons.push(format!("Dirac fit residual {dirac_residual:e} above tolerance"));
    }
    if design_residual > config.tolerance * q_scale {
        reasons.push(format!("design-set fit residual {design_residual:e} above tolerance"));
    }
    let report = LiftReport {
        accepted: reasons.is_empty(),
        bellman_residual,
        dirac_residual,
        design_residual,
        storage_slack,
        reasons,
    };
    Ok(LiftOutcome { theta, report })
}
