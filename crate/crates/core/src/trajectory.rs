//! Sampled state trajectories of the closed loop.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{DeterministicPolicy, FiniteMdp};
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTrajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub costs: Vec<f64>,
    pub seed: u64,
}

/// Per-(state, action) categorical samplers for the next state.
pub struct TransitionSampler<'a> {
    mdp: &'a FiniteMdp,
    rows: Vec<WeightedIndex<f64>>,
}

impl<'a> TransitionSampler<'a> {
    pub fn new(mdp: &'a FiniteMdp) -> Self {
        let rows = (0..mdp.n_states())
            .flat_map(|s| (0..mdp.n_actions()).map(move |a| (s, a)))
            .map(|(s, a)| {
                WeightedIndex::new(mdp.row(s, a)).expect("validated transition rows have positive mass")
            })
            .collect();
        TransitionSampler { mdp, rows }
    }

    pub fn next_state<R: Rng + ?Sized>(&self, state: usize, action: usize, rng: &mut R) -> usize {
        self.rows[state * self.mdp.n_actions() + action].sample(rng)
    }

    /// Runs `horizon` steps from `s0`, choosing actions with `choose`.
    pub fn rollout<R, F>(&self, s0: usize, horizon: usize, rng: &mut R, mut choose: F) -> (Vec<usize>, Vec<usize>, Vec<f64>)
    where
        R: Rng + ?Sized,
        F: FnMut(usize, &mut R) -> usize,
    {
        let mut states = Vec::with_capacity(horizon + 1);
        let mut actions = Vec::with_capacity(horizon);
        let mut costs = Vec::with_capacity(horizon);
        let mut s = s0;
        states.push(s);
        for _ in 0..horizon {
            let a = choose(s, rng);
            costs.push(self.mdp.cost(s, a));
            actions.push(a);
            s = self.next_state(s, a, rng);
            states.push(s);
        }
        (states, actions, costs)
    }
}

pub fn sample_trajectory(
    mdp: &FiniteMdp,
    policy: &DeterministicPolicy,
    s0: usize,
    horizon: usize,
    seed: u64,
) -> Result<StateTrajectory> {
    policy.check(mdp)?;
    if s0 >= mdp.n_states() {
        return Err(Error::input(format!("initial state {s0} out of range")));
    }
    if horizon == 0 {
        return Err(Error::input("horizon must be at least 1"));
    }
    let sampler = TransitionSampler::new(mdp);
    let mut rng = rng_for(seed, stream::TRAJECTORY);
    let (states, actions, costs) = sampler.rollout(s0, horizon, &mut rng, |s, _| policy.action(s));
    Ok(StateTrajectory { states, actions, costs, seed })
}
