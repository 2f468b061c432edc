//! The interface the trainer consumes: a finite-horizon stochastic game with
//! one scalar action per agent and label-invariant agent features.

use std::fmt::Debug;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Per-agent trade quantities (one scalar control per agent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointAction(pub Vec<f64>);

impl JointAction {
    pub fn zeros(n: usize) -> Self {
        JointAction(vec![0.0; n])
    }

    pub fn trades(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for JointAction {
    fn from(v: Vec<f64>) -> Self {
        JointAction(v)
    }
}

/// Raw (unnormalized) features seen by one agent: its own non-invariant
/// features and one scalar per other agent, in agent-index order. Models
/// must treat `others` as an unordered collection.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentFeatures {
    pub own: Vec<f64>,
    pub others: Vec<f64>,
}

/// Features of every agent at one state, indexed by agent.
pub type StateFeatures = Vec<AgentFeatures>;

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome<S> {
    pub next_state: S,
    pub rewards: Vec<f64>,
    /// The action actually executed after clamping / forced overrides.
    pub applied: JointAction,
    pub terminal: bool,
}

/// One replay-buffer element.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition<S> {
    pub state: S,
    pub action: JointAction,
    pub rewards: Vec<f64>,
    pub next_state: S,
    pub terminal: bool,
    /// The admissible action set at `state` was a single point (e.g. forced
    /// liquidation), so the advantage there is identically zero.
    pub forced: bool,
}

pub trait Game {
    type State: Clone + Debug;

    fn n_agents(&self) -> usize;

    /// Length of [`AgentFeatures::own`].
    fn own_feature_dim(&self) -> usize;

    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::State;

    fn features(&self, state: &Self::State, agent: usize) -> AgentFeatures;

    fn state_features(&self, state: &Self::State) -> StateFeatures {
        (0..self.n_agents()).map(|i| self.features(state, i)).collect()
    }

    /// `Some(a)` when the only admissible joint action at `state` is `a`.
    fn forced_action(&self, state: &Self::State) -> Option<JointAction>;

    /// Projects a proposed action onto the admissible set.
    fn clamp_action(&self, state: &Self::State, raw: &JointAction) -> JointAction;

    fn step<R: Rng + ?Sized>(
        &self,
        state: &Self::State,
        action: &JointAction,
        rng: &mut R,
    ) -> Result<StepOutcome<Self::State>>;

    fn is_terminal(&self, state: &Self::State) -> bool;
}

/// Discounted per-agent return `sum_t gamma^t r_t` of one episode.
pub fn episode_return<S>(transitions: &[Transition<S>], n_agents: usize, gamma: f64) -> Vec<f64> {
    let mut total = vec![0.0; n_agents];
    let mut discount = 1.0;
    for tr in transitions {
        for (acc, r) in total.iter_mut().zip(&tr.rewards) {
            *acc += discount * r;
        }
        discount *= gamma;
    }
    total
}
