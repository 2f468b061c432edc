//! Actor-critic training loop.
//!
//! Every game step: act with Gaussian exploration around the model's Nash
//! action, store the transition, sample a mini-batch, take one gradient
//! step on the value parameters, then one on the advantage parameters with
//! the refreshed value network.

use std::collections::VecDeque;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approximator::{Optimizer, OptimizerKind, ParameterSet, PartitionSelector};
use crate::error::{Error, Result};
use crate::game::{Game, JointAction, StateFeatures};
use crate::nash_model::{GradTarget, LossOptions, LossSample, NashQModel};

/// Bounded FIFO of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    items: VecDeque<T>,
    capacity: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::param("train.buffer_capacity", "must be >= 1"));
        }
        Ok(Self {
            items: VecDeque::with_capacity(capacity),
            capacity,
        })
    }

    /// Appends `item`, returning the evicted oldest element when full.
    pub fn push(&mut self, item: T) -> Option<T> {
        let evicted = if self.items.len() == self.capacity {
            self.items.pop_front()
        } else {
            None
        };
        self.items.push_back(item);
        evicted
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    pub fn newest(&self) -> Option<&T> {
        self.items.back()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// Up to `k` distinct indices drawn uniformly among the first `limit`
    /// elements.
    pub fn sample_indices<R: Rng + ?Sized>(&self, k: usize, limit: usize, rng: &mut R) -> Vec<usize> {
        let limit = limit.min(self.items.len());
        index::sample(rng, limit, k.min(limit)).into_vec()
    }
}

/// A transition stored in model-ready form.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTransition {
    pub state: StateFeatures,
    pub action: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_state: Option<StateFeatures>,
    pub forced: bool,
}

impl FeatureTransition {
    pub fn as_sample(&self) -> LossSample<'_> {
        LossSample {
            state: &self.state,
            action: &self.action,
            rewards: &self.rewards,
            next_state: self.next_state.as_ref(),
            forced: self.forced,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub minibatch_size: usize,
    pub buffer_capacity: usize,
    pub lr_v: f64,
    pub lr_a: f64,
    pub gamma: f64,
    /// Exploration standard deviation in the first episode.
    pub sigma_start: f64,
    /// Exploration standard deviation in the last episode.
    pub sigma_end: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub optimizer: OptimizerKind,
    /// Stop the gradient through the bootstrap value.
    pub semi_gradient: bool,
    /// Sync a frozen copy of the value network every this many updates and
    /// bootstrap from it. 0 bootstraps from the live network.
    pub target_sync: usize,
    /// Rescale each partition's gradient to at most this Euclidean norm
    /// before the update. 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 15_000,
            minibatch_size: 100,
            buffer_capacity: 5_000,
            lr_v: 0.01,
            lr_a: 0.01,
            gamma: 1.0,
            sigma_start: 10.0,
            sigma_end: 0.5,
            seed: 0,
            eval_every: 1_000,
            optimizer: OptimizerKind::Sgd,
            semi_gradient: false,
            target_sync: 0,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("train.minibatch_size", self.minibatch_size),
            ("train.buffer_capacity", self.buffer_capacity),
            ("train.eval_every", self.eval_every),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::param(key, "must be >= 1"));
            }
        }
        for (key, v) in [("train.lr_v", self.lr_v), ("train.lr_a", self.lr_a)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(key, "must be finite and >= 0"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::param("train.gamma", "must lie in (0, 1]"));
        }
        for (key, v) in [("train.sigma_start", self.sigma_start), ("train.sigma_end", self.sigma_end)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(key, "must be finite and >= 0"));
            }
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::param("train.grad_clip", "must be finite and >= 0"));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::param(
                    "train.optimizer",
                    "adam needs beta1, beta2 in [0, 1) and eps > 0",
                ));
            }
        }
        Ok(())
    }

    /// Exploration standard deviation for episode `b` (0-based): linear from
    /// `sigma_start` to `sigma_end`.
    pub fn sigma(&self, b: usize) -> f64 {
        if self.episodes <= 1 {
            return self.sigma_start;
        }
        let frac = b.min(self.episodes - 1) as f64 / (self.episodes - 1) as f64;
        self.sigma_start + (self.sigma_end - self.sigma_start) * frac
    }
}

/// One record per training episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    /// Mean pre-update batch loss over the episode's steps.
    pub mean_loss: f64,
    pub returns: Vec<f64>,
    pub sigma: f64,
}

/// Greedy joint action: the forced action where one exists, otherwise the
/// model's Nash action projected onto the admissible set.
pub fn greedy_action<G: Game>(game: &G, model: &NashQModel, state: &G::State) -> Result<JointAction> {
    if let Some(a) = game.forced_action(state) {
        return Ok(a);
    }
    let mu = model.nash_action(&game.state_features(state))?;
    Ok(game.clamp_action(state, &mu))
}

/// The model's equilibrium action without projection; the forced action
/// where one exists.
pub fn policy_mu<G: Game>(game: &G, model: &NashQModel, state: &G::State) -> Result<JointAction> {
    match game.forced_action(state) {
        Some(a) => Ok(a),
        None => model.nash_action(&game.state_features(state)),
    }
}

/// `mu(x) + eps`, `eps ~ N(0, sigma^2 I)`, then projected. The noise is
/// centered on the projected `mu`: when `mu` leaves the admissible set,
/// noise around the raw `mu` would be clamped to a single boundary trade and
/// the state would never show the model a second action.
pub fn explore_action<G: Game, R: Rng + ?Sized>(
    game: &G,
    model: &NashQModel,
    state: &G::State,
    sigma: f64,
    rng: &mut R,
) -> Result<JointAction> {
    let mut mu = greedy_action(game, model, state)?;
    if game.forced_action(state).is_some() {
        return Ok(mu);
    }
    for u in mu.0.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *u += sigma * z;
    }
    Ok(game.clamp_action(state, &mu))
}

/// Mean per-sample loss over a batch of stored transitions.
pub fn batch_loss(model: &NashQModel, batch: &[&FeatureTransition], gamma: f64) -> Result<f64> {
    let samples: Vec<LossSample<'_>> = batch.iter().map(|t| t.as_sample()).collect();
    model.loss(&samples, gamma)
}

pub fn sample_loss(model: &NashQModel, transition: &FeatureTransition, gamma: f64) -> Result<f64> {
    model.loss(&[transition.as_sample()], gamma)
}

/// One value step followed by one advantage step on a fixed batch. Returns
/// the loss before the value step.
pub fn alternating_step(
    model: &mut NashQModel,
    optimizer: &mut Optimizer,
    samples: &[LossSample<'_>],
    cfg: &TrainConfig,
    target: Option<&ParameterSet>,
) -> Result<f64> {
    let opts = LossOptions {
        semi_gradient: cfg.semi_gradient,
        bootstrap_params: target,
    };
    let mut grads = model.params().zero_grads();
    let loss = model.loss_and_grad(samples, cfg.gamma, GradTarget::Value, opts, &mut grads)?;
    if loss.is_finite() {
        clip(&mut grads, cfg.grad_clip);
        optimizer.step(model.params_mut(), &grads, cfg.lr_v, PartitionSelector::Value)?;
        grads.iter_mut().for_each(|g| *g = 0.0);
        let after = model.loss_and_grad(samples, cfg.gamma, GradTarget::Advantage, opts, &mut grads)?;
        if after.is_finite() {
            clip(&mut grads, cfg.grad_clip);
            optimizer.step(model.params_mut(), &grads, cfg.lr_a, PartitionSelector::Advantage)?;
        } else {
            return Ok(after);
        }
    }
    Ok(loss)
}

/// Only the active partition has nonzero entries, so the norm of the whole
/// buffer is that partition's norm.
fn clip(grads: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

fn diagnostics(model: &NashQModel, samples: &[LossSample<'_>], loss: f64) -> String {
    let values = model.params().values();
    let finite = values.iter().filter(|v| v.is_finite()).count();
    let max_abs = values
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let newest = samples.last().map(|s| {
        serde_json::json!({
            "state_own": s.state.iter().map(|f| f.own.clone()).collect::<Vec<_>>(),
            "action": s.action,
            "rewards": s.rewards,
            "terminal": s.next_state.is_none(),
            "forced": s.forced,
        })
    });
    serde_json::json!({
        "loss": loss.to_string(),
        "batch_size": samples.len(),
        "params_total": values.len(),
        "params_finite": finite,
        "params_max_abs": max_abs,
        "newest_transition": newest,
    })
    .to_string()
}

/// Runs `cfg.episodes` episodes. `observer` sees every episode record with
/// the current model and may abort training by returning an error.
pub fn train<G, F>(
    game: &G,
    model: &mut NashQModel,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<Vec<EpisodeLog>>
where
    G: Game,
    F: FnMut(&EpisodeLog, &NashQModel) -> Result<()>,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut optimizer = Optimizer::new(cfg.optimizer.clone(), model.params().len());
    let mut target = (cfg.target_sync > 0).then(|| model.params().clone());
    let mut updates = 0usize;
    let mut log = Vec::with_capacity(cfg.episodes);

    for b in 0..cfg.episodes {
        let sigma = cfg.sigma(b);
        let mut state = game.initial_state(&mut rng);
        let mut returns = vec![0.0; game.n_agents()];
        let mut loss_sum = 0.0;
        let mut steps = 0usize;

        while !game.is_terminal(&state) {
            let features = game.state_features(&state);
            let forced = game.forced_action(&state).is_some();
            let action = explore_action(game, model, &state, sigma, &mut rng)?;
            let out = game.step(&state, &action, &mut rng)?;
            for (acc, r) in returns.iter_mut().zip(&out.rewards) {
                *acc += r;
            }
            let next_features = (!out.terminal).then(|| game.state_features(&out.next_state));
            buffer.push(FeatureTransition {
                state: features,
                action: out.applied.0.clone(),
                rewards: out.rewards.clone(),
                next_state: next_features,
                forced,
            });

            let newest = buffer.len() - 1;
            let mut idx = buffer.sample_indices(cfg.minibatch_size, newest, &mut rng);
            idx.push(newest);
            let samples: Vec<LossSample<'_>> = idx
                .iter()
                .map(|&i| buffer.get(i).expect("sampled index in range").as_sample())
                .collect();
            let loss = alternating_step(model, &mut optimizer, &samples, cfg, target.as_ref())?;
            if !loss.is_finite() || model.params().values().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    episode: b,
                    step: steps,
                    diagnostics: diagnostics(model, &samples, loss),
                });
            }
            updates += 1;
            if let Some(t) = target.as_mut() {
                if updates % cfg.target_sync == 0 {
                    t.copy_partition_from(model.params(), PartitionSelector::Value);
                }
            }
            loss_sum += loss;
            steps += 1;
            state = out.next_state;
        }

        let record = EpisodeLog {
            episode: b,
            mean_loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
            returns,
            sigma,
        };
        observer(&record, model)?;
        log.push(record);
    }
    Ok(log)
}
