//! N-agent optimal execution game.
//!
//! A single asset follows mean-reverting dynamics pushed around by the
//! agents' aggregate trading. Each agent pays its trades at the current price
//! plus a linear transaction cost, carries a running inventory penalty, and
//! must end flat (or pay a terminal penalty) at the horizon.
//!
//! The per-step reward is the cash increment `-nu (S + b1 nu)` minus the
//! running penalty `b3 q'^2 dt`, with any terminal term attached to the
//! final step, so an episode's rewards sum to the realized objective.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::game::{AgentFeatures, Game, JointAction, StepOutcome};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpactKind {
    #[default]
    Linear,
    SquareRoot,
}

/// Terminal inventory penalty `b2`. An infinite penalty is realized as
/// forced liquidation on the last step rather than as arithmetic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TerminalPenalty {
    Finite(f64),
    ForcedLiquidation,
}

impl TerminalPenalty {
    pub fn is_forced(self) -> bool {
        matches!(self, TerminalPenalty::ForcedLiquidation)
    }
}

impl Serialize for TerminalPenalty {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TerminalPenalty::Finite(v) => s.serialize_f64(*v),
            TerminalPenalty::ForcedLiquidation => s.serialize_f64(f64::INFINITY),
        }
    }
}

impl<'de> Deserialize<'de> for TerminalPenalty {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl de::Visitor<'_> for V {
            type Value = TerminalPenalty;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a nonnegative number, inf, or the string \"inf\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Self::Value, E> {
                if v == f64::INFINITY {
                    Ok(TerminalPenalty::ForcedLiquidation)
                } else if v.is_finite() && v >= 0.0 {
                    Ok(TerminalPenalty::Finite(v))
                } else {
                    Err(E::custom(format!("b2 must be >= 0 or inf, got {v}")))
                }
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Self::Value, E> {
                self.visit_f64(v as f64)
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Self::Value, E> {
                self.visit_f64(v as f64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Self::Value, E> {
                match v.trim().to_ascii_lowercase().as_str() {
                    "inf" | "+inf" | "infinite" | "infinity" => {
                        Ok(TerminalPenalty::ForcedLiquidation)
                    }
                    other => other
                        .parse::<f64>()
                        .map_err(|_| E::custom(format!("invalid b2 `{v}`")))
                        .and_then(|x| self.visit_f64(x)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketParams {
    /// Mean-reversion rate.
    pub kappa: f64,
    /// Mean-reversion level.
    pub theta_mr: f64,
    pub sigma: f64,
    /// Transaction cost and price impact constant.
    pub b1: f64,
    pub b2: TerminalPenalty,
    /// Running inventory penalty.
    pub b3: f64,
    pub dt: f64,
    /// Number of steps `T`.
    pub horizon: usize,
    pub n_agents: usize,
    pub q_bound: f64,
    pub impact_kind: ImpactKind,
}

impl Default for MarketParams {
    fn default() -> Self {
        Self {
            kappa: 0.1,
            theta_mr: 10.0,
            sigma: 1.0,
            b1: 0.3,
            b2: TerminalPenalty::ForcedLiquidation,
            b3: 0.1,
            dt: 1.0,
            horizon: 15,
            n_agents: 5,
            q_bound: 100.0,
            impact_kind: ImpactKind::Linear,
        }
    }
}

impl MarketParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::param(format!("market.{key}"), reason))
            }
        };
        check(self.kappa >= 0.0 && self.kappa.is_finite(), "kappa", "must be >= 0")?;
        check(self.theta_mr.is_finite(), "theta_mr", "must be finite")?;
        check(self.sigma >= 0.0 && self.sigma.is_finite(), "sigma", "must be >= 0")?;
        check(self.b1 > 0.0 && self.b1.is_finite(), "b1", "must be > 0")?;
        if let TerminalPenalty::Finite(b2) = self.b2 {
            check(b2 >= 0.0 && b2.is_finite(), "b2", "must be >= 0 or inf")?;
        }
        check(self.b3 >= 0.0 && self.b3.is_finite(), "b3", "must be >= 0")?;
        check(self.dt > 0.0 && self.dt.is_finite(), "dt", "must be > 0")?;
        check(self.horizon >= 1, "horizon", "must be >= 1")?;
        check(self.n_agents >= 1, "n_agents", "must be >= 1")?;
        check(self.q_bound > 0.0 && self.q_bound.is_finite(), "q_bound", "must be > 0")?;
        Ok(())
    }
}

/// Distribution of initial states: `q0_i ~ N(0, sigma_q^2)` truncated to the
/// inventory bound, `S0 ~ N(price_mean, sigma_p^2)` truncated below at 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub sigma_q: f64,
    pub price_mean: f64,
    pub sigma_p: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            sigma_q: 5.0,
            price_mean: 10.0,
            sigma_p: 1.0,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_q >= 0.0 && self.sigma_q.is_finite()) {
            return Err(Error::param("init.sigma_q", "must be >= 0"));
        }
        if !(self.sigma_p >= 0.0 && self.sigma_p.is_finite()) {
            return Err(Error::param("init.sigma_p", "must be >= 0"));
        }
        if !self.price_mean.is_finite() {
            return Err(Error::param("init.price_mean", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub price: f64,
    pub step: usize,
    pub inventories: Vec<f64>,
}

/// Price drift `g1` under the configured impact model. The square-root
/// variant uses the mean trade over all agents.
pub fn drift(state: &MarketState, action: &JointAction, params: &MarketParams) -> f64 {
    let reversion = params.kappa * (params.theta_mr - state.price);
    let impact = match params.impact_kind {
        ImpactKind::Linear => params.b1 * action.trades().iter().sum::<f64>(),
        ImpactKind::SquareRoot => {
            let n = action.len().max(1) as f64;
            let mean = action.trades().iter().sum::<f64>() / n;
            params.b1 * mean.signum() * mean.abs().sqrt()
        }
    };
    reversion + impact
}

/// Projects each trade so the post-trade inventory stays within the bound.
pub fn clamp_action(state: &MarketState, raw: &JointAction, params: &MarketParams) -> JointAction {
    JointAction(
        raw.trades()
            .iter()
            .zip(&state.inventories)
            .map(|(&nu, &q)| nu.clamp(-params.q_bound - q, params.q_bound - q))
            .collect(),
    )
}

/// The joint action imposed at the last step under forced liquidation.
pub fn forced_liquidation(state: &MarketState, params: &MarketParams) -> Option<JointAction> {
    (params.b2.is_forced() && state.step + 1 == params.horizon)
        .then(|| JointAction(state.inventories.iter().map(|q| -q).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarketStep {
    pub next_state: MarketState,
    pub rewards: Vec<f64>,
    pub applied: JointAction,
}

/// One transition driven by the standard-normal draw `xi`.
pub fn step(
    state: &MarketState,
    action: &JointAction,
    params: &MarketParams,
    xi: f64,
) -> Result<MarketStep> {
    if state.step >= params.horizon {
        return Err(Error::TerminalState {
            step: state.step,
            horizon: params.horizon,
        });
    }
    if action.len() != state.inventories.len() {
        return Err(Error::Dimension {
            context: "joint action",
            expected: state.inventories.len(),
            got: action.len(),
        });
    }
    let applied = forced_liquidation(state, params).unwrap_or_else(|| action.clone());
    let s = state.price;
    let next_price =
        s + drift(state, &applied, params) * params.dt + params.sigma * params.dt.sqrt() * xi;
    let next_step = state.step + 1;
    let last = next_step == params.horizon;

    let mut inventories = Vec::with_capacity(state.inventories.len());
    let mut rewards = Vec::with_capacity(state.inventories.len());
    for (&q, &nu) in state.inventories.iter().zip(applied.trades()) {
        let q_next = if params.b2.is_forced() && last { 0.0 } else { q + nu };
        let mut r = -nu * (s + params.b1 * nu) - params.b3 * q_next * q_next * params.dt;
        if let (true, TerminalPenalty::Finite(b2)) = (last, params.b2) {
            r += q_next * (next_price - b2 * q_next);
        }
        inventories.push(q_next);
        rewards.push(r);
    }
    Ok(MarketStep {
        next_state: MarketState {
            price: next_price,
            step: next_step,
            inventories,
        },
        rewards,
        applied,
    })
}

fn truncated_normal<R: Rng + ?Sized>(
    rng: &mut R,
    mean: f64,
    std: f64,
    lo: f64,
    hi: f64,
) -> f64 {
    if std == 0.0 {
        return mean.clamp(lo, hi);
    }
    let normal = Normal::new(mean, std).expect("finite nonnegative std");
    for _ in 0..256 {
        let x = normal.sample(rng);
        if (lo..=hi).contains(&x) {
            return x;
        }
    }
    mean.clamp(lo, hi)
}

pub fn sample_initial<R: Rng + ?Sized>(
    params: &MarketParams,
    init: &InitConfig,
    rng: &mut R,
) -> MarketState {
    let inventories = (0..params.n_agents)
        .map(|_| truncated_normal(rng, 0.0, init.sigma_q, -params.q_bound, params.q_bound))
        .collect();
    let price = truncated_normal(rng, init.price_mean, init.sigma_p, 0.0, f64::INFINITY);
    MarketState {
        price,
        step: 0,
        inventories,
    }
}

/// Samples only the inventories (used when inventories and prices are drawn
/// from separate streams).
pub fn sample_inventories<R: Rng + ?Sized>(
    params: &MarketParams,
    init: &InitConfig,
    rng: &mut R,
) -> Vec<f64> {
    (0..params.n_agents)
        .map(|_| truncated_normal(rng, 0.0, init.sigma_q, -params.q_bound, params.q_bound))
        .collect()
}

pub fn sample_price<R: Rng + ?Sized>(init: &InitConfig, rng: &mut R) -> f64 {
    truncated_normal(rng, init.price_mean, init.sigma_p, 0.0, f64::INFINITY)
}

/// The execution game as seen by the trainer. Agent features are
/// `(price, step, own inventory)` plus the other agents' inventories.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketGame {
    pub params: MarketParams,
    pub init: InitConfig,
}

impl MarketGame {
    pub fn new(params: MarketParams, init: InitConfig) -> Result<Self> {
        params.validate()?;
        init.validate()?;
        Ok(Self { params, init })
    }
}

impl Game for MarketGame {
    type State = MarketState;

    fn n_agents(&self) -> usize {
        self.params.n_agents
    }

    fn own_feature_dim(&self) -> usize {
        3
    }

    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> MarketState {
        sample_initial(&self.params, &self.init, rng)
    }

    fn features(&self, state: &MarketState, agent: usize) -> AgentFeatures {
        let others = state
            .inventories
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != agent)
            .map(|(_, &q)| q)
            .collect();
        AgentFeatures {
            own: vec![state.price, state.step as f64, state.inventories[agent]],
            others,
        }
    }

    fn forced_action(&self, state: &MarketState) -> Option<JointAction> {
        forced_liquidation(state, &self.params)
    }

    fn clamp_action(&self, state: &MarketState, raw: &JointAction) -> JointAction {
        clamp_action(state, raw, &self.params)
    }

    fn step<R: Rng + ?Sized>(
        &self,
        state: &MarketState,
        action: &JointAction,
        rng: &mut R,
    ) -> Result<StepOutcome<MarketState>> {
        let xi: f64 = StandardNormal.sample(rng);
        let out = step(state, action, &self.params, xi)?;
        let terminal = out.next_state.step == self.params.horizon;
        Ok(StepOutcome {
            next_state: out.next_state,
            rewards: out.rewards,
            applied: out.applied,
            terminal,
        })
    }

    fn is_terminal(&self, state: &MarketState) -> bool {
        state.step >= self.params.horizon
    }
}
