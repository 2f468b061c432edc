//! Data behind the execution heatmaps, inventory path grids and evaluation
//! summaries. Everything here is a deterministic function of the model,
//! the game and the explicit seed.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::game::{episode_return, Game, Transition};
use crate::market::{sample_inventories, sample_price, MarketGame, MarketState};
use crate::nash_model::NashQModel;
use crate::trainer::{greedy_action, policy_mu, FeatureTransition};

/// Axes of a heatmap: decision steps and own inventories.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapGrid {
    pub t: Vec<usize>,
    pub q: Vec<f64>,
}

impl HeatmapGrid {
    /// Every step of the horizon and inventories from `-q_bound` to `q_bound`
    /// in steps of 5.
    pub fn default_for(game: &MarketGame) -> Self {
        let b = game.params.q_bound;
        Self::new(-b, b, 5.0, 0, game.params.horizon - 1).expect("bound is positive")
    }

    pub fn new(q_min: f64, q_max: f64, q_step: f64, t_min: usize, t_max: usize) -> Result<Self> {
        if !(q_step > 0.0) || !(q_min <= q_max) || !q_min.is_finite() || !q_max.is_finite() {
            return Err(Error::param("grid.q", "need finite q_min <= q_max and q_step > 0"));
        }
        if t_min > t_max {
            return Err(Error::param("grid.t", "need t_min <= t_max"));
        }
        let n = ((q_max - q_min) / q_step + 1e-9).floor() as usize + 1;
        Ok(Self {
            t: (t_min..=t_max).collect(),
            q: (0..n).map(|k| q_min + k as f64 * q_step).collect(),
        })
    }
}

/// Agent 1's equilibrium trade over (own inventory, step) with the price and
/// every other agent's inventory held fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub price: f64,
    pub qbar_other: f64,
    pub grid: HeatmapGrid,
    /// `mu[i][j]` at inventory `grid.q[i]` and step `grid.t[j]`.
    pub mu: Vec<Vec<f64>>,
}

pub fn heatmap_state(game: &MarketGame, price: f64, qbar_other: f64, t: usize, q: f64) -> MarketState {
    let mut inventories = vec![qbar_other; game.params.n_agents];
    inventories[0] = q;
    MarketState {
        price,
        step: t,
        inventories,
    }
}

/// The emitted values are the model's Nash action for agent 1, except at a
/// forced-liquidation step where the forced trade is emitted.
pub fn heatmap(
    game: &MarketGame,
    model: &NashQModel,
    price: f64,
    qbar_other: f64,
    grid: &HeatmapGrid,
) -> Result<Heatmap> {
    if let Some(&t) = grid.t.iter().find(|&&t| t >= game.params.horizon) {
        return Err(Error::param(
            "grid.t",
            format!("step {t} is past the last decision step {}", game.params.horizon - 1),
        ));
    }
    let mut mu = Vec::with_capacity(grid.q.len());
    for &q in &grid.q {
        let mut row = Vec::with_capacity(grid.t.len());
        for &t in &grid.t {
            let state = heatmap_state(game, price, qbar_other, t, q);
            row.push(policy_mu(game, model, &state)?.0[0]);
        }
        mu.push(row);
    }
    Ok(Heatmap {
        price,
        qbar_other,
        grid: grid.clone(),
        mu,
    })
}

impl Heatmap {
    /// Per step, the own inventory where the trade switches from buying to
    /// selling: the first downward zero crossing along increasing inventory,
    /// linearly interpolated. `None` when the sign never changes that way.
    pub fn thresholds(&self) -> Vec<Option<f64>> {
        (0..self.grid.t.len())
            .map(|j| {
                let q = &self.grid.q;
                (1..q.len()).find_map(|i| {
                    let (a, b) = (self.mu[i - 1][j], self.mu[i][j]);
                    (a > 0.0 && b <= 0.0).then(|| q[i - 1] + (q[i] - q[i - 1]) * a / (a - b))
                })
            })
            .collect()
    }

    fn tag(&self) -> String {
        format!("price={} qbar_other={}", self.price, self.qbar_other)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("q1\\t ({})", self.tag());
        for t in &self.grid.t {
            write!(out, ",{t}").expect("write to string");
        }
        out.push('\n');
        for (q, row) in self.grid.q.iter().zip(&self.mu) {
            write!(out, "{q}").expect("write to string");
            for v in row {
                write!(out, ",{v}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn thresholds_csv(&self) -> String {
        let mut out = format!("t,threshold_q1 ({})\n", self.tag());
        for (t, th) in self.grid.t.iter().zip(self.thresholds()) {
            match th {
                Some(v) => writeln!(out, "{t},{v}"),
                None => writeln!(out, "{t},"),
            }
            .expect("write to string");
        }
        out
    }
}

/// Price and inventory series of one greedy episode, indexed by step
/// `0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePath {
    pub row: usize,
    pub col: usize,
    pub prices: Vec<f64>,
    pub inventories: Vec<Vec<f64>>,
}

impl EpisodePath {
    /// Population standard deviation of inventories across agents at `t`.
    pub fn spread(&self, t: usize) -> f64 {
        let q = &self.inventories[t];
        let n = q.len() as f64;
        let mean = q.iter().sum::<f64>() / n;
        (q.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A `rows x cols` grid of greedy episodes. Initial inventories depend only
/// on the row; the initial price and the price noise depend only on the
/// column.
pub fn simulate_paths(
    game: &MarketGame,
    model: &NashQModel,
    rows: usize,
    cols: usize,
    seed: u64,
) -> Result<Vec<EpisodePath>> {
    let row_inventories: Vec<Vec<f64>> = (0..rows)
        .map(|r| sample_inventories(&game.params, &game.init, &mut stream_rng(seed, 2 * r as u64)))
        .collect();
    let mut out = Vec::with_capacity(rows * cols);
    for (r, inventories) in row_inventories.iter().enumerate() {
        for c in 0..cols {
            let mut rng = stream_rng(seed, 2 * c as u64 + 1);
            let mut state = MarketState {
                price: sample_price(&game.init, &mut rng),
                step: 0,
                inventories: inventories.clone(),
            };
            let mut prices = vec![state.price];
            let mut invs = vec![state.inventories.clone()];
            while !game.is_terminal(&state) {
                let action = greedy_action(game, model, &state)?;
                state = game.step(&state, &action, &mut rng)?.next_state;
                prices.push(state.price);
                invs.push(state.inventories.clone());
            }
            out.push(EpisodePath {
                row: r,
                col: c,
                prices,
                inventories: invs,
            });
        }
    }
    Ok(out)
}

pub fn paths_csv(paths: &[EpisodePath], n_agents: usize) -> String {
    let mut out = String::from("row,col,t,price");
    for i in 1..=n_agents {
        write!(out, ",q_{i}").expect("write to string");
    }
    out.push('\n');
    for p in paths {
        for (t, (price, q)) in p.prices.iter().zip(&p.inventories).enumerate() {
            write!(out, "{},{},{t},{price}", p.row, p.col).expect("write to string");
            for v in q {
                write!(out, ",{v}").expect("write to string");
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: Vec<f64>,
    pub stderr_return: Vec<f64>,
    pub mean_terminal_inventory: Vec<f64>,
    /// Mean absolute Bellman residual over all evaluation transitions and
    /// agents, in reward units. Absent when no transitions were played.
    pub mean_abs_bellman_residual: Option<f64>,
}

/// One line of the transition dump.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DumpRecord {
    pub episode: usize,
    pub state: MarketState,
    pub action: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_state: MarketState,
    pub terminal: bool,
}

/// Plays `episodes` greedy episodes from fresh initial states. When `dump`
/// is given every transition is appended to it.
pub fn evaluate(
    game: &MarketGame,
    model: &NashQModel,
    episodes: usize,
    seed: u64,
    gamma: f64,
    mut dump: Option<&mut Vec<DumpRecord>>,
) -> Result<EvalSummary> {
    let n = game.params.n_agents;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns: Vec<Vec<f64>> = Vec::with_capacity(episodes);
    let mut terminal_q = vec![0.0; n];
    let mut stored = Vec::new();
    for e in 0..episodes {
        let mut state = game.initial_state(&mut rng);
        let mut episode: Vec<Transition<MarketState>> = Vec::new();
        while !game.is_terminal(&state) {
            let action = greedy_action(game, model, &state)?;
            let out = game.step(&state, &action, &mut rng)?;
            stored.push(FeatureTransition {
                state: game.state_features(&state),
                action: out.applied.0.clone(),
                rewards: out.rewards.clone(),
                next_state: (!out.terminal).then(|| game.state_features(&out.next_state)),
                forced: game.forced_action(&state).is_some(),
            });
            episode.push(Transition {
                state: state.clone(),
                action: out.applied,
                rewards: out.rewards,
                next_state: out.next_state.clone(),
                terminal: out.terminal,
                forced: false,
            });
            state = out.next_state;
        }
        for (acc, q) in terminal_q.iter_mut().zip(&state.inventories) {
            *acc += q;
        }
        returns.push(episode_return(&episode, n, gamma));
        if let Some(d) = dump.as_deref_mut() {
            d.extend(episode.into_iter().map(|tr| DumpRecord {
                episode: e,
                state: tr.state,
                action: tr.action.0,
                rewards: tr.rewards,
                next_state: tr.next_state,
                terminal: tr.terminal,
            }));
        }
    }
    if episodes == 0 {
        return Ok(EvalSummary {
            episodes: 0,
            mean_return: Vec::new(),
            stderr_return: Vec::new(),
            mean_terminal_inventory: Vec::new(),
            mean_abs_bellman_residual: None,
        });
    }
    let m = episodes as f64;
    let mean: Vec<f64> = (0..n).map(|i| returns.iter().map(|r| r[i]).sum::<f64>() / m).collect();
    let stderr = (0..n)
        .map(|i| {
            if episodes < 2 {
                return 0.0;
            }
            let var = returns.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / (m - 1.0);
            (var / m).sqrt()
        })
        .collect();
    let residual = if stored.is_empty() {
        None
    } else {
        let samples: Vec<_> = stored.iter().map(|t| t.as_sample()).collect();
        let res = model.bellman_residuals(&samples, gamma)?;
        let count = (res.len() * n) as f64;
        Some(res.iter().flatten().map(|r| r.abs()).sum::<f64>() / count)
    };
    Ok(EvalSummary {
        episodes,
        mean_return: mean,
        stderr_return: stderr,
        mean_terminal_inventory: terminal_q.iter().map(|q| q / m).collect(),
        mean_abs_bellman_residual: residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn setup() -> (MarketGame, NashQModel) {
        let mut cfg = RunConfig::default();
        cfg.market.n_agents = 3;
        cfg.market.horizon = 4;
        let model = cfg.build_model(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (cfg.game().unwrap(), model)
    }

    #[test]
    fn grid_counts() {
        let g = HeatmapGrid::new(-100.0, 100.0, 5.0, 0, 14).unwrap();
        assert_eq!((g.q.len(), g.t.len()), (41, 15));
        assert_eq!(HeatmapGrid::new(3.0, 3.0, 1.0, 2, 2).unwrap().q, vec![3.0]);
        assert!(HeatmapGrid::new(1.0, 0.0, 1.0, 0, 0).is_err());
    }

    #[test]
    fn threshold_interpolates_sign_change() {
        let h = Heatmap {
            price: 10.0,
            qbar_other: 0.0,
            grid: HeatmapGrid {
                t: vec![0, 1],
                q: vec![-10.0, 0.0, 10.0],
            },
            mu: vec![vec![3.0, -1.0], vec![1.0, -2.0], vec![-1.0, -3.0]],
        };
        assert_eq!(h.thresholds(), vec![Some(5.0), None]);
        assert_eq!(h.thresholds_csv(), "t,threshold_q1 (price=10 qbar_other=0)\n0,5\n1,\n");
    }

    #[test]
    fn one_cell_heatmap_matches_direct_call() {
        let (game, model) = setup();
        let grid = HeatmapGrid::new(7.0, 7.0, 1.0, 1, 1).unwrap();
        let h = heatmap(&game, &model, 11.0, -3.0, &grid).unwrap();
        let state = heatmap_state(&game, 11.0, -3.0, 1, 7.0);
        let direct = model.nash_action(&game.state_features(&state)).unwrap().0[0];
        assert_eq!(h.mu[0][0].to_bits(), direct.to_bits());
    }

    #[test]
    fn paths_end_flat_and_are_reproducible() {
        let (game, model) = setup();
        let a = simulate_paths(&game, &model, 2, 3, 9).unwrap();
        let b = simulate_paths(&game, &model, 2, 3, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        for p in &a {
            assert!(p.inventories.last().unwrap().iter().all(|&q| q == 0.0));
        }
        // Rows share initial inventories across columns; columns share prices.
        assert_eq!(a[0].inventories[0], a[2].inventories[0]);
        assert_ne!(a[0].inventories[0], a[3].inventories[0]);
        assert_eq!(a[0].prices[0], a[3].prices[0]);
    }

    #[test]
    fn empty_evaluation() {
        let (game, model) = setup();
        let s = evaluate(&game, &model, 0, 0, 1.0, None).unwrap();
        assert_eq!(s.episodes, 0);
        assert!(s.mean_return.is_empty() && s.mean_abs_bellman_residual.is_none());
    }

    #[test]
    fn evaluation_accounting() {
        let (game, model) = setup();
        let mut dump = Vec::new();
        let s = evaluate(&game, &model, 5, 4, 1.0, Some(&mut dump)).unwrap();
        assert_eq!(s.mean_terminal_inventory, vec![0.0; 3]);
        assert_eq!(dump.len(), 5 * 4);
        let mut totals = vec![0.0; 3];
        for rec in &dump {
            for (t, r) in totals.iter_mut().zip(&rec.rewards) {
                *t += r;
            }
        }
        for i in 0..3 {
            assert!((totals[i] / 5.0 - s.mean_return[i]).abs() < 1e-9);
        }
    }
}
