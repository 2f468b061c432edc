//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use nash_dqn::approximator::{Mlp, NetworkSpec, Partition, ParameterSet, Tape};
use nash_dqn::game::{AgentFeatures, StateFeatures};
use nash_dqn::nash_model::{FeatureNormalization, GradTarget, LossOptions, LossSample, ModelSpec, NashQModel};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates where the function is not differentiable at the step
    /// scale (a ReLU switches inside `[x - h, x + h]`).
    pub kinks: usize,
    pub max_rel_err: f64,
}

impl FdReport {
    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.kinks += other.kinks;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }

    pub fn passes(&self) -> bool {
        self.max_rel_err < FD_TOL && self.kinks * 100 <= self.checked
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central-difference check of `grad` for `f` at the listed coordinates.
/// A coordinate whose one-sided slopes disagree is a kink and is skipped;
/// a wrong analytic gradient cannot make the two slopes disagree.
pub fn fd_check(
    params: &mut ParameterSet,
    grad: &[f64],
    coords: impl IntoIterator<Item = usize>,
    mut f: impl FnMut(&ParameterSet) -> f64,
) -> FdReport {
    let f0 = f(params);
    let mut rep = FdReport::default();
    for k in coords {
        let x = params.values()[k];
        params.values_mut()[k] = x + FD_STEP;
        let fp = f(params);
        params.values_mut()[k] = x - FD_STEP;
        let fm = f(params);
        params.values_mut()[k] = x;
        rep.checked += 1;
        let up = (fp - f0) / FD_STEP;
        let down = (f0 - fm) / FD_STEP;
        if (up - down).abs() > 1e-3 * (up.abs() + down.abs()) + 1e-7 {
            rep.kinks += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * FD_STEP);
        // Rounding in f(x +- h) bounds how well fd can resolve the slope.
        let roundoff = 4.0 * f64::EPSILON * f0.abs().max(fp.abs()).max(fm.abs()) / FD_STEP;
        let excess = ((grad[k] - fd).abs() - roundoff).max(0.0);
        let err = excess / grad[k].abs().max(fd.abs()).max(1e-6);
        rep.max_rel_err = rep.max_rel_err.max(err);
    }
    rep
}

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal(rng))
}

/// One random (params, input, cotangent) triple for a single network,
/// checked on every parameter coordinate.
pub fn network_fd_instance<R: Rng>(rng: &mut R, spec: &NetworkSpec, rows: usize) -> FdReport {
    let mut params = ParameterSet::new();
    let net = Mlp::register(&mut params, "net", spec.clone(), Partition::Value).unwrap();
    net.init(&mut params, rng, nash_dqn::approximator::InitScheme::HeNormal);
    // Nonzero biases so that the bias gradients are exercised off the origin.
    for v in params.values_mut() {
        *v += 0.1 * normal(rng);
    }
    let input = random_matrix(rng, rows, spec.input_dim);
    let cot = random_matrix(rng, rows, spec.output_dim);
    let mut tape = Tape::new();
    net.forward_recorded(&params, input.view(), &mut tape).unwrap();
    let mut grad = params.zero_grads();
    net.backward(&params, &mut tape, cot.view(), &mut grad, false).unwrap();
    let n = params.len();
    fd_check(&mut params, &grad, 0..n, |p| {
        let out = net.forward(p, input.view()).unwrap();
        (&out * &cot).sum()
    })
}

pub fn paper_model_spec(own_dim: usize) -> ModelSpec {
    let mut norm = FeatureNormalization::identity(own_dim);
    norm.own_scale = (0..own_dim).map(|k| 1.0 + k as f64).collect();
    norm.other_scale = 2.0;
    let mut spec = ModelSpec::new(norm, &[20, 60, 60, 20], &[20, 20, 20], 8, &[20, 40, 20]);
    spec.action_scale = 3.0;
    spec.value_scale = 7.0;
    spec
}

pub fn random_state<R: Rng>(rng: &mut R, n: usize, own_dim: usize) -> StateFeatures {
    let q: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let shared: Vec<f64> = (0..own_dim.saturating_sub(1)).map(|_| normal(rng)).collect();
    (0..n)
        .map(|i| {
            let mut own = shared.clone();
            own.push(q[i]);
            AgentFeatures {
                own,
                others: (0..n).filter(|&j| j != i).map(|j| q[j]).collect(),
            }
        })
        .collect()
}

/// Owned storage for a random loss batch.
pub struct OwnedSample {
    pub state: StateFeatures,
    pub action: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_state: Option<StateFeatures>,
    pub forced: bool,
}

impl OwnedSample {
    pub fn view(&self) -> LossSample<'_> {
        LossSample {
            state: &self.state,
            action: &self.action,
            rewards: &self.rewards,
            next_state: self.next_state.as_ref(),
            forced: self.forced,
        }
    }
}

pub fn random_batch<R: Rng>(rng: &mut R, m: usize, n: usize, own_dim: usize) -> Vec<OwnedSample> {
    (0..m)
        .map(|k| OwnedSample {
            state: random_state(rng, n, own_dim),
            action: (0..n).map(|_| 3.0 * normal(rng)).collect(),
            rewards: (0..n).map(|_| 5.0 * normal(rng)).collect(),
            next_state: (k % 3 != 0).then(|| random_state(rng, n, own_dim)),
            forced: k % 5 == 4,
        })
        .collect()
}

/// Loss-gradient check for one random model and batch on a random subset
/// of `coords_per_partition` coordinates in each partition.
pub fn loss_fd_instance<R: Rng>(
    rng: &mut R,
    n: usize,
    semi_gradient: bool,
    coords_per_partition: usize,
) -> FdReport {
    let own_dim = 3;
    let mut model = NashQModel::new(paper_model_spec(own_dim), rng).unwrap();
    for v in model.params_mut().values_mut() {
        *v += 0.05 * normal(rng);
    }
    let batch = random_batch(rng, 6, n, own_dim);
    let samples: Vec<LossSample<'_>> = batch.iter().map(|s| s.view()).collect();
    let gamma = 0.9;
    let opts = LossOptions {
        semi_gradient,
        bootstrap_params: None,
    };
    let mut report = FdReport::default();
    for (target, partition) in [
        (GradTarget::Value, Partition::Value),
        (GradTarget::Advantage, Partition::Advantage),
    ] {
        let mut grad = model.params().zero_grads();
        model
            .loss_and_grad(&samples, gamma, target, opts, &mut grad)
            .unwrap();
        let pool: Vec<usize> = model
            .params()
            .tensors()
            .iter()
            .filter(|t| t.partition == partition)
            .flat_map(|t| t.range())
            .collect();
        let coords: Vec<usize> = (0..coords_per_partition)
            .map(|_| pool[rng.gen_range(0..pool.len())])
            .collect();
        let frozen = model.clone();
        let mut params = model.params().clone();
        let rep = fd_check(&mut params, &grad, coords, |p| {
            let m = NashQModel::from_parts(frozen.spec().clone(), p.clone()).unwrap();
            if semi_gradient && target == GradTarget::Value {
                // The bootstrap term is held at the unperturbed parameters.
                let opts = LossOptions {
                    semi_gradient: true,
                    bootstrap_params: Some(frozen.params()),
                };
                let mut scratch = m.params().zero_grads();
                m.loss_and_grad(&samples, gamma, GradTarget::None, opts, &mut scratch)
                    .unwrap()
            } else {
                m.loss(&samples, gamma).unwrap()
            }
        });
        report.merge(rep);
    }
    report
}

pub mod structure {
    //! Qualitative checks on execution heatmaps and inventory paths.

    use nash_dqn::figures::{heatmap, EpisodePath, HeatmapGrid};
    use nash_dqn::market::MarketGame;
    use nash_dqn::nash_model::NashQModel;

    pub const PRICES: [f64; 5] = [6.0, 8.0, 10.0, 12.0, 14.0];
    pub const QBARS: [f64; 3] = [-20.0, 0.0, 20.0];

    /// Buy/sell switch point along increasing inventory. `+inf` when the
    /// agent buys on the whole grid, `-inf` when it sells on the whole grid,
    /// `None` when the sign pattern has no downward crossing at all.
    pub fn extended_threshold(q: &[f64], mu: &[f64]) -> Option<f64> {
        if mu.iter().all(|&m| m > 0.0) {
            return Some(f64::INFINITY);
        }
        if mu.iter().all(|&m| m <= 0.0) {
            return Some(f64::NEG_INFINITY);
        }
        (1..q.len()).find_map(|i| {
            let (a, b) = (mu[i - 1], mu[i]);
            (a > 0.0 && b <= 0.0).then(|| q[i - 1] + (q[i] - q[i - 1]) * a / (a - b))
        })
    }

    #[derive(Debug, Clone, Copy)]
    pub struct Fig1Report {
        /// Share of adjacent inventory pairs with a nonincreasing trade.
        pub monotone: f64,
        /// Share of (price, qbar) panels whose threshold is closer to zero
        /// over the last third of decision steps than over the first third.
        pub toward_zero: f64,
        /// Share of (t, qbar) cells where the price-14 threshold is below the
        /// price-6 threshold.
        pub sell_high: f64,
    }

    impl Fig1Report {
        pub fn passes(&self) -> bool {
            self.monotone >= 0.95 && self.toward_zero >= 0.8 && self.sell_high >= 0.8
        }
    }

    pub fn fig1_report(game: &MarketGame, model: &NashQModel) -> Fig1Report {
        let p = &game.params;
        let decision_steps = p.horizon - 1;
        let grid = HeatmapGrid::new(-p.q_bound, p.q_bound, 5.0, 0, decision_steps - 1).unwrap();
        let (mut mono_ok, mut mono_n) = (0usize, 0usize);
        let (mut tz_ok, mut tz_n) = (0usize, 0usize);
        // thresholds[price][qbar][t]
        let mut th = vec![vec![Vec::new(); QBARS.len()]; PRICES.len()];
        for (pi, &price) in PRICES.iter().enumerate() {
            for (qi, &qbar) in QBARS.iter().enumerate() {
                let h = heatmap(game, model, price, qbar, &grid).unwrap();
                for j in 0..grid.t.len() {
                    let col: Vec<f64> = h.mu.iter().map(|row| row[j]).collect();
                    for w in col.windows(2) {
                        mono_n += 1;
                        mono_ok += (w[1] <= w[0]) as usize;
                    }
                    th[pi][qi].push(extended_threshold(&grid.q, &col));
                }
                let third = (grid.t.len() / 3).max(1);
                let mag = |v: &[Option<f64>]| -> Option<f64> {
                    let mut acc = 0.0;
                    for x in v {
                        acc += (*x)?.abs().min(p.q_bound);
                    }
                    Some(acc / v.len() as f64)
                };
                let series = &th[pi][qi];
                if let (Some(early), Some(late)) =
                    (mag(&series[..third]), mag(&series[series.len() - third..]))
                {
                    tz_n += 1;
                    tz_ok += (late < early + 2.5) as usize;
                }
            }
        }
        let (mut sh_ok, mut sh_n) = (0usize, 0usize);
        let hi = PRICES.len() - 1;
        for qi in 0..QBARS.len() {
            for t in 0..grid.t.len() {
                sh_n += 1;
                if let (Some(a), Some(b)) = (th[hi][qi][t], th[0][qi][t]) {
                    sh_ok += (a < b) as usize;
                }
            }
        }
        let frac = |ok: usize, n: usize| if n == 0 { 0.0 } else { ok as f64 / n as f64 };
        Fig1Report {
            monotone: frac(mono_ok, mono_n),
            toward_zero: frac(tz_ok, tz_n),
            sell_high: frac(sh_ok, sh_n),
        }
    }

    #[derive(Debug, Clone, Copy)]
    pub struct Fig2Report {
        pub all_flat: bool,
        /// Share of episodes whose cross-agent spread shrinks from t = 0 to
        /// t = T - 1.
        pub shrinking: f64,
    }

    impl Fig2Report {
        pub fn passes(&self) -> bool {
            self.all_flat && self.shrinking >= 0.8
        }
    }

    pub fn fig2_report(paths: &[EpisodePath], horizon: usize) -> Fig2Report {
        let all_flat = paths
            .iter()
            .all(|p| p.inventories[horizon].iter().all(|&q| q == 0.0));
        let shrink = paths
            .iter()
            .filter(|p| p.spread(horizon - 1) < p.spread(0))
            .count();
        Fig2Report {
            all_flat,
            shrinking: shrink as f64 / paths.len().max(1) as f64,
        }
    }
}
