//! Independent ground-truth solvers used by tests and acceptance checks.
//!
//! These deliberately share nothing with the learner beyond the game
//! definitions: the one-step solver works on explicit payoff coefficients
//! and the LQ solver re-derives the market dynamics symbolically.

use rand::Rng;

use crate::error::{Error, Result};
use crate::game::{AgentFeatures, Game, JointAction, StepOutcome};
use crate::market::{ImpactKind, MarketParams};

/// Stateless N-player game with payoffs
/// `f_i(u) = -a_i u_i^2 + u_i sum_{j!=i} c_ij u_j + g_i u_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticGame {
    pub a: Vec<f64>,
    /// `c[i][j]`; the diagonal is ignored.
    pub c: Vec<Vec<f64>>,
    pub g: Vec<f64>,
}

impl QuadraticGame {
    pub fn new(a: Vec<f64>, c: Vec<Vec<f64>>, g: Vec<f64>) -> Result<Self> {
        let n = a.len();
        if n == 0 || g.len() != n || c.len() != n || c.iter().any(|row| row.len() != n) {
            return Err(Error::param("quadratic_game", "a, c and g must agree on N >= 1"));
        }
        if a.iter().any(|&ai| !(ai > 0.0)) {
            return Err(Error::param("quadratic_game.a", "every a_i must be > 0"));
        }
        Ok(Self { a, c, g })
    }

    /// Same payoff for every agent: `-a u_i^2 + c u_i sum_{j!=i} u_j + g u_i`.
    pub fn symmetric(n: usize, a: f64, c: f64, g: f64) -> Result<Self> {
        Self::new(vec![a; n], vec![vec![c; n]; n], vec![g; n])
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn payoff(&self, i: usize, u: &[f64]) -> f64 {
        let cross: f64 = (0..self.n()).filter(|&j| j != i).map(|j| self.c[i][j] * u[j]).sum();
        -self.a[i] * u[i] * u[i] + u[i] * cross + self.g[i] * u[i]
    }

    pub fn payoffs(&self, u: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|i| self.payoff(i, u)).collect()
    }
}

/// Solves the dense system `m x = rhs` by Gaussian elimination with partial
/// pivoting.
fn solve_linear(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Result<Vec<f64>> {
    let n = rhs.len();
    let scale = m
        .iter()
        .flatten()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .expect("non-empty range");
        if m[pivot][col].abs() <= 1e-12 * scale {
            return Err(Error::Singular(format!(
                "first-order system is singular at column {col}"
            )));
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (rhs[row] - tail) / m[row][row];
    }
    Ok(x)
}

/// Step used by the unilateral-deviation check.
pub const DEVIATION_STEP: f64 = 0.01;

/// Nash equilibrium from the first-order conditions
/// `2 a_i u_i - sum_{j!=i} c_ij u_j = g_i`, verified by perturbing each
/// player's action by `+-DEVIATION_STEP`.
pub fn solve_one_step_nash(game: &QuadraticGame) -> Result<Vec<f64>> {
    let n = game.n();
    let m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { 2.0 * game.a[i] } else { -game.c[i][j] })
                .collect()
        })
        .collect();
    let u = solve_linear(m, game.g.clone())?;
    for i in 0..n {
        let base = game.payoff(i, &u);
        for delta in [-DEVIATION_STEP, DEVIATION_STEP] {
            let mut v = u.clone();
            v[i] += delta;
            if game.payoff(i, &v) >= base {
                return Err(Error::Singular(format!(
                    "agent {i} gains from a unilateral deviation of {delta}"
                )));
            }
        }
    }
    Ok(u)
}

/// A one-shot [`QuadraticGame`] played as a single-step episode. Every agent
/// sees the constant feature `1` and zeros for the others.
#[derive(Clone, Debug)]
pub struct StaticGame {
    pub game: QuadraticGame,
}

impl Game for StaticGame {
    /// `true` once the single step has been played.
    type State = bool;

    fn n_agents(&self) -> usize {
        self.game.n()
    }

    fn own_feature_dim(&self) -> usize {
        1
    }

    fn initial_state<R: Rng + ?Sized>(&self, _rng: &mut R) -> bool {
        false
    }

    fn features(&self, _state: &bool, _agent: usize) -> AgentFeatures {
        AgentFeatures {
            own: vec![1.0],
            others: vec![0.0; self.game.n() - 1],
        }
    }

    fn forced_action(&self, _state: &bool) -> Option<JointAction> {
        None
    }

    fn clamp_action(&self, _state: &bool, raw: &JointAction) -> JointAction {
        raw.clone()
    }

    fn step<R: Rng + ?Sized>(
        &self,
        state: &bool,
        action: &JointAction,
        _rng: &mut R,
    ) -> Result<StepOutcome<bool>> {
        if *state {
            return Err(Error::TerminalState { step: 1, horizon: 1 });
        }
        if action.len() != self.game.n() {
            return Err(Error::Dimension {
                context: "joint action",
                expected: self.game.n(),
                got: action.len(),
            });
        }
        Ok(StepOutcome {
            next_state: true,
            rewards: self.game.payoffs(action.trades()),
            applied: action.clone(),
            terminal: true,
        })
    }

    fn is_terminal(&self, state: &bool) -> bool {
        *state
    }
}

/// `v_ss S^2 + v_sq S q + v_qq q^2 + v_s S + v_q q + v_0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LQValuePolynomial {
    pub v_ss: f64,
    pub v_sq: f64,
    pub v_qq: f64,
    pub v_s: f64,
    pub v_q: f64,
    pub v_0: f64,
}

impl LQValuePolynomial {
    pub fn eval(&self, s: f64, q: f64) -> f64 {
        self.v_ss * s * s + self.v_sq * s * q + self.v_qq * q * q + self.v_s * s + self.v_q * q + self.v_0
    }
}

/// `nu = alpha + beta S + delta q`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearPolicy {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
}

impl LinearPolicy {
    pub fn action(&self, s: f64, q: f64) -> f64 {
        self.alpha + self.beta * s + self.delta * q
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LqrSolution {
    /// One policy per decision step `0..T`.
    pub policies: Vec<LinearPolicy>,
    /// Value before acting at steps `0..=T`; the last entry is zero.
    pub values: Vec<LQValuePolynomial>,
}

impl LqrSolution {
    pub fn action(&self, t: usize, s: f64, q: f64) -> f64 {
        self.policies[t].action(s, q)
    }

    pub fn value(&self, t: usize, s: f64, q: f64) -> f64 {
        self.values[t].eval(s, q)
    }
}

/// Affine form `c + l . z` over `z = (S, q, nu)`.
#[derive(Clone, Copy, Debug)]
struct Affine {
    c: f64,
    l: [f64; 3],
}

impl Affine {
    fn new(c: f64, l: [f64; 3]) -> Self {
        Self { c, l }
    }
}

/// Quadratic `z' H z + g . z + c` with symmetric `H`.
#[derive(Clone, Copy, Debug, Default)]
struct Quadratic {
    h: [[f64; 3]; 3],
    g: [f64; 3],
    c: f64,
}

impl Quadratic {
    /// Adds `w * x * y`.
    fn add_product(&mut self, w: f64, x: Affine, y: Affine) {
        for i in 0..3 {
            for j in 0..3 {
                self.h[i][j] += 0.5 * w * (x.l[i] * y.l[j] + y.l[i] * x.l[j]);
            }
            self.g[i] += w * (x.c * y.l[i] + y.c * x.l[i]);
        }
        self.c += w * x.c * y.c;
    }

    fn add_affine(&mut self, w: f64, x: Affine) {
        for i in 0..3 {
            self.g[i] += w * x.l[i];
        }
        self.c += w * x.c;
    }

    /// Restricts to `nu = alpha + beta S + delta q`, giving a polynomial in
    /// `(S, q)`.
    fn substitute(&self, p: &LinearPolicy) -> LQValuePolynomial {
        // z = A w + b with w = (S, q).
        let a = [[1.0, 0.0], [0.0, 1.0], [p.beta, p.delta]];
        let b = [0.0, 0.0, p.alpha];
        let mut hw = [[0.0; 2]; 2];
        let mut gw = [0.0; 2];
        for r in 0..2 {
            for s in 0..2 {
                for i in 0..3 {
                    for j in 0..3 {
                        hw[r][s] += a[i][r] * self.h[i][j] * a[j][s];
                    }
                }
            }
            for i in 0..3 {
                let hb: f64 = (0..3).map(|j| self.h[i][j] * b[j]).sum();
                gw[r] += a[i][r] * (2.0 * hb + self.g[i]);
            }
        }
        let mut c = self.c;
        for i in 0..3 {
            for j in 0..3 {
                c += b[i] * self.h[i][j] * b[j];
            }
            c += self.g[i] * b[i];
        }
        LQValuePolynomial {
            v_ss: hw[0][0],
            v_sq: hw[0][1] + hw[1][0],
            v_qq: hw[1][1],
            v_s: gw[0],
            v_q: gw[1],
            v_0: c,
        }
    }
}

/// Exact dynamic-programming solution of the single-agent market game with
/// linear impact and no discounting. Inventory bounds are ignored.
pub fn solve_lqr_market(params: &MarketParams) -> Result<LqrSolution> {
    params.validate()?;
    if params.n_agents != 1 {
        return Err(Error::Unsupported(format!(
            "the LQ oracle is single-agent, got n_agents = {}",
            params.n_agents
        )));
    }
    if params.impact_kind != ImpactKind::Linear {
        return Err(Error::Unsupported(
            "square-root impact has no quadratic value function".into(),
        ));
    }
    let t_max = params.horizon;
    let dt = params.dt;
    let forced = params.b2.is_forced();
    let b2 = match params.b2 {
        crate::market::TerminalPenalty::Finite(v) => v,
        crate::market::TerminalPenalty::ForcedLiquidation => 0.0,
    };

    let s = Affine::new(0.0, [1.0, 0.0, 0.0]);
    let nu = Affine::new(0.0, [0.0, 0.0, 1.0]);
    let q_next = Affine::new(0.0, [0.0, 1.0, 1.0]);
    // E[S'] = kappa theta dt + (1 - kappa dt) S + b1 dt nu.
    let mean_next = Affine::new(
        params.kappa * params.theta_mr * dt,
        [1.0 - params.kappa * dt, 0.0, params.b1 * dt],
    );
    let var_next = params.sigma * params.sigma * dt;

    let mut values = vec![LQValuePolynomial::default(); t_max + 1];
    let mut policies = vec![
        LinearPolicy {
            alpha: 0.0,
            beta: 0.0,
            delta: 0.0
        };
        t_max
    ];
    for t in (0..t_max).rev() {
        let last = t + 1 == t_max;
        let next = values[t + 1];
        let mut qf = Quadratic::default();
        // Cash: -nu S - b1 nu^2.
        qf.add_product(-1.0, nu, s);
        qf.add_product(-params.b1, nu, nu);
        // Running penalty on post-trade inventory.
        qf.add_product(-params.b3 * dt, q_next, q_next);
        if last && !forced {
            qf.add_product(1.0, q_next, mean_next);
            qf.add_product(-b2, q_next, q_next);
        }
        // E[V_{t+1}(S', q')].
        qf.add_product(next.v_ss, mean_next, mean_next);
        qf.c += next.v_ss * var_next;
        qf.add_product(next.v_sq, mean_next, q_next);
        qf.add_product(next.v_qq, q_next, q_next);
        qf.add_affine(next.v_s, mean_next);
        qf.add_affine(next.v_q, q_next);
        qf.c += next.v_0;

        let policy = if last && forced {
            LinearPolicy {
                alpha: 0.0,
                beta: 0.0,
                delta: -1.0,
            }
        } else {
            let hnn = qf.h[2][2];
            if !(hnn < 0.0) {
                return Err(Error::Singular(format!(
                    "one-step objective is not strictly concave in the trade at t = {t}"
                )));
            }
            LinearPolicy {
                alpha: -qf.g[2] / (2.0 * hnn),
                beta: -qf.h[2][0] / hnn,
                delta: -qf.h[2][1] / hnn,
            }
        };
        values[t] = qf.substitute(&policy);
        policies[t] = policy;
    }
    Ok(LqrSolution { policies, values })
}
