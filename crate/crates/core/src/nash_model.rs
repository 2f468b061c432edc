//! Locally linear-quadratic Nash Q-function.
//!
//! `Q_i(x; u) = V_i(x) + A_i(x; u)` with the label-invariant, identical
//! preference advantage
//!
//! ```text
//! A_i = -P11 (u_i - mu_i)^2 - P12 sum_{j!=i} (u_i - mu_i)(u_j - mu_j)
//!       - P22 sum_{j!=i} (u_j - mu_j)^2 + psi sum_{j!=i} (u_j - mu_j)
//! ```
//!
//! One shared value network and one shared coefficient network serve every
//! agent. The coefficient network sees the agent's own features plus a
//! sum-pooled embedding `sum_j phi(z_j)` of the other agents' features, so
//! its output does not depend on how the other agents are ordered. `P11` is
//! the square of a strictly positive Cholesky factor, which makes each
//! `A_i` strictly concave in `u_i` with its maximum at `mu_i`; the Nash
//! action is therefore read directly off the network.
//!
//! Internally actions are divided by `action_scale` and values by
//! `value_scale`; every public method speaks physical units.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::{
    InitScheme, Mlp, NetworkSpec, Partition, ParameterSet, Tape,
};
use crate::error::{Error, Result};
use crate::game::{AgentFeatures, JointAction, StateFeatures};

/// Number of coefficient-head outputs: mu, raw Cholesky factor, P12, P22, psi.
pub const HEAD_DIM: usize = 5;

/// Affine normalization of raw features: `(x - center) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureNormalization {
    pub own_center: Vec<f64>,
    pub own_scale: Vec<f64>,
    pub other_center: f64,
    pub other_scale: f64,
}

impl FeatureNormalization {
    pub fn identity(own_dim: usize) -> Self {
        Self {
            own_center: vec![0.0; own_dim],
            own_scale: vec![1.0; own_dim],
            other_center: 0.0,
            other_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.own_center.len() != self.own_scale.len() {
            return Err(Error::param(
                "normalization.own_scale",
                "must have the same length as own_center",
            ));
        }
        let bad = |v: f64| !(v.is_finite() && v != 0.0);
        if self.own_scale.iter().any(|&v| bad(v)) || bad(self.other_scale) {
            return Err(Error::param("normalization", "scales must be finite and nonzero"));
        }
        Ok(())
    }

    fn own(&self, raw: &[f64], out: &mut Vec<f64>) {
        out.extend(
            raw.iter()
                .zip(&self.own_center)
                .zip(&self.own_scale)
                .map(|((x, c), s)| (x - c) / s),
        );
    }

    fn other(&self, raw: f64) -> f64 {
        (raw - self.other_center) / self.other_scale
    }
}

/// Resolved model description, stored verbatim in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub value: NetworkSpec,
    pub phi: NetworkSpec,
    pub main: NetworkSpec,
    pub normalization: FeatureNormalization,
    /// Floor added after the softplus that produces the Cholesky factor.
    pub positivity_eps: f64,
    pub action_scale: f64,
    pub value_scale: f64,
    pub init: InitScheme,
}

impl ModelSpec {
    /// Builds the three network shapes around the given hidden widths.
    pub fn new(
        normalization: FeatureNormalization,
        value_hidden: &[usize],
        phi_hidden: &[usize],
        embed_dim: usize,
        main_hidden: &[usize],
    ) -> Self {
        let own = normalization.own_center.len();
        Self {
            value: NetworkSpec::new(own + 2, value_hidden, 1),
            phi: NetworkSpec::new(1, phi_hidden, embed_dim),
            main: NetworkSpec::new(own + embed_dim, main_hidden, HEAD_DIM),
            normalization,
            positivity_eps: 1e-3,
            action_scale: 1.0,
            value_scale: 1.0,
            init: InitScheme::HeNormal,
        }
    }

    pub fn own_dim(&self) -> usize {
        self.normalization.own_center.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.phi.output_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.normalization.validate()?;
        self.value.validate("model.value")?;
        self.phi.validate("model.phi")?;
        self.main.validate("model.main")?;
        let own = self.own_dim();
        if self.value.input_dim != own + 2 || self.value.output_dim != 1 {
            return Err(Error::param("model.value", "expects own_dim + 2 inputs and 1 output"));
        }
        if self.phi.input_dim != 1 {
            return Err(Error::param("model.phi", "expects one input per other agent"));
        }
        if self.main.input_dim != own + self.embed_dim() || self.main.output_dim != HEAD_DIM {
            return Err(Error::param(
                "model.main",
                "expects own_dim + embed_dim inputs and 5 outputs",
            ));
        }
        if !(self.positivity_eps > 0.0 && self.positivity_eps.is_finite()) {
            return Err(Error::param("model.positivity_eps", "must be > 0"));
        }
        if !(self.action_scale > 0.0 && self.action_scale.is_finite()) {
            return Err(Error::param("model.action_scale", "must be > 0"));
        }
        if !(self.value_scale > 0.0 && self.value_scale.is_finite()) {
            return Err(Error::param("model.value_scale", "must be > 0"));
        }
        Ok(())
    }
}

/// Advantage coefficients of one agent at one state, in physical units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvantageCoefficients {
    pub mu: f64,
    /// Cholesky factor of `p11` (strictly positive).
    pub l11: f64,
    pub p11: f64,
    pub p12: f64,
    pub p22: f64,
    pub psi: f64,
}

/// Evaluates the symmetric LQ advantage for every agent. `coeffs[i]` holds
/// agent `i`'s curvature terms and equilibrium action `mu_i`.
pub fn lq_advantage(coeffs: &[AdvantageCoefficients], action: &[f64]) -> Vec<f64> {
    let d: Vec<f64> = action.iter().zip(coeffs).map(|(u, c)| u - c.mu).collect();
    (0..coeffs.len())
        .map(|i| {
            let c = &coeffs[i];
            let (mut cross, mut sq) = (0.0, 0.0);
            for (j, dj) in d.iter().enumerate() {
                if j != i {
                    cross += dj;
                    sq += dj * dj;
                }
            }
            -c.p11 * d[i] * d[i] - c.p12 * d[i] * cross - c.p22 * sq + c.psi * cross
        })
        .collect()
}

/// One observed transition viewed through agent features.
#[derive(Clone, Copy, Debug)]
pub struct LossSample<'a> {
    pub state: &'a StateFeatures,
    pub action: &'a [f64],
    pub rewards: &'a [f64],
    /// `None` for terminal transitions (bootstrap value 0).
    pub next_state: Option<&'a StateFeatures>,
    /// Singleton admissible set at `state`: the advantage is identically 0.
    pub forced: bool,
}

/// Which parameters receive gradient in [`NashQModel::loss_and_grad`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    None,
    Value,
    Advantage,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossOptions<'a> {
    /// Stop the gradient through the bootstrap term `gamma V(x')`.
    pub semi_gradient: bool,
    /// Separate parameters for the bootstrap term (target network). The
    /// bootstrap term is then constant with respect to the live parameters.
    pub bootstrap_params: Option<&'a ParameterSet>,
}

#[derive(Clone, Debug)]
pub struct NashQModel {
    spec: ModelSpec,
    params: ParameterSet,
    value_net: Mlp,
    phi_net: Mlp,
    main_net: Mlp,
}

struct CoefForward {
    /// Raw head outputs, one row per (state, agent).
    raw: Array2<f64>,
    phi_tape: Tape,
    main_tape: Tape,
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Head outputs in normalized units.
#[derive(Clone, Copy, Debug)]
struct Head {
    mu: f64,
    l_raw: f64,
    l11: f64,
    p11: f64,
    p12: f64,
    p22: f64,
    psi: f64,
}

impl NashQModel {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParameterSet::new();
        let value_net = Mlp::register(&mut params, "value", spec.value.clone(), Partition::Value)?;
        let phi_net = Mlp::register(&mut params, "phi", spec.phi.clone(), Partition::Advantage)?;
        let main_net = Mlp::register(&mut params, "main", spec.main.clone(), Partition::Advantage)?;
        value_net.init(&mut params, rng, spec.init);
        phi_net.init(&mut params, rng, spec.init);
        main_net.init(&mut params, rng, spec.init);
        Ok(Self {
            spec,
            params,
            value_net,
            phi_net,
            main_net,
        })
    }

    /// Rebinds a model to existing parameters (checkpoint load).
    pub fn from_parts(spec: ModelSpec, params: ParameterSet) -> Result<Self> {
        spec.validate()?;
        let value_net = Mlp::attach(&params, "value", spec.value.clone())?;
        let phi_net = Mlp::attach(&params, "phi", spec.phi.clone())?;
        let main_net = Mlp::attach(&params, "main", spec.main.clone())?;
        let expected =
            spec.value.param_count() + spec.phi.param_count() + spec.main.param_count();
        if params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match model ({expected})",
                params.len()
            )));
        }
        Ok(Self {
            spec,
            params,
            value_net,
            phi_net,
            main_net,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn check_state(&self, sf: &StateFeatures) -> Result<()> {
        let n = sf.len();
        if n == 0 {
            return Err(Error::Dimension {
                context: "agents in state",
                expected: 1,
                got: 0,
            });
        }
        for f in sf {
            if f.own.len() != self.spec.own_dim() {
                return Err(Error::Dimension {
                    context: "own features",
                    expected: self.spec.own_dim(),
                    got: f.own.len(),
                });
            }
            if f.others.len() != n - 1 {
                return Err(Error::Dimension {
                    context: "other-agent features",
                    expected: n - 1,
                    got: f.others.len(),
                });
            }
        }
        Ok(())
    }

    /// Normalized other-agent features in canonical (sorted) order. Sorting
    /// makes pooled sums bit-identical under any reordering of the input.
    fn sorted_others(&self, f: &AgentFeatures) -> Vec<f64> {
        let mut z: Vec<f64> = f
            .others
            .iter()
            .map(|&x| self.spec.normalization.other(x))
            .collect();
        z.sort_by(f64::total_cmp);
        z
    }

    fn value_row(&self, f: &AgentFeatures, out: &mut Vec<f64>) {
        self.spec.normalization.own(&f.own, out);
        let z = self.sorted_others(f);
        let (mut m1, mut m2) = (0.0, 0.0);
        for v in &z {
            m1 += v;
            m2 += v * v;
        }
        let k = z.len().max(1) as f64;
        out.push(m1 / k);
        out.push(m2 / k);
    }

    fn value_inputs<'a>(&self, states: impl Iterator<Item = &'a StateFeatures>) -> Array2<f64> {
        let width = self.spec.value.input_dim;
        let mut flat = Vec::new();
        let mut rows = 0;
        for sf in states {
            for f in sf {
                self.value_row(f, &mut flat);
                rows += 1;
            }
        }
        Array2::from_shape_vec((rows, width), flat).expect("value rows have fixed width")
    }

    /// Runs phi, pools, and runs the main network for every agent of every
    /// state. Rows are ordered (state, agent).
    fn coef_forward(&self, states: &[&StateFeatures], record: bool) -> Result<CoefForward> {
        let n = states.first().map_or(0, |s| s.len());
        let others = n.saturating_sub(1);
        let own_dim = self.spec.own_dim();
        let embed = self.spec.embed_dim();
        let rows: usize = states.iter().map(|s| s.len()).sum();

        let mut phi_in = Vec::with_capacity(rows * others);
        let mut main_in = Array2::<f64>::zeros((rows, own_dim + embed));
        let mut own = Vec::with_capacity(own_dim);
        let mut r = 0;
        for sf in states {
            if sf.len() != n {
                return Err(Error::Dimension {
                    context: "agents per state in batch",
                    expected: n,
                    got: sf.len(),
                });
            }
            for f in sf.iter() {
                phi_in.extend(self.sorted_others(f));
                own.clear();
                self.spec.normalization.own(&f.own, &mut own);
                main_in
                    .slice_mut(s![r, ..own_dim])
                    .assign(&ndarray::ArrayView1::from(&own[..]));
                r += 1;
            }
        }

        let mut phi_tape = Tape::new();
        if others > 0 {
            let phi_in = ArrayView2::from_shape((rows * others, 1), &phi_in[..])
                .expect("phi input is a column");
            let phi_out = if record {
                self.phi_net.forward_recorded(&self.params, phi_in, &mut phi_tape)?;
                phi_tape.output().to_owned()
            } else {
                self.phi_net.forward(&self.params, phi_in)?
            };
            for (r, block) in phi_out.axis_chunks_iter(Axis(0), others).enumerate() {
                let mut pooled = main_in.slice_mut(s![r, own_dim..]);
                for row in block.outer_iter() {
                    pooled += &row;
                }
            }
        }

        let mut main_tape = Tape::new();
        let raw = if record {
            self.main_net
                .forward_recorded(&self.params, main_in.view(), &mut main_tape)?;
            main_tape.output().to_owned()
        } else {
            self.main_net.forward(&self.params, main_in.view())?
        };
        Ok(CoefForward {
            raw,
            phi_tape,
            main_tape,
        })
    }

    fn coef_backward(
        &self,
        fwd: &mut CoefForward,
        d_raw: Array2<f64>,
        others: usize,
        grads: &mut [f64],
    ) -> Result<()> {
        let d_in = self
            .main_net
            .backward(&self.params, &mut fwd.main_tape, d_raw.view(), grads, others > 0)?;
        if let Some(d_in) = d_in {
            let own_dim = self.spec.own_dim();
            let d_embed = d_in.slice(s![.., own_dim..]);
            let rows = d_embed.nrows();
            let mut cot = Array2::<f64>::zeros((rows * others, self.spec.embed_dim()));
            for (r, mut block) in cot.axis_chunks_iter_mut(Axis(0), others).enumerate() {
                block.assign(&d_embed.row(r));
            }
            let _ = rows;
            self.phi_net
                .backward(&self.params, &mut fwd.phi_tape, cot.view(), grads, false)?;
        }
        Ok(())
    }

    fn head(&self, raw: ndarray::ArrayView1<'_, f64>) -> Head {
        let l11 = softplus(raw[1]) + self.spec.positivity_eps;
        Head {
            mu: raw[0],
            l_raw: raw[1],
            l11,
            p11: l11 * l11,
            p12: raw[2],
            p22: raw[3],
            psi: raw[4],
        }
    }

    fn to_physical(&self, h: &Head) -> AdvantageCoefficients {
        let a = self.spec.action_scale;
        let v = self.spec.value_scale;
        let p11 = h.p11 * v / (a * a);
        AdvantageCoefficients {
            mu: h.mu * a,
            l11: h.l11 * v.sqrt() / a,
            p11,
            p12: h.p12 * v / (a * a),
            p22: h.p22 * v / (a * a),
            psi: h.psi * v / a,
        }
    }

    /// Pooled embedding `sum_j phi(z_j)` of raw other-agent features; the
    /// zero vector when there are no other agents.
    pub fn perm_invariant_embed(&self, others: &[f64]) -> Result<Vec<f64>> {
        let embed = self.spec.embed_dim();
        let f = AgentFeatures {
            own: vec![0.0; self.spec.own_dim()],
            others: others.to_vec(),
        };
        let z = self.sorted_others(&f);
        let mut acc = vec![0.0; embed];
        if z.is_empty() {
            return Ok(acc);
        }
        let out = self.phi_net.forward(
            &self.params,
            ArrayView2::from_shape((z.len(), 1), &z[..]).expect("column"),
        )?;
        for row in out.outer_iter() {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        Ok(acc)
    }

    /// Coefficients for every agent at one state.
    pub fn all_coefficients(&self, sf: &StateFeatures) -> Result<Vec<AdvantageCoefficients>> {
        self.check_state(sf)?;
        let fwd = self.coef_forward(&[sf], false)?;
        Ok(fwd
            .raw
            .outer_iter()
            .map(|row| self.to_physical(&self.head(row)))
            .collect())
    }

    pub fn coefficients(&self, sf: &StateFeatures, agent: usize) -> Result<AdvantageCoefficients> {
        if agent >= sf.len() {
            return Err(Error::Dimension {
                context: "agent index",
                expected: sf.len(),
                got: agent,
            });
        }
        Ok(self.all_coefficients(sf)?[agent])
    }

    /// Shared value network applied to every agent.
    pub fn value(&self, sf: &StateFeatures) -> Result<Vec<f64>> {
        self.check_state(sf)?;
        let out = self
            .value_net
            .forward(&self.params, self.value_inputs(std::iter::once(sf)).view())?;
        Ok(out.iter().map(|v| v * self.spec.value_scale).collect())
    }

    /// Model-implied Nash equilibrium action `mu(x)`.
    pub fn nash_action(&self, sf: &StateFeatures) -> Result<JointAction> {
        self.check_state(sf)?;
        let fwd = self.coef_forward(&[sf], false)?;
        Ok(JointAction(
            fwd.raw
                .column(0)
                .iter()
                .map(|m| m * self.spec.action_scale)
                .collect(),
        ))
    }

    pub fn advantage(&self, sf: &StateFeatures, action: &[f64]) -> Result<Vec<f64>> {
        self.check_state(sf)?;
        if action.len() != sf.len() {
            return Err(Error::Dimension {
                context: "joint action",
                expected: sf.len(),
                got: action.len(),
            });
        }
        let fwd = self.coef_forward(&[sf], false)?;
        let heads: Vec<Head> = fwd.raw.outer_iter().map(|r| self.head(r)).collect();
        Ok(self
            .normalized_advantage(&heads, action)
            .into_iter()
            .map(|a| a * self.spec.value_scale)
            .collect())
    }

    pub fn q_value(&self, sf: &StateFeatures, action: &[f64]) -> Result<Vec<f64>> {
        let v = self.value(sf)?;
        let a = self.advantage(sf, action)?;
        Ok(v.iter().zip(&a).map(|(v, a)| v + a).collect())
    }

    fn deviations(&self, heads: &[Head], action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(heads)
            .map(|(u, h)| u / self.spec.action_scale - h.mu)
            .collect()
    }

    fn normalized_advantage(&self, heads: &[Head], action: &[f64]) -> Vec<f64> {
        let d = self.deviations(heads, action);
        let total: f64 = d.iter().sum();
        let total_sq: f64 = d.iter().map(|x| x * x).sum();
        heads
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let cross = total - d[i];
                let sq = total_sq - d[i] * d[i];
                -h.p11 * d[i] * d[i] - h.p12 * d[i] * cross - h.p22 * sq + h.psi * cross
            })
            .collect()
    }

    /// Per-sample, per-agent Bellman residuals in physical units.
    pub fn bellman_residuals(
        &self,
        samples: &[LossSample<'_>],
        gamma: f64,
    ) -> Result<Vec<Vec<f64>>> {
        let mut scratch = Vec::new();
        self.loss_inner(samples, gamma, GradTarget::None, LossOptions::default(), &mut scratch, true)
            .map(|(_, res)| {
                res.into_iter()
                    .map(|r| r.into_iter().map(|x| x * self.spec.value_scale).collect())
                    .collect()
            })
    }

    /// Mean over the batch of `|| V(x) + A(x; u) - r - gamma V(x') ||^2`
    /// (normalized units). Gradients of the selected partition are added
    /// into `grads`.
    pub fn loss_and_grad(
        &self,
        samples: &[LossSample<'_>],
        gamma: f64,
        target: GradTarget,
        opts: LossOptions<'_>,
        grads: &mut [f64],
    ) -> Result<f64> {
        self.loss_inner(samples, gamma, target, opts, grads, false)
            .map(|(l, _)| l)
    }

    pub fn loss(&self, samples: &[LossSample<'_>], gamma: f64) -> Result<f64> {
        let mut scratch = Vec::new();
        self.loss_inner(samples, gamma, GradTarget::None, LossOptions::default(), &mut scratch, false)
            .map(|(l, _)| l)
    }

    fn loss_inner(
        &self,
        samples: &[LossSample<'_>],
        gamma: f64,
        target: GradTarget,
        opts: LossOptions<'_>,
        grads: &mut [f64],
        keep_residuals: bool,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let m = samples.len();
        if m == 0 {
            return Err(Error::EmptyBatch);
        }
        if target != GradTarget::None && grads.len() != self.params.len() {
            return Err(Error::Dimension {
                context: "gradient buffer",
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let n = samples[0].state.len();
        for smp in samples {
            self.check_state(smp.state)?;
            if smp.state.len() != n || smp.action.len() != n || smp.rewards.len() != n {
                return Err(Error::Dimension {
                    context: "batch sample width",
                    expected: n,
                    got: smp.action.len().min(smp.rewards.len()),
                });
            }
            if let Some(next) = smp.next_state {
                self.check_state(next)?;
            }
        }
        let vs = self.spec.value_scale;

        // Value rows: current states first, then live-bootstrap next states.
        let live_bootstrap = opts.bootstrap_params.is_none();
        let next_states: Vec<&StateFeatures> = samples.iter().filter_map(|s| s.next_state).collect();
        let mut value_tape = Tape::new();
        let record_value = target == GradTarget::Value;
        let value_in = if live_bootstrap {
            self.value_inputs(
                samples
                    .iter()
                    .map(|s| s.state)
                    .chain(next_states.iter().copied()),
            )
        } else {
            self.value_inputs(samples.iter().map(|s| s.state))
        };
        let value_out = if record_value {
            self.value_net
                .forward_recorded(&self.params, value_in.view(), &mut value_tape)?;
            value_tape.output().to_owned()
        } else {
            self.value_net.forward(&self.params, value_in.view())?
        };
        let next_values: Vec<f64> = if live_bootstrap {
            value_out.column(0).iter().skip(m * n).copied().collect()
        } else {
            let p = opts.bootstrap_params.expect("checked above");
            let inputs = self.value_inputs(next_states.iter().copied());
            if inputs.nrows() == 0 {
                Vec::new()
            } else {
                self.value_net.forward(p, inputs.view())?.column(0).to_vec()
            }
        };

        // Coefficient rows for non-forced samples only.
        let free: Vec<usize> = (0..m).filter(|&k| !samples[k].forced).collect();
        let free_states: Vec<&StateFeatures> = free.iter().map(|&k| samples[k].state).collect();
        let record_coef = target == GradTarget::Advantage;
        let mut coef = if free.is_empty() {
            None
        } else {
            Some(self.coef_forward(&free_states, record_coef)?)
        };

        let mut total = 0.0;
        let mut residuals = Vec::with_capacity(if keep_residuals { m } else { 0 });
        let mut value_cot = Array2::<f64>::zeros((if record_value { value_out.nrows() } else { 0 }, 1));
        let mut coef_cot = Array2::<f64>::zeros((if record_coef { free.len() * n } else { 0 }, HEAD_DIM));
        let mut next_cursor = 0;
        let mut free_cursor = 0;
        let scale = 2.0 / m as f64;

        let mut heads = Vec::with_capacity(n);
        for (k, smp) in samples.iter().enumerate() {
            heads.clear();
            let is_free = free_cursor < free.len() && free[free_cursor] == k;
            let adv = if is_free {
                let raw = &coef.as_ref().expect("coefficients computed").raw;
                for i in 0..n {
                    heads.push(self.head(raw.row(free_cursor * n + i)));
                }
                self.normalized_advantage(&heads, smp.action)
            } else {
                vec![0.0; n]
            };
            let next_base = smp.next_state.map(|_| {
                let b = next_cursor;
                next_cursor += n;
                b
            });
            let mut res = Vec::with_capacity(n);
            for i in 0..n {
                let boot = next_base.map_or(0.0, |b| next_values[b + i]);
                let r = value_out[[k * n + i, 0]] + adv[i] - smp.rewards[i] / vs - gamma * boot;
                total += r * r;
                res.push(r);
            }

            if record_value {
                for i in 0..n {
                    value_cot[[k * n + i, 0]] = scale * res[i];
                    if let (Some(b), true, false) = (next_base, live_bootstrap, opts.semi_gradient) {
                        value_cot[[m * n + b + i, 0]] = -gamma * scale * res[i];
                    }
                }
            }
            if record_coef && is_free {
                let d = self.deviations(&heads, smp.action);
                let d_total: f64 = d.iter().sum();
                let d_total_sq: f64 = d.iter().map(|x| x * x).sum();
                let base = free_cursor * n;
                for i in 0..n {
                    let g = scale * res[i];
                    if g == 0.0 {
                        continue;
                    }
                    let h = &heads[i];
                    let cross = d_total - d[i];
                    let sq = d_total_sq - d[i] * d[i];
                    let d_p11 = -g * d[i] * d[i];
                    coef_cot[[base + i, 1]] += d_p11 * 2.0 * h.l11 * sigmoid(h.l_raw);
                    coef_cot[[base + i, 2]] += -g * d[i] * cross;
                    coef_cot[[base + i, 3]] += -g * sq;
                    coef_cot[[base + i, 4]] += g * cross;
                    // dA_i/dd_k, then dd_k/dmu_k = -1.
                    for kk in 0..n {
                        let da_dd = if kk == i {
                            -2.0 * h.p11 * d[i] - h.p12 * cross
                        } else {
                            -h.p12 * d[i] - 2.0 * h.p22 * d[kk] + h.psi
                        };
                        coef_cot[[base + kk, 0]] -= g * da_dd;
                    }
                }
            }
            if is_free {
                free_cursor += 1;
            }
            if keep_residuals {
                residuals.push(res);
            }
        }

        match target {
            GradTarget::None => {}
            GradTarget::Value => {
                self.value_net
                    .backward(&self.params, &mut value_tape, value_cot.view(), grads, false)?;
            }
            GradTarget::Advantage => {
                if let Some(fwd) = coef.as_mut() {
                    self.coef_backward(fwd, coef_cot, n - 1, grads)?;
                }
            }
        }
        Ok((total / m as f64, residuals))
    }
}
