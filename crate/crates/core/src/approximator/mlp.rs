use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{grad_view1, grad_view2, Partition, ParameterSet, TensorId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Shape of a fully connected network: ReLU on hidden layers, identity output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::param(name, "all layer widths must be >= 1"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Zero-mean normal weights with variance `2 / fan_in`, zero biases.
    #[default]
    HeNormal,
}

#[derive(Clone, Debug)]
struct Layer {
    w: TensorId,
    b: TensorId,
}

/// A network bound to tensors inside a [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct Mlp {
    name: String,
    spec: NetworkSpec,
    layers: Vec<Layer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TapeState {
    Empty,
    Recorded,
    Consumed,
}

/// Activations of one recorded forward pass.
///
/// A tape can be reused as a buffer, but each recording supports exactly one
/// backward pass, and only while the parameters are unchanged.
#[derive(Debug)]
pub struct Tape {
    acts: Vec<Array2<f64>>,
    owner: String,
    version: u64,
    state: TapeState,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            acts: Vec::new(),
            owner: String::new(),
            version: 0,
            state: TapeState::Empty,
        }
    }

    pub fn output(&self) -> ArrayView2<'_, f64> {
        self.acts.last().expect("tape has been recorded").view()
    }

    /// Which hidden units were active, row-major over layers then samples.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let n = self.acts.len();
        if n < 3 {
            return Vec::new();
        }
        self.acts[1..n - 1]
            .iter()
            .flat_map(|a| a.iter().map(|&v| v > 0.0))
            .collect()
    }
}

impl Mlp {
    /// Registers zero-filled tensors for a new network.
    pub fn register(
        params: &mut ParameterSet,
        name: &str,
        spec: NetworkSpec,
        partition: Partition,
    ) -> Result<Self> {
        spec.validate(name)?;
        let mut layers = Vec::new();
        for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            let w = params.add_tensor(format!("{name}.{l}.w"), vec![fan_out, fan_in], partition)?;
            let b = params.add_tensor(format!("{name}.{l}.b"), vec![fan_out], partition)?;
            layers.push(Layer { w, b });
        }
        Ok(Self {
            name: name.to_string(),
            spec,
            layers,
        })
    }

    /// Binds to tensors that already exist (e.g. loaded from a checkpoint).
    pub fn attach(params: &ParameterSet, name: &str, spec: NetworkSpec) -> Result<Self> {
        spec.validate(name)?;
        let mut layers = Vec::new();
        for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            let lookup = |suffix: &str, shape: Vec<usize>| -> Result<TensorId> {
                let tname = format!("{name}.{l}.{suffix}");
                let id = params
                    .find(&tname)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{tname}`")))?;
                if params.info(id).shape != shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{tname}` has shape {:?}, network expects {:?}",
                        params.info(id).shape,
                        shape
                    )));
                }
                Ok(id)
            };
            let w = lookup("w", vec![fan_out, fan_in])?;
            let b = lookup("b", vec![fan_out])?;
            layers.push(Layer { w, b });
        }
        Ok(Self {
            name: name.to_string(),
            spec,
            layers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R, scheme: InitScheme) {
        match scheme {
            InitScheme::HeNormal => {
                for layer in &self.layers {
                    let fan_in = params.info(layer.w).shape[1];
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .expect("finite positive std");
                    for w in params.tensor_mut(layer.w) {
                        *w = normal.sample(rng);
                    }
                    params.tensor_mut(layer.b).fill(0.0);
                }
            }
        }
    }

    fn check_input(&self, input: &ArrayView2<'_, f64>) -> Result<()> {
        if input.ncols() != self.spec.input_dim {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.spec.input_dim,
                got: input.ncols(),
            });
        }
        Ok(())
    }

    fn affine(&self, params: &ParameterSet, l: usize, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        let layer = &self.layers[l];
        let w = params.view2(layer.w);
        let mut z = x.dot(&w.t());
        z += &params.view1(layer.b);
        if l + 1 < self.layers.len() {
            z.mapv_inplace(relu);
        }
        z
    }

    /// Batched evaluation, one sample per row.
    pub fn forward(&self, params: &ParameterSet, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        let mut x = self.affine(params, 0, &input);
        for l in 1..self.layers.len() {
            x = self.affine(params, l, &x.view());
        }
        Ok(x)
    }

    pub fn forward_one(&self, params: &ParameterSet, input: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        Ok(self.forward(params, view)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass that keeps every layer's activations in `tape`.
    pub fn forward_recorded(
        &self,
        params: &ParameterSet,
        input: ArrayView2<'_, f64>,
        tape: &mut Tape,
    ) -> Result<()> {
        self.check_input(&input)?;
        tape.acts.clear();
        tape.acts.push(input.to_owned());
        for l in 0..self.layers.len() {
            let next = self.affine(params, l, &tape.acts[l].view());
            tape.acts.push(next);
        }
        tape.owner.clone_from(&self.name);
        tape.version = params.version();
        tape.state = TapeState::Recorded;
        Ok(())
    }

    /// Accumulates `d<cotangent, output>/d params` into `grads` and, when
    /// asked, returns the gradient with respect to the input rows.
    pub fn backward(
        &self,
        params: &ParameterSet,
        tape: &mut Tape,
        cotangent: ArrayView2<'_, f64>,
        grads: &mut [f64],
        want_input_grad: bool,
    ) -> Result<Option<Array2<f64>>> {
        match tape.state {
            TapeState::Recorded => {}
            TapeState::Empty => return Err(Error::StaleTape("no forward pass recorded")),
            TapeState::Consumed => return Err(Error::StaleTape("tape already used for backward")),
        }
        if tape.owner != self.name {
            return Err(Error::StaleTape("tape was recorded by a different network"));
        }
        if tape.version != params.version() {
            return Err(Error::StaleTape("parameters changed since the forward pass"));
        }
        if grads.len() != params.len() {
            return Err(Error::Dimension {
                context: "gradient buffer",
                expected: params.len(),
                got: grads.len(),
            });
        }
        let out = tape.output();
        if cotangent.dim() != out.dim() {
            return Err(Error::Dimension {
                context: "output cotangent",
                expected: out.len(),
                got: cotangent.len(),
            });
        }
        tape.state = TapeState::Consumed;

        let mut delta = cotangent.to_owned();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let x = &tape.acts[l];
            {
                let mut gw = grad_view2(grads, params.info(layer.w));
                general_mat_mul(1.0, &delta.t(), x, 1.0, &mut gw);
            }
            {
                let mut gb = grad_view1(grads, params.info(layer.b));
                gb += &delta.sum_axis(Axis(0));
            }
            if l > 0 || want_input_grad {
                let mut dx = delta.dot(&params.view2(layer.w));
                if l > 0 {
                    dx.zip_mut_with(x, |d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
                }
                delta = dx;
            }
        }
        Ok(want_input_grad.then_some(delta))
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}
