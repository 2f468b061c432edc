use serde::{Deserialize, Serialize};

use super::params::{Partition, PartitionSelector, ParameterSet};
use crate::error::Result;

/// First-order update rule. Plain SGD is the default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Optimizer state. Adam keeps one step counter per partition so that
/// alternating value/advantage updates get their own bias correction.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: [u64; 2],
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (vec![0.0; n_params], vec![0.0; n_params]),
        };
        Self {
            kind,
            m,
            v,
            steps: [0; 2],
        }
    }

    pub fn kind(&self) -> &OptimizerKind {
        &self.kind
    }

    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &[f64],
        lr: f64,
        selector: PartitionSelector,
    ) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => params.sgd_update(grads, lr, selector),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                for (k, p) in [Partition::Value, Partition::Advantage].into_iter().enumerate() {
                    if !selector.contains(p) {
                        continue;
                    }
                    self.steps[k] += 1;
                    let t = self.steps[k] as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let ranges: Vec<_> = params.ranges(p.into()).collect();
                    let values = params.values_mut();
                    for r in ranges {
                        for i in r {
                            let g = grads[i];
                            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                            let mhat = self.m[i] / c1;
                            let vhat = self.v[i] / c2;
                            values[i] -= lr * mhat / (vhat.sqrt() + eps);
                        }
                    }
                }
                Ok(())
            }
        }
    }
}
