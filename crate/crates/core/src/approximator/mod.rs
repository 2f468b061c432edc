//! Small fixed-topology fully connected networks with reverse-mode gradients.
//!
//! Parameters of every network in a model live in one flat [`ParameterSet`];
//! each network is a view ([`Mlp`]) that knows the offsets of its weight and
//! bias tensors. Forward passes are batched (one row per sample) so the hot
//! loops go through matrix products.

mod mlp;
mod optim;
mod params;

pub use mlp::{Activation, InitScheme, Mlp, NetworkSpec, Tape};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Partition, PartitionSelector, ParameterSet, TensorId, TensorInfo};
