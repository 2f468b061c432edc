use std::ops::Range;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which half of the actor-critic split a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Value,
    Advantage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionSelector {
    Value,
    Advantage,
    All,
}

impl PartitionSelector {
    pub fn contains(self, p: Partition) -> bool {
        match self {
            PartitionSelector::All => true,
            PartitionSelector::Value => p == Partition::Value,
            PartitionSelector::Advantage => p == Partition::Advantage,
        }
    }
}

impl From<Partition> for PartitionSelector {
    fn from(p: Partition) -> Self {
        match p {
            Partition::Value => PartitionSelector::Value,
            Partition::Advantage => PartitionSelector::Advantage,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub partition: Partition,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named tensors packed into one flat vector.
///
/// The flat layout is fixed once tensors are registered. `version` increases
/// on every mutation so gradient tapes can detect that the parameters they
/// were recorded against have moved.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    tensors: Vec<TensorInfo>,
    values: Vec<f64>,
    version: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a set from a tensor table and flat values (checkpoint load).
    pub fn from_parts(tensors: Vec<TensorInfo>, values: Vec<f64>) -> Result<Self> {
        let mut expected = 0;
        for t in &tensors {
            if t.offset != expected {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` at offset {} but layout expects {}",
                    t.name, t.offset, expected
                )));
            }
            expected += t.len();
        }
        if expected != values.len() {
            return Err(Error::Dimension {
                context: "parameter values",
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            tensors,
            values,
            version: 0,
        })
    }

    pub fn add_tensor(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        partition: Partition,
    ) -> Result<TensorId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::param(name, "duplicate tensor name"));
        }
        let info = TensorInfo {
            name,
            shape,
            offset: self.values.len(),
            partition,
        };
        self.values.resize(self.values.len() + info.len(), 0.0);
        self.tensors.push(info);
        self.version += 1;
        Ok(TensorId(self.tensors.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<TensorId> {
        self.tensors.iter().position(|t| t.name == name).map(TensorId)
    }

    pub fn info(&self, id: TensorId) -> &TensorInfo {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the flat vector; bumps the version.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.values
    }

    pub fn tensor(&self, id: TensorId) -> &[f64] {
        &self.values[self.tensors[id.0].range()]
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut [f64] {
        self.version += 1;
        let r = self.tensors[id.0].range();
        &mut self.values[r]
    }

    pub(crate) fn view1(&self, id: TensorId) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.tensor(id))
    }

    pub(crate) fn view2(&self, id: TensorId) -> ArrayView2<'_, f64> {
        let info = &self.tensors[id.0];
        ArrayView2::from_shape((info.shape[0], info.shape[1]), &self.values[info.range()])
            .expect("tensor shape matches its length")
    }

    /// Flat ranges of every tensor in the selected partition(s).
    pub fn ranges(&self, selector: PartitionSelector) -> impl Iterator<Item = Range<usize>> + '_ {
        self.tensors
            .iter()
            .filter(move |t| selector.contains(t.partition))
            .map(|t| t.range())
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    /// Plain gradient step `p <- p - lr * g` restricted to one partition.
    pub fn sgd_update(&mut self, grads: &[f64], lr: f64, selector: PartitionSelector) -> Result<()> {
        if grads.len() != self.values.len() {
            return Err(Error::Dimension {
                context: "sgd_update gradient",
                expected: self.values.len(),
                got: grads.len(),
            });
        }
        let ranges: Vec<_> = self.ranges(selector).collect();
        for r in ranges {
            for (p, g) in self.values[r.clone()].iter_mut().zip(&grads[r]) {
                *p -= lr * g;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Copies every tensor of one partition from `other` (same layout).
    pub fn copy_partition_from(&mut self, other: &ParameterSet, selector: PartitionSelector) {
        assert_eq!(self.tensors, other.tensors, "parameter layouts differ");
        let ranges: Vec<_> = self.ranges(selector).collect();
        for r in ranges {
            self.values[r.clone()].copy_from_slice(&other.values[r]);
        }
        self.version += 1;
    }
}

pub(crate) fn grad_view2<'a>(
    grads: &'a mut [f64],
    info: &TensorInfo,
) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((info.shape[0], info.shape[1]), &mut grads[info.range()])
        .expect("tensor shape matches its length")
}

pub(crate) fn grad_view1<'a>(grads: &'a mut [f64], info: &TensorInfo) -> ArrayViewMut1<'a, f64> {
    ArrayViewMut1::from(&mut grads[info.range()])
}
