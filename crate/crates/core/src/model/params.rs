use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A named tensor. Batch-norm running statistics are stored as non-trainable parameters
/// so they travel, average and checkpoint together with the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered parameter collection of one model stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) {
        self.params.push(Param { name: name.into(), tensor, trainable });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param<T>> {
        self.params.iter_mut()
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.params.iter().position(|p| p.name == name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        Ok(&self.params[self.index_of(name)?])
    }

    /// Mutable access to two distinct parameters at once.
    pub fn pair_mut(&mut self, a: usize, b: usize) -> (&mut Param<T>, &mut Param<T>) {
        assert_ne!(a, b);
        if a < b {
            let (lo, hi) = self.params.split_at_mut(b);
            (&mut lo[a], &mut hi[0])
        } else {
            let (lo, hi) = self.params.split_at_mut(a);
            (&mut hi[0], &mut lo[b])
        }
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn numel_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.all_finite())
    }

    /// True when names, shapes and trainability agree entry by entry.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape() && a.trainable == b.trainable)
    }

    /// Every scalar in parameter order, row-major within each tensor.
    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.params.iter().flat_map(|p| p.tensor.data().iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.params.iter_mut().flat_map(|p| p.tensor.data_mut().iter_mut())
    }
}

/// Front-end, server and back-end parameters of the split U-Net.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitModelWeights<T> {
    pub front_end: ParamSet<T>,
    pub server: ParamSet<T>,
    pub back_end: ParamSet<T>,
}

/// The client-held part `{front-end, back-end}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientWeights<T> {
    pub front_end: ParamSet<T>,
    pub back_end: ParamSet<T>,
}

impl<T: Scalar> SplitModelWeights<T> {
    pub fn from_parts(server: ParamSet<T>, client: ClientWeights<T>) -> Self {
        SplitModelWeights { front_end: client.front_end, server, back_end: client.back_end }
    }

    pub fn client(&self) -> ClientWeights<T> {
        ClientWeights { front_end: self.front_end.clone(), back_end: self.back_end.clone() }
    }

    pub fn set_client(&mut self, client: ClientWeights<T>) {
        self.front_end = client.front_end;
        self.back_end = client.back_end;
    }

    pub fn stages(&self) -> [&ParamSet<T>; 3] {
        [&self.front_end, &self.server, &self.back_end]
    }

    pub fn stages_mut(&mut self) -> [&mut ParamSet<T>; 3] {
        [&mut self.front_end, &mut self.server, &mut self.back_end]
    }

    pub fn numel(&self) -> usize {
        self.stages().iter().map(|s| s.numel()).sum()
    }

    pub fn numel_trainable(&self) -> usize {
        self.stages().iter().map(|s| s.numel_trainable()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.stages().iter().all(|s| s.all_finite())
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.stages().iter().zip(other.stages()).all(|(a, b)| a.same_layout(b))
    }

    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.front_end.values().chain(self.server.values()).chain(self.back_end.values())
    }
}

impl<T: Scalar> ClientWeights<T> {
    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.front_end.values().chain(self.back_end.values())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.front_end.values_mut().chain(self.back_end.values_mut())
    }

    pub fn all_finite(&self) -> bool {
        self.front_end.all_finite() && self.back_end.all_finite()
    }
}
