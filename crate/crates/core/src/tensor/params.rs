use std::collections::HashMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub type ParamId = usize;

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Decoder backbone (token/position embeddings, layers, final norm, LM head).
    Backbone,
    /// Encoders, fusion, auxiliary and classification heads.
    Scratch,
    /// Non-trainable running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<S = f32> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub group: ParamGroup,
    /// Decoupled weight decay applies (false for norms, biases and buffers).
    pub decay: bool,
}

impl<S: Scalar> Param<S> {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad
    }
}

/// Named parameters in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S = f32> {
    params: Vec<Param<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<S>, group: ParamGroup, decay: bool) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let mut tensor = tensor;
        tensor.requires_grad = group != ParamGroup::Buffer;
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            tensor,
            group,
            decay: decay && group != ParamGroup::Buffer,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<S>> {
        Ok(&self.params[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<S>> {
        let id = self.id(name)?;
        Ok(&mut self.params[id])
    }

    pub fn by_id(&self, id: ParamId) -> &Param<S> {
        &self.params[id]
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    /// Total element count over learnable (non-buffer) parameters.
    pub fn num_learnable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.group != ParamGroup::Buffer)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Total element count over parameters currently marked trainable.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            if p.group != ParamGroup::Buffer {
                p.tensor.requires_grad = pred(&p.name);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    group: p.group,
                    decay: p.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
