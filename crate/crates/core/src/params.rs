//! Named parameter storage with trainability flags.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Which part of a model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Head,
    Peft,
}

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
    pub group: ParamGroup,
}

/// Insertion-ordered parameter table. Removed slots stay vacant so that
/// outstanding ids never alias a different tensor.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    slots: Vec<Option<Param<S>>>,
    index: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { slots: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, group: ParamGroup) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.slots.len());
        self.index.insert(name.clone(), id);
        self.slots.push(Some(Param { name, value, trainable: true, group }));
        Ok(id)
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Param<S>> {
        let p = self.slots.get_mut(id.0)?.take()?;
        self.index.remove(&p.name);
        Some(p)
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        self.slots[id.0].as_ref().expect("live parameter")
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        self.slots[id.0].as_mut().expect("live parameter")
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.get(id).value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (ParamId(i), p)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<S>)> {
        self.slots
            .iter_mut()
            .enumerate()
            .filter_map(|(i, p)| p.as_mut().map(|p| (ParamId(i), p)))
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn set_trainable_where(&mut self, flag: bool, pred: impl Fn(&Param<S>) -> bool) {
        for (_, p) in self.iter_mut() {
            if pred(p) {
                p.trainable = flag;
            }
        }
    }

    /// Copy of every tensor value, keyed by name.
    pub fn snapshot(&self) -> HashMap<String, Tensor<S>> {
        self.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
    }
}

/// Accumulated gradients keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients<S> {
    grads: HashMap<ParamId, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn new() -> Self {
        Self { grads: HashMap::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.grads.get(&id)
    }

    pub fn accumulate(&mut self, id: ParamId, g: Tensor<S>) {
        match self.grads.get_mut(&id) {
            Some(t) => t.add_assign(&g),
            None => {
                self.grads.insert(id, g);
            }
        }
    }

    pub fn merge(&mut self, other: Gradients<S>) {
        for (id, g) in other.grads {
            self.accumulate(id, g);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<S>)> {
        self.grads.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }

    /// L2 norm over all gradients, summed in parameter order.
    pub fn global_norm(&self) -> S {
        let mut ids: Vec<&ParamId> = self.grads.keys().collect();
        ids.sort();
        ids.into_iter()
            .flat_map(|id| self.grads[id].data().iter())
            .map(|&x| x * x)
            .sum::<S>()
            .sqrt()
    }

    pub fn scale(&mut self, s: S) {
        for t in self.grads.values_mut() {
            t.scale_in_place(s);
        }
    }
}
