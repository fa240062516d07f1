use indexmap::IndexMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named model state: trainable parameters plus non-trainable buffers
/// (batch-norm running statistics). Insertion order is the canonical order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    pub params: IndexMap<String, Tensor<T>>,
    pub buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        let prev = self.params.insert(name.clone(), t);
        debug_assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing buffer {name}")))
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Place every parameter on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Binding { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().chain(self.buffers.values()).all(Tensor::all_finite)
    }
}

/// Parameter name → graph variable for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    pub vars: IndexMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter {name} is not bound")))
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}
