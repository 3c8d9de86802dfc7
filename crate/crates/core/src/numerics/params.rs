use std::collections::HashMap;

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{MmrlError, Result};

/// A named tensor with a fixed trainable flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    name: String,
    pub value: Tensor<T>,
    trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Self {
        Self {
            name: name.into(),
            value,
            trainable,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

/// Gradients or values keyed by parameter name.
pub type NamedTensors<T> = Vec<(String, Tensor<T>)>;

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, param: Parameter<T>) -> Result<()> {
        if self.index.contains_key(param.name()) {
            return Err(MmrlError::Config(format!(
                "duplicate parameter name `{}`",
                param.name()
            )));
        }
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| MmrlError::UnknownParameter(name.to_string()))
    }

    /// Replaces the value of a parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| MmrlError::UnknownParameter(name.to_string()))?;
        if self.params[i].value.shape() != value.shape() {
            return Err(MmrlError::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.params[i].value.shape(),
                value.shape()
            )));
        }
        self.params[i].value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| MmrlError::UnknownParameter(name.to_string()))?;
        Ok(&mut self.params[i].value)
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter().filter(|p| p.trainable)
    }

    pub fn frozen(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter().filter(|p| !p.trainable)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable().map(|p| p.name.clone()).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Binds parameters onto a graph as leaves, created lazily on first use.
pub struct Binder<'p, T: Scalar> {
    params: &'p ParameterSet<T>,
    bound: HashMap<String, Var>,
}

impl<'p, T: Scalar> Binder<'p, T> {
    pub fn new(params: &'p ParameterSet<T>) -> Self {
        Self {
            params,
            bound: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParameterSet<T> {
        self.params
    }

    pub fn var(&mut self, graph: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self
            .params
            .get(name)
            .ok_or_else(|| MmrlError::UnknownParameter(name.to_string()))?;
        let v = graph.leaf(p.value.clone(), p.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every trainable parameter; unused ones are zero.
    pub fn collect(&self, grads: &Gradients<T>) -> NamedTensors<T> {
        self.params
            .trainable()
            .map(|p| {
                let g = self
                    .bound
                    .get(p.name())
                    .and_then(|&v| grads.get(v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                (p.name().to_string(), g)
            })
            .collect()
    }
}
