use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    /// Dotted layer path, e.g. `cnn.conv3.weight`.
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered set of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        self.insert_param(Parameter { name: name.into(), tensor, trainable: true })
    }

    pub fn insert_param(&mut self, p: Parameter<T>) -> Result<usize> {
        if self.index.contains_key(&p.name) {
            return Err(NnError::DuplicateParameter(p.name));
        }
        let id = self.params.len();
        self.index.insert(p.name.clone(), id);
        self.params.push(p);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        Ok(&self.params[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        let id = self.id(name)?;
        Ok(&mut self.params[id])
    }

    pub fn by_id(&self, id: usize) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Parameter<T> {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), tensor: p.tensor.cast(), trainable: p.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradients indexed like the [`ParamStore`] they were computed for.
/// `None` means the parameter did not take part in the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub(crate) grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn by_name<'a>(&'a self, store: &ParamStore<T>, name: &str) -> Result<Option<&'a Tensor<T>>> {
        Ok(self.get(store.id(name)?))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
