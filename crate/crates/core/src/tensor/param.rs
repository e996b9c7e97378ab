use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Registry of named model parameters, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable: true,
        });
        Ok(id)
    }

    /// Registers a parameter drawn from `N(0, std²)`.
    pub fn insert_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidArgument(format!("bad init std {std}: {e}")))?;
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn insert_filled(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: f64,
    ) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        self.insert(name, Tensor::new(shape, vec![value; numel])?)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar values across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// First parameter (in registration order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|p| p.tensor.data().iter().any(|v| !v.is_finite()))
            .map(|p| p.name.as_str())
    }
}
