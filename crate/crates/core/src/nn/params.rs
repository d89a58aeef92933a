use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};

/// Position of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter matrices in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("initial value of `{name}`")));
        }
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    /// Uniform in `±sqrt(1 / fan_in)` with `fan_in` the row count.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (1.0 / shape.0.max(1) as f64).sqrt();
        let value = Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: (usize, usize)) -> Result<ParamId> {
        self.add(name, Mat::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    /// Registers every parameter as a tape leaf; the returned slice is
    /// indexed by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }
}

/// Gradients congruent with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore {
    pub values: Vec<Mat>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            values: store.values().iter().map(|v| Mat::zeros(v.dim())).collect(),
        }
    }

    /// Collects the adjoints of bound parameters from a backward pass.
    pub fn from_adjoints(store: &ParamStore, bound: &[Var], adjoints: &mut [Option<Mat>]) -> Self {
        let values = store
            .values()
            .iter()
            .zip(bound)
            .map(|(v, var)| {
                adjoints
                    .get_mut(var.index())
                    .and_then(Option::take)
                    .unwrap_or_else(|| Mat::zeros(v.dim()))
            })
            .collect();
        Self { values }
    }

    pub fn check_congruent(&self, store: &ParamStore) -> Result<()> {
        if self.values.len() != store.len()
            || self
                .values
                .iter()
                .zip(store.values())
                .any(|(g, p)| g.dim() != p.dim())
        {
            return Err(Error::Shape("gradient store does not match parameters".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }
}
