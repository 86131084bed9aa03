//! Named parameter storage shared by models, optimizers and checkpoints.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    /// He-uniform initialised weight (`fan_in` inputs per output).
    pub fn add_kaiming<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let bound = num_traits::Float::sqrt(6.0 / fan_in.max(1) as f64);
        self.add_uniform(name, shape, bound, rng)
    }

    pub fn add_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound))
            .collect();
        self.add(name, Tensor::from_vec(shape, data).expect("param shape"))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.entries.iter_mut().for_each(|e| e.trainable = trainable);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// `(name, tensor)` pairs in registration order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Overwrite every parameter from a named list. Every stored name must be
    /// present with a matching shape; extra names are ignored.
    pub fn load_named<'a>(&mut self, named: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)> + Clone) -> Result<()> {
        for e in self.entries.iter_mut() {
            let (_, t) = named
                .clone()
                .into_iter()
                .find(|(n, _)| *n == e.name)
                .ok_or_else(|| Error::MissingParameter(e.name.clone()))?;
            if t.shape() != e.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_named",
                    left: e.value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            e.value = t.clone();
        }
        Ok(())
    }

    /// Same parameters in another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}
