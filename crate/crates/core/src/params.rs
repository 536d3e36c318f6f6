//! Named parameter arrays.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

/// Ordered collection of named parameter tensors. Ids are insertion
/// positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Zero-mean Gaussian tensor.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> usize {
        let dist = Normal::new(0.0, std).expect("positive std");
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| T::lit(dist.sample(rng))).collect();
        self.add(name, Tensor::from_vec(shape, data).expect("init shape"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> usize {
        self.add(name, Tensor::full(shape, T::lit(value)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replace values from `other`, which must have identical names and
    /// shapes.
    pub fn assign(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter names differ".into()));
        }
        for (name, (dst, src)) in self.names.iter().zip(self.tensors.iter_mut().zip(&other.tensors)) {
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.clone_from(src);
        }
        Ok(())
    }

    /// Flat view of one coordinate across all tensors, in store order.
    pub fn coordinate(&self, mut flat: usize) -> (usize, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.len() {
                return (i, flat);
            }
            flat -= t.len();
        }
        panic!("coordinate out of range");
    }

    /// Uniformly random flat coordinate.
    pub fn random_coordinate(&self, rng: &mut Rng) -> (usize, usize) {
        self.coordinate(rng.random_range(0..self.numel()))
    }
}
