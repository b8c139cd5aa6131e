use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Index of a tensor in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
///
/// Models only keep [`ParamId`]s; the values live here so the same model
/// structure can be evaluated at `f32` for training and `f64` for checking.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Matrix initialised uniform in `±1/√fan_in`.
    pub fn add_matrix<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: [usize; 2],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.add(name, Tensor::uniform(shape, -bound, bound, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places every tensor on `g` as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Places every tensor on `g` as a constant (inference).
    pub fn bind_constant(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Replaces values with `other`'s, requiring identical names and shapes.
    pub fn load_from(&mut self, other: ParamSet<T>) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Config(format!(
                "parameter names differ: expected {} tensors, found {}",
                self.names.len(),
                other.names.len()
            )));
        }
        for (name, (mine, theirs)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if mine.shape() != theirs.shape() {
                return Err(Error::Config(format!(
                    "parameter `{name}`: shape {:?} vs {:?}",
                    mine.shape(),
                    theirs.shape()
                )));
            }
        }
        self.tensors = other.tensors;
        Ok(())
    }
}

/// Graph handles for a bound [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(pub Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
