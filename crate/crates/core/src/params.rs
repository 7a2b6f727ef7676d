//! Named parameter collections and their binding onto a tape.

use std::collections::HashMap;

use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Ordered, named tensors. Order is the creation order and is what
/// optimizers and checkpoints iterate over.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<S: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor as a leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<S>, requires_grad: bool) -> Result<Bound<'a, S>> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { set: self, vars })
    }

    /// Pairs already-recorded vars (one per tensor, in order) with names.
    pub fn bound_from<'a>(&'a self, vars: &[Var]) -> Result<Bound<'a, S>> {
        if vars.len() != self.len() {
            return Err(Error::Shape(format!("{} vars for {} parameters", vars.len(), self.len())));
        }
        Ok(Bound { set: self, vars: vars.to_vec() })
    }

    /// SHA-256 over names, shapes and value bits, as lowercase hex.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A [`ParamSet`] recorded on a tape.
pub struct Bound<'a, S: Scalar> {
    set: &'a ParamSet<S>,
    vars: Vec<Var>,
}

impl<S: Scalar> Bound<'_, S> {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .set
            .position(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Deterministic Gaussian tensor `N(0, std²)` whose stream is keyed by
/// `(seed, name)`, independent of creation order.
pub fn gaussian(seed: u64, name: &str, shape: Vec<usize>, std: f64) -> Tensor<f32> {
    let mut r = rng::named_stream(seed, name);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            (z * std) as f32
        })
        .collect();
    Tensor::new(shape, data).expect("shape/product agree")
}
