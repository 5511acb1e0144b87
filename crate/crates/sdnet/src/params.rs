//! Ordered parameter store with hierarchical names.
//!
//! Raw buffers live here between training steps; [`ParamStore::bind`]
//! registers every parameter as a leaf variable on a fresh tape for one
//! forward/backward pass. The name scheme is part of the checkpoint
//! contract.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct ParamTensor<E: Element> {
    pub data: Vec<E>,
    pub shape: Vec<usize>,
}

/// Ordered map from hierarchical parameter names to raw tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<E: Element> {
    entries: Vec<(String, ParamTensor<E>)>,
    index: HashMap<String, usize>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, data: Vec<E>, shape: Vec<usize>) -> Result<()> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("param", format!("{name}: shape {shape:?} vs {} values", data.len())));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, ParamTensor { data, shape }));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<E>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor<E>> {
        self.index.get(name).copied().map(move |i| &mut self.entries[i].1)
    }

    /// Iterate in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamTensor<E>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.data.len()).sum()
    }

    /// Register every parameter as a gradient-tracked leaf on `tape`.
    pub fn bind(&self, tape: &Tape<E>) -> Result<BoundParams<E>> {
        let mut map = HashMap::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            map.insert(name.clone(), tape.var(t.data.clone(), &t.shape)?);
        }
        Ok(BoundParams { map })
    }

    /// Bind as constants for inference/eval: no tape, no gradients.
    pub fn bind_const(&self) -> BoundParams<E> {
        let map = self
            .entries
            .iter()
            .map(|(name, t)| {
                (name.clone(), Tensor::from_vec(t.data.clone(), &t.shape).expect("stored shape"))
            })
            .collect();
        BoundParams { map }
    }

    /// Convert element type (used by f64 gradient-check suites).
    pub fn cast<T: Element>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, t) in &self.entries {
            let data: Vec<T> = t.data.iter().map(|&v| T::from_f64(Element::to_f64(v))).collect();
            out.insert(name.clone(), data, t.shape.clone()).expect("names already unique");
        }
        out
    }
}

/// Parameters bound to one tape (or to constants) for a forward pass.
pub struct BoundParams<E: Element> {
    map: HashMap<String, Tensor<E>>,
}

impl<E: Element> BoundParams<E> {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Tensor<E>)>) -> Self {
        BoundParams { map: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    /// Gradient of one parameter after backward.
    pub fn grad(&self, name: &str) -> Result<Option<Vec<E>>> {
        Ok(self.get(name)?.grad())
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Truncated normal, std 0.02, cut at two standard deviations.
    Weight,
    /// Zeros.
    Bias,
    /// Ones (layer-norm gains).
    Gain,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, kind: ParamKind) -> Self {
        ParamSpec { name: name.into(), shape, kind }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Build a store from specs; fully determined by `seed`.
pub fn init_from_specs<E: Element>(specs: &[ParamSpec], seed: u64) -> ParamStore<E> {
    use rand::SeedableRng;
    use rand_distr::Distribution;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::Normal::new(0.0f64, 0.02).expect("valid std");
    let mut store = ParamStore::new();
    for spec in specs {
        let n = spec.numel();
        let data: Vec<E> = match spec.kind {
            ParamKind::Weight => (0..n)
                .map(|_| loop {
                    let v = normal.sample(&mut rng);
                    if v.abs() <= 0.04 {
                        break E::from_f64(v);
                    }
                })
                .collect(),
            ParamKind::Bias => vec![E::zero(); n],
            ParamKind::Gain => vec![E::one(); n],
        };
        store.insert(spec.name.clone(), data, spec.shape.clone()).expect("specs are unique");
    }
    store
}
