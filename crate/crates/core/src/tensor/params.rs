use indexmap::IndexMap;

use crate::error::{shape_err, Error, Result};

use super::{Float, Tensor};

/// One trainable tensor plus its partition flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub tensor: Tensor<F>,
    /// Member of the shared (aggregated) subset.
    pub shared: bool,
    /// Receives decoupled weight decay.
    pub decay: bool,
}

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<F> {
    entries: IndexMap<String, Param<F>>,
}

impl<F: Float> ParamSet<F> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>, decay: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter `{name}`")));
        }
        let tensor = tensor.with_requires_grad(true);
        self.entries.insert(name, Param { tensor, shared: false, decay });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<F>> {
        self.get(name).map(|p| &p.tensor).ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub(crate) fn get_full(&self, name: &str) -> Option<(usize, &Param<F>)> {
        self.entries.get_full(name).map(|(i, _, p)| (i, p))
    }

    pub(crate) fn get_index_mut(&mut self, index: usize) -> Option<&mut Param<F>> {
        self.entries.get_index_mut(index).map(|(_, p)| p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Names and shapes, the structural fingerprint of a model.
    pub fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        self.entries.iter().map(|(k, p)| (k.clone(), p.tensor.shape().to_vec())).collect()
    }

    pub fn shared(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.iter().filter(|(_, p)| p.shared)
    }

    /// Marks exactly the entries selected by `pred` as shared.
    pub fn set_shared_by(&mut self, mut pred: impl FnMut(&str) -> bool) {
        for (name, p) in self.entries.iter_mut() {
            p.shared = pred(name);
        }
    }

    pub fn clear_grads(&mut self) {
        self.entries.values_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// Overwrites the values of `name` from `src` (shapes must agree).
    pub fn assign(&mut self, name: &str, src: &Tensor<F>) -> Result<()> {
        let p = self.entries.get_mut(name).ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))?;
        p.tensor.assign(src)
    }

    /// Copy without gradients.
    pub fn snapshot(&self) -> ParamSet<F> {
        let mut out = self.clone();
        out.clear_grads();
        out
    }

    /// Checks that `other` has identical names and shapes in the same order.
    pub fn check_same_structure(&self, other: &ParamSet<F>) -> Result<()> {
        if self.len() != other.len() {
            return Err(shape_err!("parameter sets hold {} and {} tensors", self.len(), other.len()));
        }
        for ((na, pa), (nb, pb)) in self.iter().zip(other.iter()) {
            if na != nb || pa.tensor.shape() != pb.tensor.shape() {
                return Err(shape_err!(
                    "parameter `{na}` {:?} does not match `{nb}` {:?}",
                    pa.tensor.shape(),
                    pb.tensor.shape()
                ));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|p| p.tensor.is_finite())
    }
}
