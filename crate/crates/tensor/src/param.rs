use std::collections::{BTreeMap, HashMap};

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<F> {
    /// Path-like name, e.g. `decoder.sgm.0.conv.weight`.
    pub name: String,
    pub tensor: Tensor<F>,
    pub grad: Option<Tensor<F>>,
    /// Running statistics and other buffers are stored as non-trainable
    /// parameters so that they travel with checkpoints.
    pub trainable: bool,
}

/// Owns every parameter and buffer of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            grad: None,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].tensor
    }

    pub fn id_of(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[F]) {
        let p = &mut self.params[id.0];
        let shape = p.tensor.shape().to_vec();
        let g = p.grad.get_or_insert_with(|| Tensor::zeros(&shape));
        for (dst, &src) in g.data_mut().iter_mut().zip(grad) {
            *dst += src;
        }
    }

    /// Total element count of trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Trainable element counts grouped by the first `depth` name components.
    pub fn breakdown(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for p in self.params.iter().filter(|p| p.trainable) {
            let key = p.name.split('.').take(depth).collect::<Vec<_>>().join(".");
            *out.entry(key).or_insert(0) += p.tensor.numel();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::<f32>::new();
        store.add("a.w", Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(
            store.add("a.w", Tensor::zeros(&[2]), true),
            Err(TensorError::DuplicateParam(_))
        ));
        store.add("a.running_mean", Tensor::zeros(&[5]), false).unwrap();
        assert_eq!(store.num_trainable(), 2);
        assert_eq!(store.breakdown(1)["a"], 2);
    }
}
