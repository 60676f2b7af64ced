use std::collections::HashMap;

use super::{Element, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors with gradient accumulators.
///
/// Insertion order is preserved; it is the manifest order used by
/// checkpoints and parameter counts.
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    grads: Vec<Vec<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Element> Default for ParamStore<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<F: Element> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Invalid {
                op: "param",
                msg: format!("duplicate parameter name {name}"),
            });
        }
        let id = ParamId(self.values.len());
        self.grads.push(vec![F::zero(); value.numel()]);
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|id| &self.values[id.0])
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[F] {
        &self.grads[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = F::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[F]) {
        for (acc, &g) in self.grads[id.0].iter_mut().zip(grad) {
            *acc += g;
        }
    }

    /// Splits into value and gradient views for optimizer updates.
    pub fn values_and_grads_mut(&mut self) -> impl Iterator<Item = (&mut Tensor<F>, &[F])> {
        self.values.iter_mut().zip(self.grads.iter().map(Vec::as_slice))
    }

    pub fn cast<G: Element>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(|g| vec![G::zero(); g.len()]).collect(),
            index: self.index.clone(),
        }
    }
}
