use std::collections::BTreeMap;

use super::{ComputeError, Tensor};

/// Index of a parameter inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named parameters with gradient buffers of matching shape.
///
/// Parameters are kept in insertion order; the name index is ordered so
/// iteration by name is stable across runs.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId, ComputeError> {
        if self.index.contains_key(name) {
            return Err(ComputeError::DuplicateParameter(name.to_string()));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, ComputeError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| ComputeError::UnknownParameter(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ComputeError> {
        Ok(self.value(self.id(name)?))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Parameter ids ordered by name.
    pub fn ids_by_name(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.index.values().copied()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            self.grads[id.0].add_assign(g);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Sparse map of parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub(crate) fn add(&mut self, id: ParamId, g: Tensor) {
        match self.entries.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.entries.insert(id, g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    /// Sums another gradient set into this one.
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.entries {
            self.add(id, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(
            s.insert("w", Tensor::zeros(&[1])),
            Err(ComputeError::DuplicateParameter(_))
        ));
    }

    #[test]
    fn grads_match_value_shapes_and_zero() {
        let mut s = ParameterStore::new();
        let id = s.insert("b", Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(s.grad(id).shape(), s.value(id).shape());
        s.grad_mut(id).fill(3.0);
        s.zero_grads();
        assert_eq!(s.grad(id).sum(), 0.0);
    }
}
