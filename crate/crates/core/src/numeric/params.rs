use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::scalar::Scalar;

/// Named tensors in deterministic insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorStore<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> TensorStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::contract(format!("duplicate tensor path '{path}'")));
        }
        let (idx, _) = self.entries.insert_full(path, tensor);
        Ok(idx)
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(path)
            .ok_or_else(|| Error::contract(format!("no tensor at '{path}'")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(path)
            .ok_or_else(|| Error::contract(format!("no tensor at '{path}'")))
    }

    pub fn index_of(&self, path: &str) -> Option<usize> {
        self.entries.get_index_of(path)
    }

    pub fn by_index(&self, idx: usize) -> (&str, &Tensor<T>) {
        let (k, v) = self.entries.get_index(idx).expect("index in range");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, idx: usize) -> (&str, &mut Tensor<T>) {
        let (k, v) = self.entries.get_index_mut(idx).expect("index in range");
        (k.as_str(), v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.ensure_grad();
            t.zero_grad();
        }
    }

    pub fn cast<U: Scalar>(&self) -> TensorStore<U> {
        TensorStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Learnable parameters, addressed by dotted path (`rgb.stage0.conv`).
pub type ParamRegistry<T> = TensorStore<T>;

/// Non-learnable state such as batch-norm running statistics.
pub type BufferStore<T> = TensorStore<T>;
