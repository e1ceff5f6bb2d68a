//! Named parameter storage shared by models and optimizers.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{Elem, Graph, Tensor, Var};

/// Ordered collection of uniquely named parameter tensors.
///
/// Insertion order is the canonical order used for graph injection,
/// optimizer state, and checkpoint layout, so runs are reproducible.
pub struct ParamStore<E: Elem> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    index: HashMap<String, usize>,
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    /// Register a parameter under a unique path such as `encoder.conv1.weight`.
    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<E>) -> Result<()> {
        let path = path.into();
        if self.index.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path {path}")));
        }
        self.index.insert(path.clone(), self.tensors.len());
        self.names.push(path);
        self.tensors.push(tensor);
        Ok(())
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

    pub fn get(&self, path: &str) -> Option<&Tensor<E>> {
        self.index.get(path).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<E>> {
        self.index.get(path).copied().map(move |i| &mut self.tensors[i])
    }

    pub fn at(&self, i: usize) -> (&str, &Tensor<E>) {
        (&self.names[i], &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<E> {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Insert every parameter into a graph as a tracked leaf, in store order.
    pub fn inject(&self, g: &mut Graph<E>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), true)).collect()
    }

    /// Collect gradients for the injected leaves, zero-filled where absent.
    pub fn collect_grads(&self, g: &Graph<E>, vars: &[Var]) -> Vec<Vec<E>> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(&v, t)| g.grad(v).map(<[E]>::to_vec).unwrap_or_else(|| vec![E::zero(); t.numel()]))
            .collect()
    }

    /// Copy into another element precision.
    pub fn cast<T: Elem>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, tensor) in self.iter() {
            out.insert(name, tensor.cast()).expect("paths stay unique under cast");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_paths() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a.weight", Tensor::zeros(vec![2])).unwrap();
        assert!(store.insert("a.weight", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn preserves_insertion_order() {
        let mut store = ParamStore::<f32>::new();
        store.insert("z", Tensor::zeros(vec![1])).unwrap();
        store.insert("a", Tensor::zeros(vec![1])).unwrap();
        assert_eq!(store.names(), &["z".to_string(), "a".to_string()]);
    }
}
