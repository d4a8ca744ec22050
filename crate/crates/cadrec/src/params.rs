//! Named parameter storage with accumulated gradients.
//!
//! Paths are dotted strings ("decoder.block0.self_attn.wq"). Storage is a
//! sorted map so iteration order, and therefore optimizer update order and
//! checkpoint layout, never depends on insertion order.

use std::collections::BTreeMap;

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone)]
struct Entry {
    value: Tensor,
    grad: Tensor,
}

#[derive(Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, path: &str, value: Tensor) -> Result<()> {
        if path.is_empty() {
            return Err(Error::invalid("params::insert", "empty path"));
        }
        if self.entries.contains_key(path) {
            return Err(Error::Invalid {
                context: "params::insert",
                message: format!("duplicate parameter path {path:?}"),
            });
        }
        value.check_finite("params::insert")?;
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.insert(path.to_string(), Entry { value, grad });
        Ok(())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Invalid {
                context: "params::get",
                message: format!("unknown parameter path {path:?}"),
            })
    }

    /// Replaces a value; the shape must match the registered one.
    pub fn set_value(&mut self, path: &str, value: Tensor) -> Result<()> {
        let entry = self.entries.get_mut(path).ok_or_else(|| Error::Invalid {
            context: "params::set_value",
            message: format!("unknown parameter path {path:?}"),
        })?;
        if entry.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                context: "params::set_value",
                expected: entry.value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        value.check_finite("params::set_value")?;
        entry.value = value;
        Ok(())
    }

    pub fn grad(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::Invalid {
                context: "params::grad",
                message: format!("unknown parameter path {path:?}"),
            })
    }

    pub fn accumulate_grad(&mut self, path: &str, g: &Tensor) -> Result<()> {
        let entry = self.entries.get_mut(path).ok_or_else(|| Error::Invalid {
            context: "params::accumulate_grad",
            message: format!("unknown parameter path {path:?}"),
        })?;
        if entry.grad.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                context: "params::accumulate_grad",
                expected: entry.grad.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        for (a, d) in entry.grad.data_mut().iter_mut().zip(g.data()) {
            *a += d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            for v in entry.grad.data_mut() {
                *v = 0.0;
            }
        }
    }

    /// Sorted (path, value) pairs.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    /// Sorted (path, value, grad) triples with the value mutable, for
    /// optimizer steps.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &Tensor)> {
        self.entries
            .iter_mut()
            .map(|(k, e)| (k.as_str(), &mut e.value, &e.grad))
    }

    pub fn paths(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }
}

impl Graph {
    /// Differentiable leaf holding a copy of the parameter's current value.
    pub fn param(&mut self, store: &ParamStore, path: &str) -> Result<NodeId> {
        let value = store.get(path)?.clone();
        self.param_leaf(path, value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_rejects_duplicates() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::zeros(vec![2])).unwrap();
        assert!(s.insert("a.w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn iteration_is_sorted_regardless_of_insertion_order() {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::zeros(vec![1])).unwrap();
        s.insert("a", Tensor::zeros(vec![1])).unwrap();
        s.insert("a.b", Tensor::zeros(vec![1])).unwrap();
        let paths: Vec<_> = s.iter().map(|(p, _)| p.to_string()).collect();
        assert_eq!(paths, vec!["a", "a.b", "b"]);
    }

    #[test]
    fn grads_accumulate_and_reset() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![2], vec![1., 2.]).unwrap())
            .unwrap();
        let g = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        s.accumulate_grad("w", &g).unwrap();
        s.accumulate_grad("w", &g).unwrap();
        assert_eq!(s.grad("w").unwrap().data(), &[1.0, 1.0]);
        s.zero_grads();
        assert_eq!(s.grad("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn set_value_enforces_shape() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(vec![2, 2])).unwrap();
        assert!(s.set_value("w", Tensor::zeros(vec![4])).is_err());
        assert!(s.set_value("w", Tensor::zeros(vec![2, 2])).is_ok());
    }

    #[test]
    fn graph_param_leaf_routes_grads_back() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![2], vec![3., 4.]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let w = g.param(&s, "w").unwrap();
        let y = g.mul(w, w).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        g.add_param_grads_to(&mut s).unwrap();
        assert_eq!(s.grad("w").unwrap().data(), &[6., 8.]);
    }
}
