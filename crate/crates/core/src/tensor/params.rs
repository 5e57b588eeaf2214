use std::collections::BTreeMap;

use super::{Gradients, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
struct Param<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
}

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    /// Registers a tensor. Names must be unique.
    ///
    /// # Panics
    /// On a duplicate name, which indicates two layers sharing a prefix.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        let previous = self
            .params
            .insert(name.clone(), Param { value, grad: None });
        assert!(previous.is_none(), "duplicate parameter name {name}");
    }

    pub fn replace(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| missing(name))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {name}: shape {:?} cannot be replaced by {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Adds every tensor of `other`; names must not collide.
    pub fn extend(&mut self, other: ParamStore<T>) {
        for (name, p) in other.params {
            self.insert(name, p.value);
        }
    }

    /// Subset of tensors whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, value) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(name, value.clone());
        }
        out
    }

    /// Trainable leaves on `graph`, one per tensor.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> BoundParams<'g, T> {
        self.bind_with(graph, true)
    }

    /// Frozen leaves on `graph`: values participate, gradients never flow.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph<T>) -> BoundParams<'g, T> {
        self.bind_with(graph, false)
    }

    fn bind_with<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> BoundParams<'g, T> {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let v = if trainable {
                    graph.param(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Adds the gradients of every bound tensor into its accumulator. Tensors
    /// that the loss does not reach receive zeros.
    pub fn accumulate_grads(&mut self, bound: &BoundParams<'_, T>, grads: &Gradients<T>) {
        for (name, var) in &bound.vars {
            let Some(p) = self.params.get_mut(name) else {
                continue;
            };
            let g = grads.wrt(*var);
            match &mut p.grad {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => p.grad = Some(g),
            }
        }
    }

    pub(crate) fn take_grad(&mut self, name: &str) -> Option<Tensor<T>> {
        self.params.get_mut(name).and_then(|p| p.grad.take())
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, value) in self.iter() {
            out.insert(name, value.cast());
        }
        out
    }

    /// CRC-32 over names, shapes and little-endian values.
    pub fn checksum(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        let mut buf = Vec::new();
        for (name, value) in self.iter() {
            hasher.update(name.as_bytes());
            for &e in value.shape() {
                hasher.update(&(e as u64).to_le_bytes());
            }
            buf.clear();
            T::to_le_bytes_vec(value.data(), &mut buf);
            hasher.update(&buf);
        }
        hasher.finalize()
    }
}

fn missing(name: &str) -> Error {
    Error::Config(format!("no parameter named {name}"))
}

/// Graph leaves for every tensor in a [`ParamStore`].
pub struct BoundParams<'g, T: Real> {
    vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Real> BoundParams<'g, T> {
    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars.get(name).copied().ok_or_else(|| missing(name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'g, T>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Union with another binding on the same graph.
    pub fn merged(mut self, other: BoundParams<'g, T>) -> Self {
        self.vars.extend(other.vars);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_is_lexicographic() {
        let mut s = ParamStore::<f32>::new();
        s.insert("b", Tensor::zeros([1]));
        s.insert("a.z", Tensor::zeros([1]));
        s.insert("a.b", Tensor::zeros([1]));
        let names: Vec<_> = s.names().collect();
        assert_eq!(names, ["a.b", "a.z", "b"]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros([1]));
        s.insert("w", Tensor::zeros([1]));
    }

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros([2]));
        let before = s.checksum();
        s.get_mut("w").unwrap().data_mut()[1] = 1.0;
        assert_ne!(before, s.checksum());
    }

    #[test]
    fn frozen_binding_yields_no_gradients() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::full([2], 2.0));
        let g = Graph::new();
        let bound = s.bind_frozen(&g);
        let loss = bound.get("w").unwrap().square().sum();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(bound.get("w").unwrap()).is_none());
    }
}
