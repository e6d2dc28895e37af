//! Named parameter storage. Tensors are keyed by dotted names so freeze
//! policies and checkpoints can address them by prefix, and iteration is
//! always name-sorted for determinism.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;

use crate::graph::{Graph, Gradients, Real, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real> {
    map: BTreeMap<String, Array2<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) {
        let name = name.into();
        debug_assert!(!self.map.contains_key(&name), "duplicate param {name}");
        self.map.insert(name, value);
    }

    pub fn get(&self, name: &str) -> &Array2<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Array2<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<T> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Merge another store in; duplicate names are a programming error.
    pub fn absorb(&mut self, other: ParamStore<T>) {
        for (k, v) in other.map {
            debug_assert!(!self.map.contains_key(&k), "duplicate param {k}");
            self.map.insert(k, v);
        }
    }

    pub fn map_values<U: Real>(&self, f: impl Fn(T) -> U) -> ParamStore<U> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(&f)))
                .collect(),
        }
    }
}

pub fn normal_init<T: Real>(rng: &mut ChaCha12Rng, rows: usize, cols: usize, std: f64) -> Array2<T> {
    let s = T::from_f64(std);
    Array2::from_shape_fn((rows, cols), |_| T::standard_normal(rng) * s)
}

pub fn zeros<T: Real>(rows: usize, cols: usize) -> Array2<T> {
    Array2::zeros((rows, cols))
}

pub fn ones<T: Real>(rows: usize, cols: usize) -> Array2<T> {
    Array2::from_elem((rows, cols), T::one())
}

/// Tracks which graph node each named parameter was bound to in a forward
/// pass, so gradients can be routed back by name. Frozen parameters enter
/// the graph as constants and never receive gradients.
pub struct Binder {
    bound: Vec<(String, Var)>,
    trainable: Option<Vec<String>>,
}

impl Binder {
    /// All parameters trainable.
    pub fn all() -> Self {
        Binder { bound: Vec::new(), trainable: None }
    }

    /// Only parameters whose name starts with one of the prefixes train.
    pub fn trainable_prefixes(prefixes: &[&str]) -> Self {
        Binder {
            bound: Vec::new(),
            trainable: Some(prefixes.iter().map(|p| p.to_string()).collect()),
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        match &self.trainable {
            None => true,
            Some(pre) => pre.iter().any(|p| name.starts_with(p.as_str())),
        }
    }

    pub fn var<T: Real>(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Var {
        if let Some((_, v)) = self.bound.iter().find(|(n, _)| n == name) {
            return *v;
        }
        let value = store.get(name).clone();
        let v = if self.is_trainable(name) {
            g.param(value)
        } else {
            g.input(value)
        };
        self.bound.push((name.to_string(), v));
        v
    }

    /// Collect (name, gradient) pairs after a backward pass, name-sorted.
    pub fn grads<T: Real>(&self, grads: &Gradients<T>) -> Vec<(String, Array2<T>)> {
        let mut out: Vec<(String, Array2<T>)> = self
            .bound
            .iter()
            .filter_map(|(n, v)| grads.get(*v).map(|g| (n.clone(), g.clone())))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn binder_routes_grads_by_name_and_respects_freeze() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("a.w", arr2(&[[2.0]]));
        store.insert("b.w", arr2(&[[3.0]]));

        let mut g = Graph::new();
        let mut bind = Binder::trainable_prefixes(&["a."]);
        let a = bind.var(&mut g, &store, "a.w");
        let b = bind.var(&mut g, &store, "b.w");
        let prod = g.mul(a, b);
        let loss = g.mean_all(prod);
        let grads = g.backward(loss);
        let named = bind.grads(&grads);

        assert_eq!(named.len(), 1);
        assert_eq!(named[0].0, "a.w");
        assert_eq!(named[0].1[[0, 0]], 3.0);
    }

    #[test]
    fn binder_reuses_node_for_repeated_name() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", arr2(&[[1.5]]));
        let mut g = Graph::new();
        let mut bind = Binder::all();
        let v1 = bind.var(&mut g, &store, "w");
        let v2 = bind.var(&mut g, &store, "w");
        assert_eq!(v1, v2);
    }
}
