//! Named parameter tensors, their graph bindings and gradients.

use std::cell::RefCell;

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::scalar::Real;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Matrix<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, m: Matrix<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(m);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform weights in `[-scale, scale]`.
    pub fn add_uniform(&mut self, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> ParamId {
        let m = Matrix::from_fn(rows, cols, |_, _| T::from_f64_lossy(rng.random_range(-scale..=scale)));
        self.add(name, m)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros(rows, cols))
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Flat view `(tensor, offset)` of scalar `k` across all tensors.
    pub fn locate(&self, mut k: usize) -> (ParamId, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if k < t.len() {
                return (ParamId(i), k);
            }
            k -= t.len();
        }
        panic!("scalar index out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::all_finite)
    }
}

/// Lazily binds parameters of one store into a graph as leaves.
pub struct Binder<'p, T: Real> {
    store: &'p ParamStore<T>,
    vars: RefCell<Vec<Option<Var>>>,
}

impl<'p, T: Real> Binder<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self { store, vars: RefCell::new(vec![None; store.len()]) }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn var(&self, g: &Graph<'p, T>, id: ParamId) -> Var {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| g.param(self.store.get(id)))
    }

    /// Gradients of every bound parameter; unbound ones are absent.
    pub fn grads(&self, grads: &mut Gradients<T>) -> Grads<T> {
        let vars = self.vars.borrow();
        Grads { tensors: vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect() }
    }
}

/// Per-parameter gradient, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    tensors: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self { tensors: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.tensors[id.0].as_ref()
    }

    /// Scalar gradient at flat offset, zero when absent.
    pub fn at(&self, id: ParamId, offset: usize) -> T {
        self.tensors[id.0].as_ref().map_or(T::zero(), |m| m.as_slice()[offset])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix<T>)> {
        self.tensors.iter().enumerate().filter_map(|(i, m)| m.as_ref().map(|m| (ParamId(i), m)))
    }

    pub fn add_scaled(&mut self, other: &Grads<T>, s: T) {
        for (slot, o) in self.tensors.iter_mut().zip(&other.tensors) {
            if let Some(o) = o {
                let m = slot.get_or_insert_with(|| Matrix::zeros(o.rows(), o.cols()));
                for (a, &b) in m.as_mut_slice().iter_mut().zip(o.as_slice()) {
                    *a += s * b;
                }
            }
        }
    }

    /// Zeroes out gradients for parameters not selected by `keep`.
    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        for (i, slot) in self.tensors.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *slot = None;
            }
        }
    }

    pub fn global_norm(&self) -> T {
        self.tensors.iter().flatten().map(Matrix::frobenius_sq).sum::<T>().sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for m in self.tensors.iter_mut().flatten() {
            m.scale_assign(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(Matrix::all_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binder_reuses_leaf_and_collects_gradients() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Matrix::from_rows(&[vec![2.0, 3.0]]));
        let b = store.add("b", Matrix::from_rows(&[vec![1.0]]));
        let g = Graph::new();
        let bind = Binder::new(&store);
        let v1 = bind.var(&g, a);
        let v2 = bind.var(&g, a);
        assert_eq!(v1, v2);
        let sq = g.mul(v1, v2);
        let s = g.sum(sq);
        let mut raw = g.backward(s);
        let grads = bind.grads(&mut raw);
        assert_eq!(grads.get(a).unwrap().as_slice(), &[4.0, 6.0]);
        assert!(grads.get(b).is_none());
        assert_eq!(grads.global_norm(), (16.0f64 + 36.0).sqrt());
        assert_eq!(store.locate(2), (b, 0));
    }
}
