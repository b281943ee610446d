//! Named learnable parameters and the plain SGD update.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    /// Row of an embedding table whose gradient is always discarded (PAD).
    pub frozen_row: Option<usize>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        ParamGroup {
            name: name.into(),
            value,
            grad: None,
            frozen_row: None,
        }
    }
}

/// Gradient of one parameter produced by a backward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad {
    Dense(Tensor),
    /// Row-sparse gradient of an embedding table: row index to row gradient.
    Rows(BTreeMap<usize, Vec<f64>>),
}

impl ParamGrad {
    pub fn to_dense(&self, shape: &[usize]) -> Tensor {
        match self {
            ParamGrad::Dense(t) => t.clone(),
            ParamGrad::Rows(rows) => {
                let mut t = Tensor::zeros(shape);
                let cols = *shape.last().unwrap();
                for (&r, g) in rows {
                    for (dst, src) in t.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                        *dst += src;
                    }
                }
                t
            }
        }
    }
}

/// Ordered collection of parameters; ids are positions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub const fn new() -> Self {
        ParamStore { groups: Vec::new() }
    }

    pub fn add(&mut self, group: ParamGroup) -> ParamId {
        self.groups.push(group);
        ParamId(self.groups.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamGroup {
        &self.groups[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamGroup {
        &mut self.groups[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.groups[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.groups.iter().position(|g| g.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.groups.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamGroup> {
        self.groups.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamGroup> {
        self.groups.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.groups.iter().map(|g| g.value.len()).sum()
    }

    /// Sets every gradient to zeros of the parameter's shape.
    pub fn zero_grad(&mut self) {
        for g in &mut self.groups {
            match &mut g.grad {
                Some(t) => t.data_mut().fill(0.0),
                None => g.grad = Some(Tensor::zeros(g.value.shape())),
            }
        }
    }

    pub fn clear_grad(&mut self) {
        for g in &mut self.groups {
            g.grad = None;
        }
    }

    /// Adds `scale * grad` into the stored gradient (allocating it if absent).
    pub fn accumulate(&mut self, id: ParamId, grad: &ParamGrad, scale: f64) {
        let group = &mut self.groups[id.0];
        let shape = group.value.shape().to_vec();
        let buf = group.grad.get_or_insert_with(|| Tensor::zeros(&shape));
        let cols = *shape.last().unwrap();
        match grad {
            ParamGrad::Dense(t) => {
                for (dst, src) in buf.data_mut().iter_mut().zip(t.data()) {
                    *dst += scale * src;
                }
            }
            ParamGrad::Rows(rows) => {
                for (&r, g) in rows {
                    if group.frozen_row == Some(r) {
                        continue;
                    }
                    for (dst, src) in buf.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                        *dst += scale * src;
                    }
                }
            }
        }
    }

    /// Euclidean norm over all present gradients.
    pub fn grad_norm(&self) -> f64 {
        self.groups
            .iter()
            .filter_map(|g| g.grad.as_ref())
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let factor = max_norm / norm;
            for g in self.groups.iter_mut().filter_map(|g| g.grad.as_mut()) {
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
        norm
    }
}

/// `value <- value - lr * grad` for every parameter, then clears gradients.
///
/// Fails without touching any value if a gradient is missing.
pub fn sgd_step(params: &mut ParamStore, lr: f64) -> Result<()> {
    if let Some(g) = params.iter().find(|g| g.grad.is_none()) {
        return Err(Error::MissingGrad(g.name.clone()));
    }
    for group in params.iter_mut() {
        let grad = group.grad.take().unwrap();
        if lr != 0.0 {
            for (v, g) in group.value.data_mut().iter_mut().zip(grad.data()) {
                *v -= lr * g;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: Option<f64>) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.add(ParamGroup::new("w", Tensor::scalar(value)));
        store.get_mut(id).grad = grad.map(Tensor::scalar);
        store
    }

    #[test]
    fn sgd_arithmetic() {
        let mut s = single(1.0, Some(0.5));
        sgd_step(&mut s, 0.1).unwrap();
        assert!((s.value(ParamId(0)).item() - 0.95).abs() < 1e-15);
        assert!(s.get(ParamId(0)).grad.is_none());
    }

    #[test]
    fn sgd_fixed_points() {
        let mut s = single(1.0, Some(0.0));
        sgd_step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(ParamId(0)).item(), 1.0);

        let mut s = single(1.0, Some(3.0));
        sgd_step(&mut s, 0.0).unwrap();
        assert_eq!(s.value(ParamId(0)).item(), 1.0);
    }

    #[test]
    fn sgd_missing_grad_names_parameter() {
        let mut s = single(1.0, None);
        match sgd_step(&mut s, 0.1) {
            Err(Error::MissingGrad(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn row_grads_skip_frozen_row() {
        let mut store = ParamStore::new();
        let mut g = ParamGroup::new("emb", Tensor::zeros(&[3, 2]));
        g.frozen_row = Some(0);
        let id = store.add(g);
        let rows = BTreeMap::from([(0, vec![1.0, 1.0]), (2, vec![2.0, 3.0])]);
        store.accumulate(id, &ParamGrad::Rows(rows), 1.0);
        assert_eq!(
            store.get(id).grad.as_ref().unwrap().data(),
            &[0.0, 0.0, 0.0, 0.0, 2.0, 3.0]
        );
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut s = single(0.0, Some(4.0));
        let before = s.clip_grad_norm(2.0);
        assert_eq!(before, 4.0);
        assert!((s.grad_norm() - 2.0).abs() < 1e-12);
    }
}
