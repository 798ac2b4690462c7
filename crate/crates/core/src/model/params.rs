//! Named, shape-tagged trainable weights with paired gradient slots.

use std::collections::HashMap;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2};

use crate::error::{Error, Result};

/// Handle into a [`ParameterStore`]; stable for the lifetime of the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    meta: Vec<ParamMeta>,
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

/// Read-only view of parameter values, borrowed alongside [`GradSlots`].
#[derive(Clone, Copy)]
pub struct Weights<'a> {
    meta: &'a [ParamMeta],
    values: &'a [Vec<f64>],
}

/// Mutable view of the gradient slots.
pub struct GradSlots<'a> {
    meta: &'a [ParamMeta],
    grads: &'a mut [Vec<f64>],
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a zero-valued parameter.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Parameter(format!("duplicate parameter name {name}")));
        }
        let n = shape.iter().product();
        let id = self.meta.len();
        self.index.insert(name.clone(), id);
        self.meta.push(ParamMeta {
            name,
            shape: shape.to_vec(),
        });
        self.values.push(vec![0.0; n]);
        self.grads.push(vec![0.0; n]);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.meta.len()).map(ParamId)
    }

    pub fn meta(&self, id: ParamId) -> &ParamMeta {
        &self.meta[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.meta[id.0].name
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    /// Replaces the values of a parameter, checking the length.
    pub fn set_values(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let slot = &mut self.values[id.0];
        if slot.len() != values.len() {
            return Err(Error::Shape(format!(
                "{}: expected {} values, got {}",
                self.meta[id.0].name,
                slot.len(),
                values.len()
            )));
        }
        slot.copy_from_slice(values);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn weights(&self) -> Weights<'_> {
        Weights {
            meta: &self.meta,
            values: &self.values,
        }
    }

    pub fn split(&mut self) -> (Weights<'_>, GradSlots<'_>) {
        (
            Weights {
                meta: &self.meta,
                values: &self.values,
            },
            GradSlots {
                meta: &self.meta,
                grads: &mut self.grads,
            },
        )
    }

    /// Values and gradients together, for the optimizer.
    pub fn values_and_grads_mut(&mut self) -> impl Iterator<Item = (&ParamMeta, &mut Vec<f64>, &Vec<f64>)> {
        self.meta
            .iter()
            .zip(self.values.iter_mut())
            .zip(self.grads.iter())
            .map(|((m, v), g)| (m, v, g))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

impl<'a> Weights<'a> {
    pub fn mat(&self, id: ParamId) -> ArrayView2<'a, f64> {
        let shape = &self.meta[id.0].shape;
        ArrayView2::from_shape((shape[0], shape[1]), &self.values[id.0])
            .expect("parameter registered as a matrix")
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'a, f64> {
        ArrayView1::from(&self.values[id.0][..])
    }

    pub fn scalar(&self, id: ParamId) -> f64 {
        self.values[id.0][0]
    }
}

impl GradSlots<'_> {
    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let shape = &self.meta[id.0].shape;
        ArrayViewMut2::from_shape((shape[0], shape[1]), &mut self.grads[id.0])
            .expect("parameter registered as a matrix")
            .into_dimensionality::<Ix2>()
            .unwrap()
    }

    pub fn vec_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.grads[id.0][..])
            .into_dimensionality::<Ix1>()
            .unwrap()
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParameterStore::new();
        s.add("a", &[2, 3]).unwrap();
        assert!(s.add("a", &[1]).is_err());
        assert_eq!(s.num_scalars(), 6);
        assert_eq!(s.grad(s.id("a").unwrap()).len(), 6);
    }

    #[test]
    fn matrix_views_are_row_major() {
        let mut s = ParameterStore::new();
        let id = s.add("w", &[2, 3]).unwrap();
        s.set_values(id, &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(s.weights().mat(id)[[1, 0]], 4.0);
        assert!(s.set_values(id, &[1.0]).is_err());
        let (_, mut g) = s.split();
        g.mat_mut(id)[[0, 2]] = 7.0;
        assert_eq!(s.grad(id)[2], 7.0);
    }
}
