//! Named parameter storage and per-forward binding onto a [`Graph`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Insertion order is stable and is the
/// order used by checkpoints and optimizers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        if self.tensors[i].shape() != t.shape() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                lhs: self.tensors[i].shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        self.tensors[i] = t.with_requires_grad(true);
        Ok(())
    }
}

/// A graph plus lazily created leaves for the parameters a forward pass
/// touches. Parameters never touched get no leaf and therefore no gradient.
pub struct Session<'s> {
    pub g: Graph,
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    track: bool,
}

impl<'s> Session<'s> {
    /// Session whose parameter leaves record gradients.
    pub fn train(store: &'s ParamStore) -> Self {
        Self::with_tracking(store, true)
    }

    /// Session for inference; parameters enter the graph as constants.
    pub fn eval(store: &'s ParamStore) -> Self {
        Self::with_tracking(store, false)
    }

    fn with_tracking(store: &'s ParamStore, track: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            vars: vec![None; store.len()],
            track,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = if self.track {
            self.g.param(t)
        } else {
            self.g.constant(t.clone())
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Whether `id` was used by the recorded computation.
    pub fn touched(&self, id: ParamId) -> bool {
        self.vars[id.0].is_some()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    /// Runs the reverse sweep and returns per-parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let grads = self.g.backward(loss)?;
        Ok(ParamGrads::collect(&grads, &self.vars))
    }
}

/// Gradients keyed by parameter; untouched parameters have `None`.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    fn collect(grads: &Gradients, vars: &[Option<Var>]) -> Self {
        Self {
            grads: vars
                .iter()
                .map(|v| v.and_then(|v| grads.wrt(v).map(<[f64]>::to_vec)))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds every gradient into the matching tensor's gradient buffer.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (t, g) in store.tensors.iter_mut().zip(&self.grads) {
            if let Some(g) = g {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untouched_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[2], 2.0));
        let b = store.add("b", Tensor::full(&[2], 5.0));
        let mut s = Session::train(&store);
        let va = s.p(a);
        let sq = s.g.mul(va, va).unwrap();
        let loss = s.g.sum(sq);
        let grads = s.backward(loss).unwrap();
        assert!(s.touched(a) && !s.touched(b));
        assert_eq!(grads.get(a).unwrap(), &[4.0, 4.0]);
        assert!(grads.get(b).is_none());
        grads.accumulate_into(&mut store).unwrap();
        assert!(store.get(b).grad().is_none());
        assert_eq!(store.get(a).grad().unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn set_keeps_shape() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2, 2]));
        assert!(store.set("w", Tensor::zeros(&[4])).is_err());
        assert!(store.set("nope", Tensor::zeros(&[2, 2])).is_err());
        store.set("w", Tensor::identity(2)).unwrap();
        assert_eq!(store.get(store.id("w").unwrap()).data(), &[1., 0., 0., 1.]);
    }
}
