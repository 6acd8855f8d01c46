//! Named parameter storage and its binding onto a tape.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Ordered map of parameter name to value. Order is insertion order and is
/// what the optimizer and checkpoint use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.values_mut().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Overwrite one parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim("ParamStore::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// Register every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let mut vars = IndexMap::with_capacity(self.params.len());
        for (name, value) in &self.params {
            vars.insert(name.clone(), tape.param(value.clone())?);
        }
        Ok(Bound { vars })
    }

    /// Register every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Bound> {
        let mut vars = IndexMap::with_capacity(self.params.len());
        for (name, value) in &self.params {
            vars.insert(name.clone(), tape.constant(value.clone())?);
        }
        Ok(Bound { vars })
    }
}

/// Parameters registered on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Build a binding from explicit vars, e.g. inputs of a gradient check.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().map(|(n, v)| (n.into(), v)).collect(),
        }
    }

    /// Panics on an unknown name: parameter names are fixed at model
    /// construction, so a miss is a programming error.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} is not bound"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients in store order; unreached parameters get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars
            .values()
            .map(|&v| tape.grad_tensor(v).into_data())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_preserves_order_and_collects_grads() {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::vector(vec![1.0, 2.0]));
        store.insert("a", Tensor::vector(vec![3.0]));
        assert_eq!(store.names().collect::<Vec<_>>(), ["b", "a"]);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let s = tape.sum(bound.var("b")).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(bound.grads(&tape), vec![vec![1.0, 1.0], vec![0.0]]);
    }

    #[test]
    fn set_checks_shape() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2, 2]));
        assert!(store.set("w", Tensor::zeros(&[3])).is_err());
        assert!(store.set("missing", Tensor::zeros(&[3])).is_err());
    }
}
