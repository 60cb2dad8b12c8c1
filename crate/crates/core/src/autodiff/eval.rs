use std::rc::Rc;

use super::{Graph, Op, ParamStore};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Tape-free evaluation: values are plain tensors and nothing is retained
/// after they are dropped.
pub struct Eval<'s, S> {
    store: &'s ParamStore<S>,
}

impl<'s, S: Real> Eval<'s, S> {
    pub fn new(store: &'s ParamStore<S>) -> Self {
        Self { store }
    }
}

impl<S: Real> Graph<S> for Eval<'_, S> {
    type Value = Rc<Tensor<S>>;

    fn store(&self) -> &ParamStore<S> {
        self.store
    }

    fn constant(&mut self, t: Tensor<S>) -> Self::Value {
        Rc::new(t)
    }

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<S> {
        v
    }

    fn apply(&mut self, op: Op<S>, inputs: &[&Self::Value]) -> Result<Self::Value> {
        let refs: Vec<&Tensor<S>> = inputs.iter().map(|v| v.as_ref()).collect();
        Ok(Rc::new(op.forward(self.store, &refs)?))
    }
}
