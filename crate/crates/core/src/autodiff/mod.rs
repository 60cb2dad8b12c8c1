//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Layers are written once against the [`Graph`] trait. [`Eval`] runs them
//! directly on tensors for inference; [`Tape`] additionally records each
//! operation so that [`Tape::backward`] can push gradients into the
//! parameters.

mod eval;
pub mod gradcheck;
pub mod kernels;
mod ops;
mod tape;

use serde::{Deserialize, Serialize};

pub use eval::Eval;
pub use kernels::{Activation, ConvGeometry};
pub use ops::Op;
pub use tape::{Grads, Tape, Var};

use crate::error::{shape_err, Result};
use crate::tensor::{ActShape, Real, Tensor};
use crate::train::loss::LossConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

/// Owns every parameter of a model, addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(S::zero());
        }
    }

    /// Adds a backward pass's parameter gradients into the stored ones.
    pub fn accumulate(&mut self, grads: &Grads<S>) -> Result<()> {
        for (id, g) in grads.params() {
            self.params[id.0].grad.add_assign(g)?;
        }
        Ok(())
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
        }
    }
}

/// Execution context the layers are written against.
///
/// Every convenience method funnels into [`Graph::apply`], so evaluation and
/// recording share one forward implementation.
pub trait Graph<S: Real> {
    type Value: Clone;

    fn store(&self) -> &ParamStore<S>;
    fn constant(&mut self, t: Tensor<S>) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<S>;
    fn apply(&mut self, op: Op<S>, inputs: &[&Self::Value]) -> Result<Self::Value>;

    fn shape(&self, v: &Self::Value) -> Result<ActShape> {
        self.value(v).act()
    }

    fn conv(
        &mut self,
        x: &Self::Value,
        w: ParamId,
        b: Option<ParamId>,
        geom: ConvGeometry,
    ) -> Result<Self::Value> {
        self.apply(Op::Conv { w, b, geom }, &[x])
    }

    fn conv_transpose(
        &mut self,
        x: &Self::Value,
        w: ParamId,
        b: Option<ParamId>,
        geom: ConvGeometry,
        out_freq: usize,
    ) -> Result<Self::Value> {
        self.apply(
            Op::ConvTranspose {
                w,
                b,
                geom,
                out_freq,
            },
            &[x],
        )
    }

    fn depthwise(
        &mut self,
        x: &Self::Value,
        w: ParamId,
        b: Option<ParamId>,
    ) -> Result<Self::Value> {
        self.apply(Op::Depthwise { w, b }, &[x])
    }

    fn dense(&mut self, x: &Self::Value, w: ParamId, b: Option<ParamId>) -> Result<Self::Value> {
        self.apply(Op::Dense { w, b }, &[x])
    }

    fn activation(&mut self, x: &Self::Value, act: Activation) -> Result<Self::Value> {
        if act.is_linear() {
            return Ok(x.clone());
        }
        self.apply(Op::Activation(act), &[x])
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Add, &[a, b])
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Mul, &[a, b])
    }

    fn one_minus(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::OneMinus, &[a])
    }

    fn concat_channels(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::ConcatChannels, &[a, b])
    }

    /// Appends `extra` zero bins on the high-frequency side.
    fn pad_freq(&mut self, x: &Self::Value, extra: usize) -> Result<Self::Value> {
        if extra == 0 {
            return Ok(x.clone());
        }
        self.apply(Op::PadFreq(extra), &[x])
    }

    /// Keeps the lowest `keep` bins.
    fn crop_freq(&mut self, x: &Self::Value, keep: usize) -> Result<Self::Value> {
        if self.shape(x)?.freq == keep {
            return Ok(x.clone());
        }
        self.apply(Op::CropFreq(keep), &[x])
    }

    fn reshape(&mut self, x: &Self::Value, shape: ActShape) -> Result<Self::Value> {
        self.apply(Op::Reshape(shape), &[x])
    }

    fn select_time(&mut self, x: &Self::Value, t: usize) -> Result<Self::Value> {
        if self.shape(x)?.time == 1 && t == 0 {
            return Ok(x.clone());
        }
        self.apply(Op::SelectTime(t), &[x])
    }

    fn stack_time(&mut self, xs: &[Self::Value]) -> Result<Self::Value> {
        match xs {
            [] => Err(shape_err!("cannot stack an empty sequence")),
            [one] => Ok(one.clone()),
            _ => {
                let refs: Vec<&Self::Value> = xs.iter().collect();
                self.apply(Op::StackTime, &refs)
            }
        }
    }

    fn bound_mask(&mut self, g: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::BoundMask, &[g])
    }

    fn complex_mul(&mut self, g: &Self::Value, y: &Tensor<S>) -> Result<Self::Value> {
        self.apply(Op::ComplexMul(y.clone()), &[g])
    }

    fn compressed_loss(
        &mut self,
        est: &Self::Value,
        target: &Tensor<S>,
        cfg: LossConfig,
    ) -> Result<Self::Value> {
        self.apply(Op::CompressedLoss(target.clone(), cfg), &[est])
    }

    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Sum, &[x])
    }

    /// `Σ w ⊙ x` for a fixed weight tensor.
    fn weighted_sum(&mut self, x: &Self::Value, w: &Tensor<S>) -> Result<Self::Value> {
        self.apply(Op::WeightedSum(w.clone()), &[x])
    }
}
