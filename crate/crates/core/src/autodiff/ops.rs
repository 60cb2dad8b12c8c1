use super::kernels::{self, Activation, ConvGeometry};
use super::{ParamId, ParamStore};
use crate::dsp::mask;
use crate::error::{shape_err, Result};
use crate::tensor::{ActShape, Real, Tensor};
use crate::train::loss::{self, LossConfig};

/// A differentiable operation. Parameters are referenced by id; constant
/// operands that never receive gradients are carried inline.
#[derive(Clone, Debug)]
pub enum Op<S> {
    Conv {
        w: ParamId,
        b: Option<ParamId>,
        geom: ConvGeometry,
    },
    ConvTranspose {
        w: ParamId,
        b: Option<ParamId>,
        geom: ConvGeometry,
        out_freq: usize,
    },
    Depthwise {
        w: ParamId,
        b: Option<ParamId>,
    },
    Dense {
        w: ParamId,
        b: Option<ParamId>,
    },
    Activation(Activation),
    Add,
    Mul,
    OneMinus,
    ConcatChannels,
    PadFreq(usize),
    CropFreq(usize),
    Reshape(ActShape),
    SelectTime(usize),
    StackTime,
    BoundMask,
    ComplexMul(Tensor<S>),
    CompressedLoss(Tensor<S>, LossConfig),
    Sum,
    WeightedSum(Tensor<S>),
}

/// Gradient flowing into one operand.
pub(crate) enum InputGrad<S> {
    Full(Tensor<S>),
    /// Gradient of a single time step of a `(B, T, F, C)` operand.
    TimeSlice {
        t: usize,
        grad: Tensor<S>,
    },
}

pub(crate) struct Backprop<S> {
    pub inputs: Vec<Option<InputGrad<S>>>,
    pub params: Vec<(ParamId, Tensor<S>)>,
}

fn arity<S>(inputs: &[&Tensor<S>], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(shape_err!(
            "operation expects {n} operands, got {}",
            inputs.len()
        ));
    }
    Ok(())
}

fn opt_value<S: Real>(store: &ParamStore<S>, id: Option<ParamId>) -> Option<&Tensor<S>> {
    id.map(|id| store.value(id))
}

/// Copies the rows of time step `t` out of a `(B, T, F, C)` tensor.
pub(crate) fn time_slice<S: Real>(x: &Tensor<S>, t: usize) -> Result<Tensor<S>> {
    let s = x.act()?;
    if t >= s.time {
        return Err(shape_err!(
            "time index {t} out of range for {} steps",
            s.time
        ));
    }
    let row = s.row_len();
    let mut out = Vec::with_capacity(s.batch * row);
    for b in 0..s.batch {
        let start = (b * s.time + t) * row;
        out.extend_from_slice(&x.data()[start..start + row]);
    }
    Tensor::act_from_vec(s.with_time(1), out)
}

fn freq_resize<S: Real>(x: &Tensor<S>, freq: usize) -> Result<Tensor<S>> {
    let s = x.act()?;
    let keep = s.freq.min(freq) * s.chan;
    let mut out = Vec::with_capacity(s.rows() * freq * s.chan);
    for row in x.data().chunks_exact(s.row_len()) {
        out.extend_from_slice(&row[..keep]);
        out.resize(out.len() + (freq * s.chan - keep), S::zero());
    }
    Tensor::act_from_vec(s.with_freq(freq), out)
}

impl<S: Real> Op<S> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv { .. } => "conv",
            Op::ConvTranspose { .. } => "conv_transpose",
            Op::Depthwise { .. } => "depthwise",
            Op::Dense { .. } => "dense",
            Op::Activation(_) => "activation",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::OneMinus => "one_minus",
            Op::ConcatChannels => "concat",
            Op::PadFreq(_) => "pad",
            Op::CropFreq(_) => "crop",
            Op::Reshape(_) => "reshape",
            Op::SelectTime(_) => "select_time",
            Op::StackTime => "stack_time",
            Op::BoundMask => "bound_mask",
            Op::ComplexMul(_) => "complex_mul",
            Op::CompressedLoss(..) => "compressed_loss",
            Op::Sum => "sum",
            Op::WeightedSum(_) => "weighted_sum",
        }
    }

    pub(crate) fn forward(
        &self,
        store: &ParamStore<S>,
        inputs: &[&Tensor<S>],
    ) -> Result<Tensor<S>> {
        match self {
            Op::StackTime => {}
            Op::Add | Op::Mul | Op::ConcatChannels => arity(inputs, 2)?,
            _ => arity(inputs, 1)?,
        }
        match self {
            Op::Conv { w, b, geom } => {
                kernels::conv_forward(inputs[0], store.value(*w), opt_value(store, *b), *geom)
            }
            Op::ConvTranspose {
                w,
                b,
                geom,
                out_freq,
            } => kernels::conv_transpose_forward(
                inputs[0],
                store.value(*w),
                opt_value(store, *b),
                *geom,
                *out_freq,
            ),
            Op::Depthwise { w, b } => {
                kernels::depthwise_forward(inputs[0], store.value(*w), opt_value(store, *b))
            }
            Op::Dense { w, b } => {
                kernels::dense_forward(inputs[0], store.value(*w), opt_value(store, *b))
            }
            Op::Activation(act) => Ok(inputs[0].map(|v| act.apply(v))),
            Op::Add => inputs[0].zip_map(inputs[1], |a, b| a + b),
            Op::Mul => inputs[0].zip_map(inputs[1], |a, b| a * b),
            Op::OneMinus => Ok(inputs[0].map(|v| S::one() - v)),
            Op::ConcatChannels => {
                let (sa, sb) = (inputs[0].act()?, inputs[1].act()?);
                if sa.with_chan(0) != sb.with_chan(0) {
                    return Err(shape_err!(
                        "cannot concatenate {sa:?} and {sb:?} along channels"
                    ));
                }
                let mut out = Vec::with_capacity(inputs[0].len() + inputs[1].len());
                for (ra, rb) in inputs[0]
                    .data()
                    .chunks_exact(sa.chan)
                    .zip(inputs[1].data().chunks_exact(sb.chan))
                {
                    out.extend_from_slice(ra);
                    out.extend_from_slice(rb);
                }
                Tensor::act_from_vec(sa.with_chan(sa.chan + sb.chan), out)
            }
            Op::PadFreq(extra) => {
                let f = inputs[0].act()?.freq;
                freq_resize(inputs[0], f + extra)
            }
            Op::CropFreq(keep) => {
                let f = inputs[0].act()?.freq;
                if *keep == 0 || *keep > f {
                    return Err(shape_err!("cannot crop {f} bins to {keep}"));
                }
                freq_resize(inputs[0], *keep)
            }
            Op::Reshape(shape) => inputs[0].clone().reshape(&shape.dims()),
            Op::SelectTime(t) => time_slice(inputs[0], *t),
            Op::StackTime => {
                let first = inputs
                    .first()
                    .ok_or_else(|| shape_err!("empty stack"))?
                    .act()?;
                if first.time != 1 {
                    return Err(shape_err!("stacked steps must have one frame each"));
                }
                for x in inputs {
                    if x.act()? != first {
                        return Err(shape_err!("stacked steps differ in shape"));
                    }
                }
                let row = first.row_len();
                let steps = inputs.len();
                let mut out = Vec::with_capacity(first.len() * steps);
                for b in 0..first.batch {
                    for x in inputs {
                        out.extend_from_slice(&x.data()[b * row..(b + 1) * row]);
                    }
                }
                Tensor::act_from_vec(first.with_time(steps), out)
            }
            Op::BoundMask => mask::bound_mask(inputs[0]),
            Op::ComplexMul(y) => mask::complex_mul(inputs[0], y),
            Op::CompressedLoss(target, cfg) => Ok(Tensor::scalar(loss::compressed_loss(
                inputs[0], target, cfg,
            )?)),
            Op::Sum => Ok(Tensor::scalar(inputs[0].sum())),
            Op::WeightedSum(w) => {
                inputs[0].same_shape(w)?;
                Ok(Tensor::scalar(inputs[0].dot(w)))
            }
        }
    }

    /// Vector-Jacobian product. `needs[i]` says whether operand `i` wants a
    /// gradient.
    pub(crate) fn backward(
        &self,
        store: &ParamStore<S>,
        inputs: &[&Tensor<S>],
        output: &Tensor<S>,
        dy: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Backprop<S>> {
        let mut grads: Vec<Option<InputGrad<S>>> = (0..inputs.len()).map(|_| None).collect();
        let mut params = Vec::new();
        let full = |t: Tensor<S>| Some(InputGrad::Full(t));
        match self {
            Op::Conv { w, b, geom } => {
                let x = inputs[0];
                if needs[0] {
                    grads[0] = full(kernels::conv_backward_input(
                        dy,
                        store.value(*w),
                        *geom,
                        x.act()?.freq,
                    )?);
                }
                params.push((*w, kernels::conv_backward_weight(x, dy, *geom)?));
                if let Some(b) = b {
                    params.push((*b, kernels::bias_grad(dy)?));
                }
            }
            Op::ConvTranspose { w, b, geom, .. } => {
                let x = inputs[0];
                if needs[0] {
                    grads[0] = full(kernels::conv_forward(dy, store.value(*w), None, *geom)?);
                }
                // The transposed op's output plays the forward conv's input.
                params.push((*w, kernels::conv_backward_weight(dy, x, *geom)?));
                if let Some(b) = b {
                    params.push((*b, kernels::bias_grad(dy)?));
                }
            }
            Op::Depthwise { w, b } => {
                let (dx, dw) = kernels::depthwise_backward(inputs[0], store.value(*w), dy)?;
                if needs[0] {
                    grads[0] = full(dx);
                }
                params.push((*w, dw));
                if let Some(b) = b {
                    params.push((*b, kernels::bias_grad(dy)?));
                }
            }
            Op::Dense { w, b } => {
                let (dx, dw) = kernels::dense_backward(inputs[0], store.value(*w), dy)?;
                if needs[0] {
                    grads[0] = full(dx);
                }
                params.push((*w, dw));
                if let Some(b) = b {
                    params.push((*b, kernels::bias_grad(dy)?));
                }
            }
            Op::Activation(act) => {
                let mut g = dy.clone();
                for ((gv, &x), &y) in g
                    .data_mut()
                    .iter_mut()
                    .zip(inputs[0].data())
                    .zip(output.data())
                {
                    *gv *= act.derivative(x, y);
                }
                grads[0] = full(g);
            }
            Op::Add => {
                grads[0] = needs[0].then(|| InputGrad::Full(dy.clone()));
                grads[1] = needs[1].then(|| InputGrad::Full(dy.clone()));
            }
            Op::Mul => {
                if needs[0] {
                    grads[0] = full(dy.zip_map(inputs[1], |g, b| g * b)?);
                }
                if needs[1] {
                    grads[1] = full(dy.zip_map(inputs[0], |g, a| g * a)?);
                }
            }
            Op::OneMinus => grads[0] = full(dy.map(|g| -g)),
            Op::ConcatChannels => {
                let (sa, sb) = (inputs[0].act()?, inputs[1].act()?);
                let mut ga = Vec::with_capacity(inputs[0].len());
                let mut gb = Vec::with_capacity(inputs[1].len());
                for chunk in dy.data().chunks_exact(sa.chan + sb.chan) {
                    ga.extend_from_slice(&chunk[..sa.chan]);
                    gb.extend_from_slice(&chunk[sa.chan..]);
                }
                grads[0] = full(Tensor::act_from_vec(sa, ga)?);
                grads[1] = full(Tensor::act_from_vec(sb, gb)?);
            }
            Op::PadFreq(_) | Op::CropFreq(_) => {
                grads[0] = full(freq_resize(dy, inputs[0].act()?.freq)?);
            }
            Op::Reshape(_) => grads[0] = full(dy.clone().reshape(inputs[0].shape())?),
            Op::SelectTime(t) => {
                grads[0] = Some(InputGrad::TimeSlice {
                    t: *t,
                    grad: dy.clone(),
                })
            }
            Op::StackTime => {
                for (t, g) in grads.iter_mut().enumerate() {
                    if needs[t] {
                        *g = full(time_slice(dy, t)?);
                    }
                }
            }
            Op::BoundMask => grads[0] = full(mask::bound_mask_backward(inputs[0], dy)?),
            Op::ComplexMul(y) => grads[0] = full(mask::complex_mul_backward(dy, y)?),
            Op::CompressedLoss(target, cfg) => {
                let mut g = loss::compressed_loss_grad(inputs[0], target, cfg)?;
                g.scale(dy.item());
                grads[0] = full(g);
            }
            Op::Sum => grads[0] = full(Tensor::full(inputs[0].shape(), dy.item())),
            Op::WeightedSum(w) => {
                let mut g = w.clone();
                g.scale(dy.item());
                grads[0] = full(g);
            }
        }
        for (g, &need) in grads.iter_mut().zip(needs) {
            if !need {
                *g = None;
            }
        }
        Ok(Backprop {
            inputs: grads,
            params,
        })
    }
}
