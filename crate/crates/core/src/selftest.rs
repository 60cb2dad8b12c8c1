//! Built-in numerical checks: per-layer and whole-model gradients, kernel
//! adjointness, STFT reconstruction and streaming equivalence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{grad_check, GradCheckConfig, GradCheckReport, Objective};
use crate::autodiff::{kernels, Activation, ConvGeometry, Eval, Graph, ParamStore};
use crate::dsp::stft::{istft, stft, FrameConfig};
use crate::error::Result;
use crate::recurrent::{CellState, ConvLstmCell, GruCell};
use crate::tensor::{ActShape, Tensor};
use crate::topology::accounting::{
    ordering_violations, AccountingRow, FLOP_TOLERANCE, PARAM_TOLERANCE,
};
use crate::topology::{plan_padding, Model, Overrides, PadMode, Variant};
use crate::train::LossConfig;

pub const LAYER_GRAD_TOLERANCE: f64 = 1e-3;
pub const MODEL_GRAD_TOLERANCE: f64 = 5e-3;
pub const ADJOINT_TOLERANCE: f64 = 1e-10;
pub const STFT_TOLERANCE: f64 = 1e-6;
pub const STREAMING_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn below(
        name: impl Into<String>,
        value: f64,
        tolerance: f64,
        detail: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Conv { geom: ConvGeometry, act: Activation },
    ConvTranspose { geom: ConvGeometry, out_freq: usize },
    Depthwise,
    Dense,
    Activation(Activation),
    Add,
    Mul,
    OneMinus,
    Concat,
    PadCrop,
    Reshape(ActShape),
    TimeSplitStack,
    BoundMask,
    ComplexMul(Tensor<f64>),
    Loss(Tensor<f64>),
    Clstm(ConvLstmCell),
    Gru(GruCell),
}

impl Layer {
    fn body<G: Graph<f64>>(&self, g: &mut G, x: &[G::Value]) -> Result<G::Value> {
        let ids: Vec<_> = g.store().ids().collect();
        match self {
            Layer::Conv { geom, act } => {
                let y = g.conv(&x[0], ids[0], Some(ids[1]), *geom)?;
                g.activation(&y, *act)
            }
            Layer::ConvTranspose { geom, out_freq } => {
                g.conv_transpose(&x[0], ids[0], Some(ids[1]), *geom, *out_freq)
            }
            Layer::Depthwise => g.depthwise(&x[0], ids[0], Some(ids[1])),
            Layer::Dense => g.dense(&x[0], ids[0], Some(ids[1])),
            Layer::Activation(a) => g.activation(&x[0], *a),
            Layer::Add => g.add(&x[0], &x[1]),
            Layer::Mul => g.mul(&x[0], &x[1]),
            Layer::OneMinus => g.one_minus(&x[0]),
            Layer::Concat => g.concat_channels(&x[0], &x[1]),
            Layer::PadCrop => {
                let y = g.pad_freq(&x[0], 3)?;
                g.crop_freq(&y, 4)
            }
            Layer::Reshape(s) => g.reshape(&x[0], *s),
            Layer::TimeSplitStack => {
                let t = g.shape(&x[0])?.time;
                let steps: Vec<_> = (0..t)
                    .rev()
                    .map(|i| g.select_time(&x[0], i))
                    .collect::<Result<_>>()?;
                g.stack_time(&steps)
            }
            Layer::BoundMask => g.bound_mask(&x[0]),
            Layer::ComplexMul(y) => g.complex_mul(&x[0], y),
            Layer::Loss(target) => g.compressed_loss(&x[0], target, LossConfig::default()),
            Layer::Clstm(cell) => {
                let s = g.shape(&x[0])?;
                let mut h = g.constant(Tensor::act_zeros(cell.state_shape(s.batch)));
                let mut c = h.clone();
                let mut outs = Vec::new();
                for t in 0..s.time {
                    let xt = g.select_time(&x[0], t)?;
                    (h, c) = cell.step(g, &xt, &h, &c)?;
                    outs.push(h.clone());
                }
                g.stack_time(&outs)
            }
            Layer::Gru(cell) => {
                let s = g.shape(&x[0])?;
                let mut h = g.constant(Tensor::act_zeros(cell.state_shape(s.batch)));
                let mut outs = Vec::new();
                for t in 0..s.time {
                    let xt = g.select_time(&x[0], t)?;
                    h = cell.step(g, &xt, &h)?;
                    outs.push(h.clone());
                }
                g.stack_time(&outs)
            }
        }
    }
}

/// A layer followed by a fixed random projection to a scalar.
struct Projected {
    layer: Layer,
    proj: Option<Tensor<f64>>,
}

impl Objective for Projected {
    fn eval<G: Graph<f64>>(&self, g: &mut G, inputs: &[G::Value]) -> Result<G::Value> {
        let y = self.layer.body(g, inputs)?;
        match &self.proj {
            Some(p) => g.weighted_sum(&y, p),
            None => Ok(y),
        }
    }
}

fn check_layer(
    name: &str,
    layer: Layer,
    mut store: ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<Check> {
    let out_shape = {
        let mut g = Eval::new(&store);
        let vals: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = layer.body(&mut g, &vals)?;
        g.value(&y).shape().to_vec()
    };
    let proj = (out_shape.len() > 1 || out_shape.iter().product::<usize>() > 1)
        .then(|| Tensor::uniform(&out_shape, 1.0, rng));
    let obj = Projected { layer, proj };
    let cfg = GradCheckConfig {
        samples: 12,
        ..Default::default()
    };
    let r = grad_check(&obj, &mut store, &inputs, &cfg)?;
    Ok(Check::below(
        format!("grad {name}"),
        r.max_rel_err,
        LAYER_GRAD_TOLERANCE,
        r.worst,
    ))
}

fn affine_store(w: &[usize], b: usize, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.add("w", Tensor::uniform(w, 0.5, rng));
    store.add("b", Tensor::uniform(&[b], 0.5, rng));
    store
}

/// Finite-difference checks for every layer and operator type.
pub fn layer_gradients(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let leaky = Activation::LeakyRelu { slope: 0.2 };
    let x = |s: [usize; 4], r: &mut ChaCha8Rng| Tensor::uniform(&s, 1.0, r);
    let mut out = Vec::new();

    let store = affine_store(&[4, 1, 3, 5], 5, r);
    let geom = ConvGeometry::same(12, 4, 1)?;
    out.push(check_layer(
        "conv stride 1",
        Layer::Conv { geom, act: leaky },
        store,
        vec![x([2, 2, 12, 3], r)],
        r,
    )?);

    let store = affine_store(&[5, 1, 3, 4], 4, r);
    let geom = ConvGeometry::same(13, 5, 2)?;
    out.push(check_layer(
        "conv stride 2",
        Layer::Conv {
            geom,
            act: Activation::Tanh,
        },
        store,
        vec![x([2, 2, 13, 3], r)],
        r,
    )?);

    let store = affine_store(&[4, 1, 3, 5], 3, r);
    let geom = ConvGeometry::same(12, 4, 2)?;
    let layer = Layer::ConvTranspose { geom, out_freq: 12 };
    out.push(check_layer(
        "transposed conv",
        layer,
        store,
        vec![x([2, 2, 6, 5], r)],
        r,
    )?);

    let store = affine_store(&[4], 4, r);
    out.push(check_layer(
        "depthwise",
        Layer::Depthwise,
        store,
        vec![x([2, 2, 5, 4], r)],
        r,
    )?);

    let store = affine_store(&[12, 5], 5, r);
    out.push(check_layer(
        "dense",
        Layer::Dense,
        store,
        vec![x([2, 3, 4, 3], r)],
        r,
    )?);

    for (name, act) in [
        ("leaky relu", leaky),
        ("tanh", Activation::Tanh),
        ("sigmoid", Activation::Sigmoid),
    ] {
        out.push(check_layer(
            name,
            Layer::Activation(act),
            ParamStore::new(),
            vec![x([1, 2, 6, 3], r)],
            r,
        )?);
    }
    for (name, layer) in [("add", Layer::Add), ("mul", Layer::Mul)] {
        out.push(check_layer(
            name,
            layer,
            ParamStore::new(),
            vec![x([1, 2, 4, 3], r), x([1, 2, 4, 3], r)],
            r,
        )?);
    }
    out.push(check_layer(
        "one minus",
        Layer::OneMinus,
        ParamStore::new(),
        vec![x([1, 2, 4, 3], r)],
        r,
    )?);
    let pair = vec![x([1, 2, 4, 3], r), x([1, 2, 4, 2], r)];
    out.push(check_layer(
        "concat",
        Layer::Concat,
        ParamStore::new(),
        pair,
        r,
    )?);
    out.push(check_layer(
        "pad and crop",
        Layer::PadCrop,
        ParamStore::new(),
        vec![x([2, 2, 5, 3], r)],
        r,
    )?);
    let layer = Layer::Reshape(ActShape::new(2, 2, 3, 4));
    out.push(check_layer(
        "reshape",
        layer,
        ParamStore::new(),
        vec![x([2, 2, 4, 3], r)],
        r,
    )?);
    out.push(check_layer(
        "time split",
        Layer::TimeSplitStack,
        ParamStore::new(),
        vec![x([2, 4, 3, 2], r)],
        r,
    )?);

    let mut g = x([2, 3, 7, 2], r);
    g.data_mut().iter_mut().for_each(|v| *v *= 3.0);
    out.push(check_layer(
        "mask bound",
        Layer::BoundMask,
        ParamStore::new(),
        vec![g],
        r,
    )?);
    let y = x([2, 3, 7, 2], r);
    out.push(check_layer(
        "complex mask",
        Layer::ComplexMul(y),
        ParamStore::new(),
        vec![x([2, 3, 7, 2], r)],
        r,
    )?);
    let target = x([2, 3, 7, 2], r);
    out.push(check_layer(
        "compressed loss",
        Layer::Loss(target),
        ParamStore::new(),
        vec![x([2, 3, 7, 2], r)],
        r,
    )?);

    let mut store = ParamStore::new();
    let cell = ConvLstmCell::new(&mut store, "clstm", 2, 3, 3, 5, r);
    randomize_biases(&mut store, r);
    out.push(check_layer(
        "conv lstm",
        Layer::Clstm(cell),
        store,
        vec![x([1, 4, 5, 2], r)],
        r,
    )?);

    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", 6, 4, r);
    randomize_biases(&mut store, r);
    out.push(check_layer(
        "gru",
        Layer::Gru(cell),
        store,
        vec![x([2, 4, 3, 2], r)],
        r,
    )?);
    Ok(out)
}

fn randomize_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut().filter(|p| p.value.shape().len() == 1) {
        p.value = Tensor::uniform(p.value.shape(), 0.5, rng);
    }
}

/// `⟨conv(x), y⟩ = ⟨x, conv_transpose(y)⟩` for stride 1 and 2, odd and even
/// lengths.
pub fn adjointness(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (freq, kernel, stride) in [(12, 4, 1), (13, 5, 2), (66, 12, 2), (65, 4, 2)] {
        let geom = ConvGeometry::same(freq, kernel, stride)?;
        let fo = geom.out_len(freq)?;
        let w = Tensor::<f64>::uniform(&[kernel, 1, 3, 4], 1.0, &mut rng);
        let x = Tensor::uniform(&[2, 1, freq, 3], 1.0, &mut rng);
        let y = Tensor::uniform(&[2, 1, fo, 4], 1.0, &mut rng);
        let lhs = kernels::conv_forward(&x, &w, None, geom)?.dot(&y);
        let rhs = x.dot(&kernels::conv_transpose_forward(&y, &w, None, geom, freq)?);
        let err = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
        out.push(Check::below(
            format!("adjoint M={freq} N={kernel} s={stride}"),
            err,
            ADJOINT_TOLERANCE,
            format!("{lhs:.12e} vs {rhs:.12e}"),
        ));
    }
    Ok(out)
}

struct WholeModel {
    model: Model<f64>,
    noisy: Tensor<f64>,
    clean: Tensor<f64>,
}

impl Objective for WholeModel {
    fn eval<G: Graph<f64>>(&self, g: &mut G, _: &[G::Value]) -> Result<G::Value> {
        let x = g.constant(self.noisy.clone());
        let init: Vec<CellState<G::Value>> = self
            .model
            .zero_state(1)
            .cells
            .iter()
            .map(|c| c.map(|t| g.constant(t.clone())))
            .collect();
        let (mask, _) = self.model.forward(g, &x, &init)?;
        let bounded = g.bound_mask(&mask)?;
        let est = g.complex_mul(&bounded, &self.noisy)?;
        g.compressed_loss(&est, &self.clean, LossConfig::default())
    }
}

/// Finite-difference check of the training loss through a whole network on
/// random spectra, with randomized biases so every path carries gradient.
/// Judge the result by `max_tensor_err`: the smallest sampled bottleneck
/// gradients sit near 1e-8, where a central difference in double precision
/// resolves only one or two digits.
pub fn model_gradient(
    variant: &Variant,
    frames: usize,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f32>::from_variant(variant, &Overrides::default(), seed)?.cast::<f64>();
    randomize_biases(model.store_mut(), &mut rng);
    let shape = model.io_shape(1, frames);
    let noisy = Tensor::uniform(&shape.dims(), 1.0, &mut rng);
    let clean = Tensor::uniform(&shape.dims(), 1.0, &mut rng);
    let mut store = model.store().clone();
    let obj = WholeModel {
        model,
        noisy,
        clean,
    };
    let cfg = GradCheckConfig {
        samples,
        seed,
        ..Default::default()
    };
    grad_check(&obj, &mut store, &[], &cfg)
}

/// Worst relative interior error of `istft(stft(x))` over random signals.
pub fn stft_round_trip(signals: usize, seconds: f64, seed: u64) -> Result<f64> {
    let cfg = FrameConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (seconds * cfg.sample_rate as f64) as usize;
    let edge = cfg.dft_size - cfg.shift;
    let mut worst = 0.0f64;
    for _ in 0..signals {
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = istft(&stft::<f64>(&x, cfg)?, cfg)?;
        let (num, den) = (edge..len - edge).fold((0.0, 0.0), |(n, d), i| {
            (n + (y[i] - x[i]).powi(2), d + x[i] * x[i])
        });
        worst = worst.max((num / den).sqrt());
    }
    Ok(worst)
}

/// Relative difference between frame-by-frame inference with carried state
/// and one unrolled pass over `frames` random frames.
pub fn streaming_equivalence(variant: &Variant, frames: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f32>::from_variant(variant, &Overrides::default(), seed)?;
    for p in model
        .store_mut()
        .iter_mut()
        .filter(|p| p.value.shape().len() == 1)
    {
        p.value = Tensor::uniform(p.value.shape(), 0.1, &mut rng);
    }
    let x = Tensor::<f32>::uniform(&model.io_shape(1, frames).dims(), 1.0, &mut rng);
    let mut state = model.zero_state(1);
    let whole = model.forward_sequence(&x, &mut state)?;
    state.reset();
    let mut steps = Vec::with_capacity(whole.len());
    for t in 0..frames {
        let frame = frame_at(&x, t)?;
        steps.extend_from_slice(model.forward_frame(&frame, &mut state)?.data());
    }
    let stepped = Tensor::from_vec(whole.shape(), steps)?;
    Ok(stepped.rel_err(&whole))
}

fn frame_at(x: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
    let s = x.act()?;
    let row = s.row_len();
    Tensor::act_from_vec(s.with_time(1), x.data()[t * row..(t + 1) * row].to_vec())
}

/// Compares the planner against an exhaustive search over pad bits (the
/// only bit vector under which every stage halves an even size) and checks
/// that decoder crops restore the input size.
pub fn pad_plan_enumeration(max_input: usize, max_stages: usize) -> Result<Check> {
    let mut mismatches = Vec::new();
    let mut cases = 0;
    for stages in 1..=max_stages {
        for input in 2..=max_input {
            let found: Vec<Vec<usize>> = (0..1usize << stages)
                .map(|mask| (0..stages).map(|i| (mask >> i) & 1).collect::<Vec<_>>())
                .filter(|bits| {
                    let mut n = input;
                    bits.iter().all(|&b| {
                        let ok = n >= 2 && (n + b) % 2 == 0;
                        n = (n + b) / 2;
                        ok
                    })
                })
                .collect();
            let plan = plan_padding(input, stages, PadMode::InNetwork).ok();
            let restored = plan
                .as_ref()
                .is_none_or(|p| p.crops().iter().fold(p.bottleneck, |n, c| 2 * n - c) == input);
            cases += 1;
            let expected = (found.len() == 1).then(|| found[0].clone());
            if plan.map(|p| p.pads) != expected || !restored {
                mismatches.push(format!("{input}/{stages}"));
            }
        }
    }
    let detail = format!(
        "{cases} cases, mismatches {:?}",
        &mismatches[..mismatches.len().min(5)]
    );
    Ok(Check::below(
        "pad plan enumeration",
        mismatches.len() as f64,
        0.0,
        detail,
    ))
}

/// Deviation of every published variant from its published complexity, and
/// pairwise orderings.
pub fn accounting_checks() -> Result<Vec<Check>> {
    let rows: Vec<AccountingRow> = Variant::published()
        .iter()
        .map(AccountingRow::for_variant)
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for r in &rows {
        if let Some(d) = r.params_deviation() {
            let detail = format!("{} vs {}", r.params, r.published_params.unwrap_or(0));
            out.push(Check::below(
                format!("params {}", r.variant),
                d.abs(),
                PARAM_TOLERANCE,
                detail,
            ));
        }
        if let Some(d) = r.flops_deviation() {
            let detail = format!("{} vs {}", r.flops, r.published_flops.unwrap_or(0));
            out.push(Check::below(
                format!("FLOPs {}", r.variant),
                d.abs(),
                FLOP_TOLERANCE,
                detail,
            ));
        }
    }
    let bad = ordering_violations(&rows);
    out.push(Check::below(
        "complexity ordering",
        bad.len() as f64,
        0.0,
        bad.join("; "),
    ));
    Ok(out)
}

/// Every check; `quick` skips the whole-network gradients.
pub fn run_all(quick: bool, seed: u64) -> Result<Vec<Check>> {
    let mut out = layer_gradients(seed)?;
    out.extend(adjointness(seed)?);
    out.push(pad_plan_enumeration(600, 6)?);
    out.extend(accounting_checks()?);
    out.push(Check::below(
        "stft round trip",
        stft_round_trip(3, 3.0, seed)?,
        STFT_TOLERANCE,
        "3 s random signals",
    ));
    for v in [Variant::fcrn15(), Variant::EffCrn23Lite] {
        let err = streaming_equivalence(&v, 100, seed)?;
        out.push(Check::below(
            format!("streaming {}", v.ascii_name()),
            err,
            STREAMING_TOLERANCE,
            "100 frames",
        ));
    }
    if !quick {
        for v in [Variant::fcrn15(), Variant::effcrn23()] {
            let r = model_gradient(&v, 5, 2, seed)?;
            out.push(Check::below(
                format!("grad {}", v.ascii_name()),
                r.max_tensor_err,
                MODEL_GRAD_TOLERANCE,
                r.worst_tensor,
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_pass() {
        for c in layer_gradients(1).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn planner_and_accounting_pass() {
        assert!(pad_plan_enumeration(300, 5).unwrap().passed);
        for c in accounting_checks().unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn kernels_are_adjoint() {
        for c in adjointness(2).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }
}
