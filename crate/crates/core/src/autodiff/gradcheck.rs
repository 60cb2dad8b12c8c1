//! Central finite-difference oracle for the reverse-mode gradients.
//!
//! Runs in double precision. The analytic gradient comes from a [`Tape`];
//! the numeric one from tape-free [`Eval`] passes, so the two routes share
//! only the forward kernels.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Eval, Graph, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A scalar-valued computation over parameters and watched inputs.
pub trait Objective {
    fn eval<G: Graph<f64>>(&self, g: &mut G, inputs: &[G::Value]) -> Result<G::Value>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step, scaled by `max(1, |θ|)`.
    pub eps: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Coordinates sampled per tensor, in addition to the one with the
    /// largest analytic gradient. Tensors at most this long are checked
    /// exhaustively.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-8,
            samples: 6,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    /// Worst `‖a − n‖ / max(‖a‖, ‖n‖)` over the checked coordinates of one
    /// tensor.
    pub max_tensor_err: f64,
    pub worst_tensor: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if err >= self.max_rel_err {
            self.max_rel_err = err;
            self.worst = format!("{name}[{index}] analytic={analytic:.6e} numeric={numeric:.6e}");
        }
    }

    fn record_tensor(&mut self, name: &str, pairs: &[(f64, f64)], floor: f64) {
        let norm =
            |f: &dyn Fn(&(f64, f64)) -> f64| pairs.iter().map(|p| f(p).powi(2)).sum::<f64>().sqrt();
        let diff = norm(&|(a, n)| a - n);
        let scale = norm(&|(a, _)| *a).max(norm(&|(_, n)| *n)).max(floor);
        let err = diff / scale;
        if err >= self.max_tensor_err {
            self.max_tensor_err = err;
            self.worst_tensor = format!("{name} ({} coordinates, |a| {scale:.3e})", pairs.len());
        }
    }
}

fn eval_scalar<O: Objective>(
    obj: &O,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
) -> Result<f64> {
    let mut g = Eval::new(store);
    let vals: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = obj.eval(&mut g, &vals)?;
    let v = g.value(&out);
    if !v.is_scalar() {
        return Err(Error::Usage("objective must produce a scalar".into()));
    }
    Ok(v.item())
}

fn coordinates(
    len: usize,
    analytic: Option<&Tensor<f64>>,
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    if len <= cfg.samples + 1 {
        return (0..len).collect();
    }
    let mut idx = sample(rng, len, cfg.samples).into_vec();
    if let Some(a) = analytic {
        let best = (0..len)
            .max_by(|&i, &j| a.data()[i].abs().total_cmp(&a.data()[j].abs()))
            .unwrap_or(0);
        if !idx.contains(&best) {
            idx.push(best);
        }
    }
    idx
}

/// Compares tape gradients against central differences for every parameter
/// in `store` and every tensor in `inputs`.
pub fn grad_check<O: Objective>(
    obj: &O,
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let grads = {
        let mut tape = Tape::new(store);
        let vars: Vec<_> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = obj.eval(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        let input_grads: Vec<Option<Tensor<f64>>> =
            vars.iter().map(|&v| grads.input(v).cloned()).collect();
        let param_grads: Vec<Option<Tensor<f64>>> =
            store.ids().map(|id| grads.param(id).cloned()).collect();
        (param_grads, input_grads)
    };
    let (param_grads, input_grads) = grads;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let len = store.get(id).value.len();
        let analytic = param_grads[id.0].as_ref();
        let mut pairs = Vec::new();
        for i in coordinates(len, analytic, cfg, &mut rng) {
            let orig = store.get(id).value.data()[i];
            let h = cfg.eps * orig.abs().max(1.0);
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval_scalar(obj, store, inputs)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval_scalar(obj, store, inputs)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.map_or(0.0, |t| t.data()[i]);
            report.record(&name, i, a, numeric, cfg.floor);
            pairs.push((a, numeric));
        }
        report.record_tensor(&name, &pairs, cfg.floor);
    }

    let mut perturbed = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = input_grads[k].as_ref();
        let mut pairs = Vec::new();
        for i in coordinates(input.len(), analytic, cfg, &mut rng) {
            let orig = input.data()[i];
            let h = cfg.eps * orig.abs().max(1.0);
            perturbed[k].data_mut()[i] = orig + h;
            let plus = eval_scalar(obj, store, &perturbed)?;
            perturbed[k].data_mut()[i] = orig - h;
            let minus = eval_scalar(obj, store, &perturbed)?;
            perturbed[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.map_or(0.0, |t| t.data()[i]);
            report.record(&format!("input{k}"), i, a, numeric, cfg.floor);
            pairs.push((a, numeric));
        }
        report.record_tensor(&format!("input{k}"), &pairs, cfg.floor);
    }
    Ok(report)
}
