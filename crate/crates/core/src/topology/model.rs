//! Parameters bound to a [`LayerGraph`], and the forward pass.
//!
//! Convolutions act on every `(batch, time)` row independently, so a whole
//! sequence goes through the encoder and decoder in one call each. Only the
//! recurrent cells loop over time. Feeding frames one at a time with the
//! returned state therefore gives the same result as a single pass.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{LayerGraph, LayerKind};
use super::variant::{ModelSpec, Overrides, Variant};
use crate::autodiff::{Eval, Graph, ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::recurrent::{CellState, ConvLstmCell, GruCell, RecurrentState};
use crate::tensor::{ActShape, Real, Tensor};

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug)]
enum Binding {
    None,
    Affine { w: ParamId, b: ParamId },
    Lstm(ConvLstmCell),
    Gru(GruCell),
}

/// A built network: spec, layer table and parameters.
#[derive(Clone, Debug)]
pub struct Model<S: Real = f32> {
    spec: ModelSpec,
    graph: LayerGraph,
    store: ParamStore<S>,
    bindings: Vec<Binding>,
    id: u64,
}

fn glorot<S: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<S> {
    Tensor::uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

impl<S: Real> Model<S> {
    /// Builds the network and draws initial weights from `seed`.
    ///
    /// Kernels are Glorot-uniform, biases zero, skip weights one.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let graph = LayerGraph::from_spec(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut bindings = Vec::with_capacity(graph.layers.len());
        for l in &graph.layers {
            let (ci, co) = (l.in_chan, l.out_chan);
            let binding = match &l.kind {
                LayerKind::Conv { geom, .. } => {
                    let n = geom.kernel;
                    let w = store.add(
                        format!("{}.kernel", l.name),
                        glorot(&[n, 1, ci, co], n * ci, n * co, &mut rng),
                    );
                    let b = store.add(format!("{}.bias", l.name), Tensor::zeros(&[co]));
                    Binding::Affine { w, b }
                }
                LayerKind::ConvTranspose { geom, .. } => {
                    let n = geom.kernel;
                    let w = store.add(
                        format!("{}.kernel", l.name),
                        glorot(&[n, 1, co, ci], n * ci, n * co, &mut rng),
                    );
                    let b = store.add(format!("{}.bias", l.name), Tensor::zeros(&[co]));
                    Binding::Affine { w, b }
                }
                LayerKind::SkipMerge => {
                    let w = store.add(format!("{}.weight", l.name), Tensor::full(&[co], S::one()));
                    let b = store.add(format!("{}.bias", l.name), Tensor::zeros(&[co]));
                    Binding::Affine { w, b }
                }
                LayerKind::ConvLstm { kernel } => Binding::Lstm(ConvLstmCell::new(
                    &mut store, &l.name, ci, co, *kernel, l.in_freq, &mut rng,
                )),
                LayerKind::Gru => Binding::Gru(GruCell::new(
                    &mut store,
                    &l.name,
                    l.in_freq * ci,
                    l.out_freq * co,
                    &mut rng,
                )),
                LayerKind::Pad { .. } | LayerKind::SkipSave | LayerKind::Crop { .. } => {
                    Binding::None
                }
            };
            bindings.push(binding);
        }
        debug_assert_eq!(store.num_elements(), graph.num_params());
        Ok(Self {
            spec,
            graph,
            store,
            bindings,
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
        })
    }

    pub fn from_variant(variant: &Variant, overrides: &Overrides, seed: u64) -> Result<Self> {
        let mut spec = ModelSpec::for_variant(variant)?;
        spec.apply_overrides(overrides)?;
        Self::new(spec, seed)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn graph(&self) -> &LayerGraph {
        &self.graph
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    /// Copy in another precision. States stay interchangeable in shape but
    /// not in type.
    pub fn cast<T: Real>(&self) -> Model<T> {
        Model {
            spec: self.spec.clone(),
            graph: self.graph.clone(),
            store: self.store.cast(),
            bindings: self.bindings.clone(),
            id: self.id,
        }
    }

    /// Zero recurrent state for `batch` parallel streams.
    pub fn zero_state(&self, batch: usize) -> RecurrentState<S> {
        let cells = self
            .bindings
            .iter()
            .filter_map(|b| match b {
                Binding::Lstm(cell) => {
                    let s = cell.state_shape(batch);
                    Some(CellState::Lstm {
                        h: Tensor::act_zeros(s),
                        c: Tensor::act_zeros(s),
                    })
                }
                Binding::Gru(cell) => Some(CellState::Gru {
                    h: Tensor::act_zeros(cell.state_shape(batch)),
                }),
                _ => None,
            })
            .collect();
        RecurrentState::new(cells, self.id)
    }

    /// Shape `(B, T, bins, 2)` expected for a `B`×`T` input.
    pub fn io_shape(&self, batch: usize, time: usize) -> ActShape {
        ActShape::new(batch, time, self.spec.spectrum_bins, 2)
    }

    /// Runs the network on `x` of shape `(B, T, bins, 2)`, starting from the
    /// given per-cell states. Returns the raw mask and the final states.
    pub fn forward<G: Graph<S>>(
        &self,
        g: &mut G,
        x: &G::Value,
        init: &[CellState<G::Value>],
    ) -> Result<(G::Value, Vec<CellState<G::Value>>)> {
        let xs = g.shape(x)?;
        if xs.freq != self.spec.spectrum_bins || xs.chan != 2 {
            return Err(shape_err!(
                "model expects ({}, 2) frames, got ({}, {})",
                self.spec.spectrum_bins,
                xs.freq,
                xs.chan
            ));
        }
        let mut states = init.iter();
        let mut finals = Vec::with_capacity(init.len());
        let mut skips = Vec::new();
        let mut h = x.clone();
        for (layer, binding) in self.graph.layers.iter().zip(&self.bindings) {
            h = match (&layer.kind, binding) {
                (LayerKind::Pad { extra }, _) => g.pad_freq(&h, *extra)?,
                (LayerKind::Crop { keep }, _) => g.crop_freq(&h, *keep)?,
                (LayerKind::Conv { geom, activation }, Binding::Affine { w, b }) => {
                    let y = g.conv(&h, *w, Some(*b), *geom)?;
                    g.activation(&y, *activation)?
                }
                (LayerKind::ConvTranspose { geom, activation }, Binding::Affine { w, b }) => {
                    let y = g.conv_transpose(&h, *w, Some(*b), *geom, layer.out_freq)?;
                    g.activation(&y, *activation)?
                }
                (LayerKind::SkipSave, _) => {
                    skips.push(h.clone());
                    h
                }
                (LayerKind::SkipMerge, Binding::Affine { w, b }) => {
                    let s = skips.pop().expect("graph validated skips");
                    let s = g.depthwise(&s, *w, Some(*b))?;
                    g.add(&h, &s)?
                }
                (LayerKind::ConvLstm { .. }, Binding::Lstm(cell)) => {
                    let Some(CellState::Lstm { h: h0, c: c0 }) = states.next() else {
                        return Err(Error::Usage(
                            "recurrent state does not match the model".into(),
                        ));
                    };
                    let (mut hs, mut cs) = (h0.clone(), c0.clone());
                    let mut outs = Vec::with_capacity(xs.time);
                    for t in 0..xs.time {
                        let xt = g.select_time(&h, t)?;
                        (hs, cs) = cell.step(g, &xt, &hs, &cs)?;
                        outs.push(hs.clone());
                    }
                    finals.push(CellState::Lstm { h: hs, c: cs });
                    g.stack_time(&outs)?
                }
                (LayerKind::Gru, Binding::Gru(cell)) => {
                    let Some(CellState::Gru { h: h0 }) = states.next() else {
                        return Err(Error::Usage(
                            "recurrent state does not match the model".into(),
                        ));
                    };
                    let frame = ActShape::new(xs.batch, 1, layer.out_freq, layer.out_chan);
                    let mut hs = h0.clone();
                    let mut outs = Vec::with_capacity(xs.time);
                    for t in 0..xs.time {
                        let xt = g.select_time(&h, t)?;
                        hs = cell.step(g, &xt, &hs)?;
                        outs.push(g.reshape(&hs, frame)?);
                    }
                    finals.push(CellState::Gru { h: hs });
                    g.stack_time(&outs)?
                }
                (kind, _) => unreachable!("layer {kind:?} built without parameters"),
            };
        }
        if states.next().is_some() {
            return Err(Error::Usage(
                "recurrent state has more cells than the model".into(),
            ));
        }
        Ok((h, finals))
    }

    /// Tape-free inference over `(B, T, bins, 2)`; `state` is read and then
    /// replaced by the state after the last frame.
    pub fn forward_sequence(
        &self,
        x: &Tensor<S>,
        state: &mut RecurrentState<S>,
    ) -> Result<Tensor<S>> {
        state.check_owner(self.id)?;
        let batch = x.act()?.batch;
        let expected = self.zero_state(batch);
        let compatible = state.cells.len() == expected.cells.len()
            && state
                .cells
                .iter()
                .zip(&expected.cells)
                .all(|(a, b)| match (a, b) {
                    (CellState::Lstm { h, c }, CellState::Lstm { h: h2, .. }) => {
                        h.shape() == h2.shape() && c.shape() == h2.shape()
                    }
                    (CellState::Gru { h }, CellState::Gru { h: h2 }) => h.shape() == h2.shape(),
                    _ => false,
                });
        if !compatible {
            return Err(Error::Usage(format!(
                "recurrent state does not fit a batch of {batch}"
            )));
        }
        let mut g = Eval::new(&self.store);
        let xv = g.constant(x.clone());
        let init: Vec<_> = state
            .cells
            .iter()
            .map(|c| c.map(|t| g.constant(t.clone())))
            .collect();
        let (y, finals) = self.forward(&mut g, &xv, &init)?;
        state.cells = finals
            .iter()
            .map(|c| c.map(|v| g.value(v).clone()))
            .collect();
        Ok(g.value(&y).clone())
    }

    /// One streaming step on a `(B, 1, bins, 2)` frame.
    pub fn forward_frame(
        &self,
        frame: &Tensor<S>,
        state: &mut RecurrentState<S>,
    ) -> Result<Tensor<S>> {
        let time = frame.act()?.time;
        if time != 1 {
            return Err(shape_err!("forward_frame takes one frame, got {time}"));
        }
        self.forward_sequence(frame, state)
    }

    /// Replaces every parameter value, in store order.
    pub fn set_values(&mut self, values: Vec<Tensor<S>>) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(shape_err!(
                "expected {} parameter tensors, got {}",
                self.store.len(),
                values.len()
            ));
        }
        for (p, v) in self.store.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(shape_err!(
                    "{} has shape {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                ));
            }
        }
        for (p, v) in self.store.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }
}
