//! The layer table derived from a [`ModelSpec`].
//!
//! Shapes are `(frequency, channels)` per frame. Parameter and FLOP counts
//! are properties of individual rows, so accounting is a plain sum.
//!
//! FLOP convention, per streaming frame: a multiply-accumulate is 2 FLOPs,
//! a bias add, activation or elementwise add is 1 FLOP per element. A
//! transposed convolution performs its multiply-accumulates at input
//! resolution (each input bin scatters one kernel).

use serde::{Deserialize, Serialize};

use super::padding::{plan_padding, PadPlan};
use super::variant::ModelSpec;
use crate::autodiff::{Activation, ConvGeometry};
use crate::error::{Error, Result};
use crate::recurrent::{clstm_params, gru_params, RecurrentSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerKind {
    /// Append zero bins on the high-frequency side.
    Pad {
        extra: usize,
    },
    Conv {
        geom: ConvGeometry,
        activation: Activation,
    },
    ConvTranspose {
        geom: ConvGeometry,
        activation: Activation,
    },
    /// Remember the current tensor for a later [`LayerKind::SkipMerge`].
    SkipSave,
    /// Add a depthwise 1×1 (weight and bias per channel) of the most recently
    /// saved tensor.
    SkipMerge,
    /// Keep the lowest `keep` bins.
    Crop {
        keep: usize,
    },
    ConvLstm {
        kernel: usize,
    },
    /// Dense GRU over the frequency-major flattened frame.
    Gru,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub in_freq: usize,
    pub in_chan: usize,
    pub out_freq: usize,
    pub out_chan: usize,
}

impl Layer {
    /// Counts toward network depth: convolutions and recurrent cells.
    pub fn is_weighted(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Conv { .. }
                | LayerKind::ConvTranspose { .. }
                | LayerKind::ConvLstm { .. }
                | LayerKind::Gru
        )
    }

    pub fn params(&self) -> usize {
        let (ci, co) = (self.in_chan, self.out_chan);
        match &self.kind {
            LayerKind::Conv { geom, .. } | LayerKind::ConvTranspose { geom, .. } => {
                geom.kernel * ci * co + co
            }
            LayerKind::SkipMerge => 2 * co,
            LayerKind::ConvLstm { kernel } => clstm_params(ci, co, *kernel),
            LayerKind::Gru => gru_params(self.in_freq * ci, self.out_freq * co),
            LayerKind::Pad { .. } | LayerKind::SkipSave | LayerKind::Crop { .. } => 0,
        }
    }

    pub fn flops(&self) -> usize {
        let (ci, co) = (self.in_chan, self.out_chan);
        let out = self.out_freq * co;
        let act = |a: &Activation| if a.is_linear() { 0 } else { out };
        match &self.kind {
            LayerKind::Conv { geom, activation } => {
                2 * self.out_freq * geom.kernel * ci * co + out + act(activation)
            }
            LayerKind::ConvTranspose { geom, activation } => {
                2 * self.in_freq * geom.kernel * ci * co + out + act(activation)
            }
            // Multiply, bias and the residual add.
            LayerKind::SkipMerge => 4 * out,
            LayerKind::ConvLstm { kernel } => {
                let f = self.out_freq;
                let gates = 4 * (2 * f * kernel * (ci + co) * co + f * co);
                // Gate nonlinearities (4), c' = f⊙c + i⊙g (3), tanh(c') and o⊙· (2).
                gates + 9 * f * co
            }
            LayerKind::Gru => {
                let (n, h) = (self.in_freq * ci, self.out_freq * co);
                // Two sigmoids, tanh, r⊙h, then z⊙h + (1 − z)⊙n (4).
                3 * (2 * (n + h) * h + h) + 8 * h
            }
            LayerKind::Pad { .. } | LayerKind::SkipSave | LayerKind::Crop { .. } => 0,
        }
    }
}

/// Topologically ordered layer table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub layers: Vec<Layer>,
    pub plan: PadPlan,
}

struct Builder {
    layers: Vec<Layer>,
    freq: usize,
    chan: usize,
}

impl Builder {
    fn push(&mut self, name: String, kind: LayerKind, out_freq: usize, out_chan: usize) {
        self.layers.push(Layer {
            name,
            kind,
            in_freq: self.freq,
            in_chan: self.chan,
            out_freq,
            out_chan,
        });
        self.freq = out_freq;
        self.chan = out_chan;
    }
}

impl LayerGraph {
    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        if spec.filters == 0 || spec.kernel == 0 || spec.blocks == 0 || spec.out_channels == 0 {
            return Err(Error::Build(
                "filters, kernel, blocks and output channels must be positive".into(),
            ));
        }
        if spec.input_size < spec.spectrum_bins {
            return Err(Error::Build(format!(
                "input size {} is smaller than the {} spectrum bins",
                spec.input_size, spec.spectrum_bins
            )));
        }
        if spec.bottleneck.is_empty() {
            return Err(Error::Build(
                "the bottleneck needs at least one recurrent cell".into(),
            ));
        }
        let plan = plan_padding(spec.input_size, spec.blocks, spec.pad_mode)?;
        let leaky = Activation::LeakyRelu {
            slope: spec.leaky_slope,
        };
        let n = spec.kernel;
        let mut b = Builder {
            layers: Vec::new(),
            freq: spec.spectrum_bins,
            chan: 2,
        };

        if spec.external_pad() > 0 {
            b.push(
                "input.pad".into(),
                LayerKind::Pad {
                    extra: spec.external_pad(),
                },
                spec.input_size,
                2,
            );
        }

        for i in 0..spec.blocks {
            let filters = (i + 1) * spec.filters;
            let stage = format!("enc{}", i + 1);
            if plan.pads[i] > 0 {
                b.push(
                    format!("{stage}.pad"),
                    LayerKind::Pad {
                        extra: plan.pads[i],
                    },
                    plan.padded(i),
                    b.chan,
                );
            }
            let size = b.freq;
            let geom = ConvGeometry::same(size, n, 1)?;
            b.push(
                format!("{stage}.conv"),
                LayerKind::Conv {
                    geom,
                    activation: leaky,
                },
                geom.out_len(size)?,
                filters,
            );
            b.push(format!("{stage}.skip"), LayerKind::SkipSave, b.freq, b.chan);
            let geom = ConvGeometry::same(size, n, 2)?;
            b.push(
                format!("{stage}.down"),
                LayerKind::Conv {
                    geom,
                    activation: leaky,
                },
                geom.out_len(size)?,
                filters,
            );
        }
        debug_assert_eq!(b.freq, plan.bottleneck);

        for (k, cell) in spec.bottleneck.iter().enumerate() {
            let name = format!("bottleneck{}", k + 1);
            match *cell {
                RecurrentSpec::ConvLstm { hidden } => {
                    if hidden == 0 {
                        return Err(Error::Build("CLSTM width must be positive".into()));
                    }
                    b.push(name, LayerKind::ConvLstm { kernel: n }, b.freq, hidden);
                }
                RecurrentSpec::Gru { hidden } => {
                    let flat = b.freq * b.chan;
                    let h = hidden.unwrap_or(flat);
                    if h == 0 || h % b.freq != 0 {
                        return Err(Error::Build(format!(
                            "GRU width {h} cannot be reshaped to {} frequency bins",
                            b.freq
                        )));
                    }
                    b.push(name, LayerKind::Gru, b.freq, h / b.freq);
                }
            }
        }

        for i in (0..spec.blocks).rev() {
            let filters = (i + 1) * spec.filters;
            let stage = format!("dec{}", i + 1);
            let size = plan.padded(i);
            let down = ConvGeometry::same(size, n, 2)?;
            let out = down.transpose_out_len(b.freq)?;
            if out != size {
                return Err(Error::Build(format!(
                    "{stage} upsamples to {out} bins, expected {size}"
                )));
            }
            b.push(
                format!("{stage}.up"),
                LayerKind::ConvTranspose {
                    geom: down,
                    activation: leaky,
                },
                size,
                filters,
            );
            b.push(format!("{stage}.skip"), LayerKind::SkipMerge, size, filters);
            let geom = ConvGeometry::same(size, n, 1)?;
            b.push(
                format!("{stage}.conv"),
                LayerKind::Conv {
                    geom,
                    activation: leaky,
                },
                size,
                filters,
            );
            if plan.pads[i] > 0 {
                b.push(
                    format!("{stage}.crop"),
                    LayerKind::Crop {
                        keep: plan.inputs[i],
                    },
                    plan.inputs[i],
                    filters,
                );
            }
        }

        let geom = ConvGeometry::same(b.freq, n, 1)?;
        b.push(
            "output.conv".into(),
            LayerKind::Conv {
                geom,
                activation: Activation::Linear,
            },
            b.freq,
            spec.out_channels,
        );
        if spec.external_pad() > 0 {
            b.push(
                "output.crop".into(),
                LayerKind::Crop {
                    keep: spec.spectrum_bins,
                },
                spec.spectrum_bins,
                b.chan,
            );
        }

        let graph = LayerGraph {
            layers: b.layers,
            plan,
        };
        graph.check_skips()?;
        Ok(graph)
    }

    /// Every merge must see a saved tensor of its own shape.
    fn check_skips(&self) -> Result<()> {
        let mut saved = Vec::new();
        for l in &self.layers {
            match l.kind {
                LayerKind::SkipSave => saved.push((l.out_freq, l.out_chan)),
                LayerKind::SkipMerge => {
                    let s = saved
                        .pop()
                        .ok_or_else(|| Error::Build(format!("{} has no matching skip", l.name)))?;
                    if s != (l.in_freq, l.in_chan) {
                        return Err(Error::Build(format!(
                            "{} merges {s:?} into ({}, {})",
                            l.name, l.in_freq, l.in_chan
                        )));
                    }
                }
                _ => {}
            }
        }
        if !saved.is_empty() {
            return Err(Error::Build("unmerged skip connection".into()));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.iter().filter(|l| l.is_weighted()).count()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::params).sum()
    }

    pub fn flops_per_frame(&self) -> usize {
        self.layers.iter().map(Layer::flops).sum()
    }

    /// `(freq, chan)` at the bottleneck input.
    pub fn bottleneck_shape(&self) -> (usize, usize) {
        self.layers
            .iter()
            .find(|l| matches!(l.kind, LayerKind::ConvLstm { .. } | LayerKind::Gru))
            .map(|l| (l.in_freq, l.in_chan))
            .expect("graph has a bottleneck")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::variant::Variant;

    fn graph(name: &str) -> LayerGraph {
        let v: Variant = name.parse().unwrap();
        LayerGraph::from_spec(&ModelSpec::for_variant(&v).unwrap()).unwrap()
    }

    #[test]
    fn single_conv_count() {
        let geom = ConvGeometry::same(264, 12, 1).unwrap();
        let l = Layer {
            name: "c".into(),
            kind: LayerKind::Conv {
                geom,
                activation: Activation::Linear,
            },
            in_freq: 264,
            in_chan: 2,
            out_freq: 264,
            out_chan: 32,
        };
        assert_eq!(l.params(), 800);
    }

    #[test]
    fn depthwise_flops() {
        let l = Layer {
            name: "s".into(),
            kind: LayerKind::SkipMerge,
            in_freq: 33,
            in_chan: 96,
            out_freq: 33,
            out_chan: 96,
        };
        // 3168 MACs = 6336 FLOPs, then bias and residual add per element.
        assert_eq!(l.flops(), 6336 + 2 * 3168);
    }

    #[test]
    fn depths() {
        assert_eq!(graph("FCRN15").depth(), 15);
        assert_eq!(graph("EffCRN23").depth(), 23);
        assert_eq!(graph("EffCRN23lite").depth(), 23);
    }

    #[test]
    fn bottlenecks() {
        assert_eq!(graph("FCRN15").bottleneck_shape(), (33, 96));
        assert_eq!(graph("EffCRN23").bottleneck_shape(), (9, 135));
        assert_eq!(graph("FCRN15+D").bottleneck_shape(), (9, 160));
    }

    #[test]
    fn decoder_mirrors_encoder() {
        for v in Variant::published() {
            let g = graph(&v.ascii_name());
            for i in 0..g.plan.stages() {
                let prefix = format!("dec{}.", i + 1);
                let last = g
                    .layers
                    .iter()
                    .rev()
                    .find(|l| l.name.starts_with(&prefix))
                    .unwrap();
                assert_eq!(last.out_freq, g.plan.inputs[i], "{v} {}", last.name);
            }
            let last = g.layers.last().unwrap();
            assert_eq!((last.out_freq, last.out_chan), (257, 2), "{v}");
        }
    }

    #[test]
    fn linear_filter_schedule() {
        let g = graph("EffCRN23");
        for i in 1..=5 {
            for suffix in ["conv", "down"] {
                let l = g
                    .layers
                    .iter()
                    .find(|l| l.name == format!("enc{i}.{suffix}"))
                    .unwrap();
                assert_eq!(l.out_chan, 27 * i);
            }
            let l = g
                .layers
                .iter()
                .find(|l| l.name == format!("dec{i}.conv"))
                .unwrap();
            assert_eq!(l.out_chan, 27 * i);
        }
    }

    #[test]
    fn gru_width_must_fit_bottleneck() {
        let mut spec = ModelSpec::for_variant(&Variant::effcrn23()).unwrap();
        spec.bottleneck[1] = RecurrentSpec::Gru { hidden: Some(100) };
        assert!(matches!(LayerGraph::from_spec(&spec), Err(Error::Build(_))));
        spec.bottleneck[1] = RecurrentSpec::Gru {
            hidden: Some(9 * 10),
        };
        let g = LayerGraph::from_spec(&spec).unwrap();
        assert_eq!(
            g.layers
                .iter()
                .find(|l| l.name == "dec5.up")
                .unwrap()
                .in_chan,
            10
        );
    }
}
