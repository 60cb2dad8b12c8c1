//! Recurrent bottleneck cells: a convolutional LSTM whose gates are
//! frequency-axis convolutions over `[x; h]`, and a dense GRU over the
//! flattened bottleneck.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, ConvGeometry, Graph, ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{ActShape, Real, Tensor};

fn glorot<S: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<S> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, limit, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Gate {
    pub w: ParamId,
    pub b: ParamId,
}

/// Convolutional LSTM without peepholes.
///
/// `i, f, o = σ(W ∗ [x; h] + b)`, `g = tanh(W_g ∗ [x; h] + b_g)`,
/// `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')`. Convolutions are same-padded
/// along frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmCell {
    pub in_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub freq: usize,
    /// Input, forget, cell and output gates, in that order.
    pub gates: [Gate; 4],
}

pub const GATE_NAMES: [&str; 4] = ["input", "forget", "cell", "output"];

impl ConvLstmCell {
    /// Registers gate kernels `(kernel, 1, in + hidden, hidden)` and biases.
    /// The forget-gate bias starts at one.
    pub fn new<S: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        hidden: usize,
        kernel: usize,
        freq: usize,
        rng: &mut R,
    ) -> Self {
        let gates = std::array::from_fn(|i| {
            let shape = [kernel, 1, in_channels + hidden, hidden];
            let w = store.add(
                format!("{name}.{}.kernel", GATE_NAMES[i]),
                glorot(
                    &shape,
                    kernel * (in_channels + hidden),
                    kernel * hidden,
                    rng,
                ),
            );
            let bias = if i == 1 { S::one() } else { S::zero() };
            let b = store.add(
                format!("{name}.{}.bias", GATE_NAMES[i]),
                Tensor::full(&[hidden], bias),
            );
            Gate { w, b }
        });
        Self {
            in_channels,
            hidden,
            kernel,
            freq,
            gates,
        }
    }

    pub fn num_params(&self) -> usize {
        clstm_params(self.in_channels, self.hidden, self.kernel)
    }

    pub fn state_shape(&self, batch: usize) -> ActShape {
        ActShape::new(batch, 1, self.freq, self.hidden)
    }

    fn geometry(&self) -> ConvGeometry {
        ConvGeometry::same(self.freq, self.kernel, 1).expect("stride 1")
    }

    /// One time step. `x` is `(B, 1, F', C_in)`; returns `h'` and the new
    /// `(h', c')`.
    pub fn step<S: Real, G: Graph<S>>(
        &self,
        g: &mut G,
        x: &G::Value,
        h: &G::Value,
        c: &G::Value,
    ) -> Result<(G::Value, G::Value)> {
        let xs = g.shape(x)?;
        if xs.chan != self.in_channels || xs.freq != self.freq || xs.time != 1 {
            return Err(shape_err!(
                "CLSTM expects (B, 1, {}, {}), got {xs:?}",
                self.freq,
                self.in_channels
            ));
        }
        let hs = g.shape(h)?;
        if hs != self.state_shape(xs.batch) || g.shape(c)? != hs {
            return Err(shape_err!("CLSTM state {hs:?} does not match cell"));
        }
        let geom = self.geometry();
        let xh = g.concat_channels(x, h)?;
        let mut pre = Vec::with_capacity(4);
        for (i, gate) in self.gates.iter().enumerate() {
            let z = g.conv(&xh, gate.w, Some(gate.b), geom)?;
            let act = if i == 2 {
                Activation::Tanh
            } else {
                Activation::Sigmoid
            };
            pre.push(g.activation(&z, act)?);
        }
        let (ig, fg, cg, og) = (&pre[0], &pre[1], &pre[2], &pre[3]);
        let keep = g.mul(fg, c)?;
        let write = g.mul(ig, cg)?;
        let c_new = g.add(&keep, &write)?;
        let squashed = g.activation(&c_new, Activation::Tanh)?;
        let h_new = g.mul(og, &squashed)?;
        Ok((h_new, c_new))
    }
}

/// `4 · (N·(C_in + C_h)·C_h + C_h)`.
pub fn clstm_params(in_channels: usize, hidden: usize, kernel: usize) -> usize {
    4 * (kernel * (in_channels + hidden) * hidden + hidden)
}

/// `3 · ((n + h)·h + h)`.
pub fn gru_params(input: usize, hidden: usize) -> usize {
    3 * ((input + hidden) * hidden + hidden)
}

/// Dense GRU: `z = σ([x; h]W_z + b_z)`, `r = σ([x; h]W_r + b_r)`,
/// `n = tanh([x; r ⊙ h]W_n + b_n)`, `h' = z ⊙ h + (1 − z) ⊙ n`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    pub update: Gate,
    pub reset: Gate,
    pub candidate: Gate,
}

impl GruCell {
    pub fn new<S: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut gate = |label: &str, rng: &mut R| {
            let w = store.add(
                format!("{name}.{label}.weight"),
                glorot(&[input + hidden, hidden], input + hidden, hidden, rng),
            );
            let b = store.add(format!("{name}.{label}.bias"), Tensor::zeros(&[hidden]));
            Gate { w, b }
        };
        let update = gate("update", rng);
        let reset = gate("reset", rng);
        let candidate = gate("candidate", rng);
        Self {
            input,
            hidden,
            update,
            reset,
            candidate,
        }
    }

    pub fn num_params(&self) -> usize {
        gru_params(self.input, self.hidden)
    }

    pub fn state_shape(&self, batch: usize) -> ActShape {
        ActShape::new(batch, 1, 1, self.hidden)
    }

    /// One time step on flattened vectors `(B, 1, 1, n)`.
    pub fn step<S: Real, G: Graph<S>>(
        &self,
        g: &mut G,
        x: &G::Value,
        h: &G::Value,
    ) -> Result<G::Value> {
        let xs = g.shape(x)?;
        if xs.row_len() != self.input || xs.time != 1 {
            return Err(shape_err!(
                "GRU expects input of size {}, got {xs:?}",
                self.input
            ));
        }
        if g.shape(h)? != self.state_shape(xs.batch) {
            return Err(shape_err!(
                "GRU state does not match hidden size {}",
                self.hidden
            ));
        }
        let x = g.reshape(x, ActShape::new(xs.batch, 1, 1, self.input))?;
        let xh = g.concat_channels(&x, h)?;
        let z = g.dense(&xh, self.update.w, Some(self.update.b))?;
        let z = g.activation(&z, Activation::Sigmoid)?;
        let r = g.dense(&xh, self.reset.w, Some(self.reset.b))?;
        let r = g.activation(&r, Activation::Sigmoid)?;
        let rh = g.mul(&r, h)?;
        let xrh = g.concat_channels(&x, &rh)?;
        let n = g.dense(&xrh, self.candidate.w, Some(self.candidate.b))?;
        let n = g.activation(&n, Activation::Tanh)?;
        let keep = g.mul(&z, h)?;
        let one_minus_z = g.one_minus(&z)?;
        let write = g.mul(&one_minus_z, &n)?;
        g.add(&keep, &write)
    }
}

/// State of one recurrent cell.
#[derive(Clone, Debug, PartialEq)]
pub enum CellState<T> {
    Lstm { h: T, c: T },
    Gru { h: T },
}

impl<T> CellState<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> CellState<U> {
        match self {
            CellState::Lstm { h, c } => CellState::Lstm { h: f(h), c: f(c) },
            CellState::Gru { h } => CellState::Gru { h: f(h) },
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<CellState<U>> {
        Ok(match self {
            CellState::Lstm { h, c } => CellState::Lstm { h: f(h)?, c: f(c)? },
            CellState::Gru { h } => CellState::Gru { h: f(h)? },
        })
    }
}

/// Per-session recurrent context carried from frame to frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<S> {
    pub cells: Vec<CellState<Tensor<S>>>,
    /// Structural fingerprint of the owning model.
    pub(crate) owner: u64,
}

impl<S: Real> RecurrentState<S> {
    pub fn new(cells: Vec<CellState<Tensor<S>>>, owner: u64) -> Self {
        Self { cells, owner }
    }

    pub fn reset(&mut self) {
        for cell in &mut self.cells {
            match cell {
                CellState::Lstm { h, c } => {
                    h.fill(S::zero());
                    c.fill(S::zero());
                }
                CellState::Gru { h } => h.fill(S::zero()),
            }
        }
    }

    pub fn owner(&self) -> u64 {
        self.owner
    }

    pub(crate) fn check_owner(&self, owner: u64) -> Result<()> {
        if self.owner != owner {
            return Err(Error::Usage(
                "recurrent state belongs to a different model".into(),
            ));
        }
        Ok(())
    }
}

/// Serializable description of a bottleneck cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "cell", rename_all = "snake_case")]
pub enum RecurrentSpec {
    /// Convolutional LSTM with the given hidden channel count.
    ConvLstm { hidden: usize },
    /// Dense GRU; `hidden: None` keeps the flattened input size.
    Gru { hidden: Option<usize> },
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck::{grad_check, GradCheckConfig, Objective};
    use crate::autodiff::Eval;

    #[test]
    fn clstm_zero_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let cell = ConvLstmCell::new(&mut store, "c", 3, 4, 5, 9, &mut rng);
        for gate in &cell.gates {
            store.get_mut(gate.b).value.fill(0.0);
        }
        let mut g = Eval::new(&store);
        let x = g.constant(Tensor::act_zeros(ActShape::new(2, 1, 9, 3)));
        let h = g.constant(Tensor::act_zeros(cell.state_shape(2)));
        let (h1, c1) = cell.step(&mut g, &x, &h, &h).unwrap();
        assert!(h1.data().iter().all(|&v| v == 0.0));
        assert!(c1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(clstm_params(32, 32, 12) - 4 * 32, 98_304);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let cell = ConvLstmCell::new(&mut store, "c", 32, 32, 12, 33, &mut rng);
        assert_eq!(store.num_elements(), cell.num_params());
        let mut store = ParamStore::<f32>::new();
        let gru = GruCell::new(&mut store, "g", 7, 5, &mut rng);
        assert_eq!(store.num_elements(), gru.num_params());
        assert_eq!(gru.num_params(), 3 * ((7 + 5) * 5 + 5));
    }

    #[test]
    fn gru_zero_weights_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "g", 6, 4, &mut rng);
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
        let mut g = Eval::new(&store);
        let x = g.constant(Tensor::uniform(&[3, 1, 2, 3], 1.0, &mut rng));
        let h = g.constant(Tensor::act_zeros(cell.state_shape(3)));
        let out = cell.step(&mut g, &x, &h).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clstm_converges_under_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let cell = ConvLstmCell::new(&mut store, "c", 2, 3, 3, 6, &mut rng);
        let mut g = Eval::new(&store);
        let x = g.constant(Tensor::uniform(&[1, 1, 6, 2], 1.0, &mut rng));
        let mut h = g.constant(Tensor::act_zeros(cell.state_shape(1)));
        let mut c = h.clone();
        let mut deltas = Vec::new();
        for _ in 0..50 {
            let (h1, c1) = cell.step(&mut g, &x, &h, &c).unwrap();
            let diff: f64 = h1
                .data()
                .iter()
                .zip(h.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            deltas.push(diff.sqrt());
            for &v in h1.data() {
                assert!(v.abs() < 1.0);
            }
            h = h1;
            c = c1;
        }
        // After burn-in the step-to-step change shrinks.
        assert!(deltas[49] < deltas[10]);
        assert!(deltas[40..]
            .windows(2)
            .all(|w| w[1] <= w[0] * 1.0001 + 1e-15));
    }

    struct GruChain {
        cell: GruCell,
        steps: usize,
        proj: Tensor<f64>,
    }

    impl Objective for GruChain {
        fn eval<G: Graph<f64>>(&self, g: &mut G, inputs: &[G::Value]) -> Result<G::Value> {
            let mut h = g.constant(Tensor::act_zeros(self.cell.state_shape(2)));
            let mut outs = Vec::new();
            for t in 0..self.steps {
                let xt = g.select_time(&inputs[0], t)?;
                h = self.cell.step(g, &xt, &h)?;
                outs.push(h.clone());
            }
            let seq = g.stack_time(&outs)?;
            g.weighted_sum(&seq, &self.proj)
        }
    }

    #[test]
    fn gru_bptt_ten_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "g", 6, 4, &mut rng);
        for p in store.iter_mut() {
            p.value = Tensor::uniform(p.value.shape(), 0.6, &mut rng);
        }
        let x = Tensor::uniform(&[2, 10, 3, 2], 1.0, &mut rng);
        let proj = Tensor::uniform(&[2, 10, 1, 4], 1.0, &mut rng);
        let obj = GruChain {
            cell,
            steps: 10,
            proj,
        };
        let r = grad_check(&obj, &mut store, &[x], &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_err < 5e-3, "{r:?}");
    }

    struct ClstmChain {
        cell: ConvLstmCell,
        steps: usize,
        proj: Tensor<f64>,
    }

    impl Objective for ClstmChain {
        fn eval<G: Graph<f64>>(&self, g: &mut G, inputs: &[G::Value]) -> Result<G::Value> {
            let mut h = g.constant(Tensor::act_zeros(self.cell.state_shape(1)));
            let mut c = h.clone();
            let mut outs = Vec::new();
            for t in 0..self.steps {
                let xt = g.select_time(&inputs[0], t)?;
                (h, c) = self.cell.step(g, &xt, &h, &c)?;
                outs.push(h.clone());
            }
            let seq = g.stack_time(&outs)?;
            g.weighted_sum(&seq, &self.proj)
        }
    }

    #[test]
    fn clstm_bptt_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let cell = ConvLstmCell::new(&mut store, "c", 2, 3, 3, 5, &mut rng);
        let x = Tensor::uniform(&[1, 6, 5, 2], 1.0, &mut rng);
        let proj = Tensor::uniform(&[1, 6, 5, 3], 1.0, &mut rng);
        let obj = ClstmChain {
            cell,
            steps: 6,
            proj,
        };
        let r = grad_check(&obj, &mut store, &[x], &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }
}
