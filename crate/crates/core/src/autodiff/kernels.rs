//! Forward and adjoint kernels for the frequency-axis convolutions and the
//! dense and elementwise layers.
//!
//! Convolutions run along the frequency axis only (time kernel size is 1), so
//! every `(batch, time)` row is independent. Rows are laid out in a padded
//! scratch buffer whose row pitch is a multiple of the stride; that lets a
//! single strided GEMM per kernel tap cover every row at once.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, ActShape, Real, Tensor, View};

/// Geometry of a frequency-axis convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, pad_lo: usize, pad_hi: usize) -> Result<Self> {
        if stride < 1 {
            return Err(Error::Config(format!(
                "stride must be positive, got {stride}"
            )));
        }
        if kernel < 1 {
            return Err(Error::Config("kernel size must be positive".into()));
        }
        Ok(Self {
            kernel,
            stride,
            pad_lo,
            pad_hi,
        })
    }

    /// Zero padding so that the output has `ceil(in / stride)` bins.
    ///
    /// Padding is split symmetrically, with the odd element going to the
    /// high-frequency side.
    pub fn same(in_freq: usize, kernel: usize, stride: usize) -> Result<Self> {
        if stride < 1 {
            return Err(Error::Config(format!(
                "stride must be positive, got {stride}"
            )));
        }
        let out = in_freq.div_ceil(stride);
        let total = ((out - 1) * stride + kernel).saturating_sub(in_freq);
        Self::new(kernel, stride, total / 2, total - total / 2)
    }

    pub fn valid(kernel: usize, stride: usize) -> Result<Self> {
        Self::new(kernel, stride, 0, 0)
    }

    pub fn out_len(&self, in_freq: usize) -> Result<usize> {
        let padded = in_freq + self.pad_lo + self.pad_hi;
        if padded < self.kernel {
            return Err(shape_err!(
                "frequency size {in_freq} (padded {padded}) shorter than kernel {}",
                self.kernel
            ));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Output size of the transposed convolution before any extra cropping:
    /// `(in − 1)·stride + kernel`, minus this geometry's padding.
    pub fn transpose_out_len(&self, in_freq: usize) -> Result<usize> {
        let raw = (in_freq - 1) * self.stride + self.kernel;
        raw.checked_sub(self.pad_lo + self.pad_hi)
            .filter(|&n| n > 0)
            .ok_or_else(|| shape_err!("transposed convolution crops more than it produces"))
    }

    /// Scratch layout: padded row pitch is `stride · out_rows`.
    fn layout(&self, in_freq: usize) -> (usize, usize) {
        let padded = in_freq + self.pad_lo + self.pad_hi;
        let out_rows = padded.div_ceil(self.stride);
        (out_rows, out_rows * self.stride)
    }
}

fn kernel_dims<S: Real>(w: &Tensor<S>, geom: &ConvGeometry) -> Result<(usize, usize)> {
    match w.shape()[..] {
        [n, 1, cin, cout] if n == geom.kernel => Ok((cin, cout)),
        _ => Err(shape_err!(
            "kernel {:?} does not match geometry {:?}",
            w.shape(),
            geom
        )),
    }
}

fn bias_len<S: Real>(b: Option<&Tensor<S>>, chan: usize) -> Result<()> {
    match b {
        Some(b) if b.len() != chan => Err(shape_err!(
            "bias has {} entries for {chan} channels",
            b.len()
        )),
        _ => Ok(()),
    }
}

/// Copies activation rows into a zeroed, padded scratch buffer.
fn pad_rows<S: Real>(x: &[S], xs: ActShape, lo: usize, pitch: usize, tail: usize) -> Vec<S> {
    let rows = xs.rows();
    let c = xs.chan;
    let mut xp = vec![S::zero(); (rows * pitch + tail) * c];
    for r in 0..rows {
        let src = &x[r * xs.row_len()..(r + 1) * xs.row_len()];
        let dst = (r * pitch + lo) * c;
        xp[dst..dst + src.len()].copy_from_slice(src);
    }
    xp
}

/// Expands `(rows, out, c)` into the `(rows, out_rows, c)` scratch pitch.
fn spread_rows<S: Real>(dy: &[S], rows: usize, out: usize, out_rows: usize, c: usize) -> Vec<S> {
    let mut dyp = vec![S::zero(); rows * out_rows * c];
    for r in 0..rows {
        dyp[r * out_rows * c..(r * out_rows + out) * c]
            .copy_from_slice(&dy[r * out * c..(r + 1) * out * c]);
    }
    dyp
}

/// `y[r, f, :] = Σ_k x[r, f·S + k − lo, :] · W[k] + b`.
pub fn conv_forward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: ConvGeometry,
) -> Result<Tensor<S>> {
    let xs = x.act()?;
    let (cin, cout) = kernel_dims(w, &geom)?;
    if cin != xs.chan {
        return Err(shape_err!(
            "convolution expects {cin} input channels, got {}",
            xs.chan
        ));
    }
    bias_len(bias, cout)?;
    let fo = geom.out_len(xs.freq)?;
    let (out_rows, pitch) = geom.layout(xs.freq);
    let rows = xs.rows();
    let s = geom.stride;

    let xp = pad_rows(x.data(), xs, geom.pad_lo, pitch, geom.kernel);
    let mut yp = vec![S::zero(); rows * out_rows * cout];
    let m = rows * out_rows;
    let taps = geom.kernel * cin;
    // Rows of A overlap: output bin f reads the contiguous taps·cin window at f·S.
    gemm(
        &xp,
        View::new(0, m, taps, s * cin, 1),
        w.data(),
        View::new(0, taps, cout, cout, 1),
        S::zero(),
        &mut yp,
        View::new(0, m, cout, cout, 1),
    );

    let ys = xs.with_freq(fo).with_chan(cout);
    let mut y = Vec::with_capacity(ys.len());
    for r in 0..rows {
        y.extend_from_slice(&yp[r * out_rows * cout..(r * out_rows + fo) * cout]);
    }
    if let Some(b) = bias {
        add_channel_bias(&mut y, b.data());
    }
    Tensor::act_from_vec(ys, y)
}

/// Adjoint of [`conv_forward`] with respect to its input: maps a
/// `(rows, out, cout)` tensor back to `(rows, in_freq, cin)`.
pub fn conv_backward_input<S: Real>(
    dy: &Tensor<S>,
    w: &Tensor<S>,
    geom: ConvGeometry,
    in_freq: usize,
) -> Result<Tensor<S>> {
    let ds = dy.act()?;
    let (cin, cout) = kernel_dims(w, &geom)?;
    if cout != ds.chan {
        return Err(shape_err!(
            "adjoint expects {cout} channels, got {}",
            ds.chan
        ));
    }
    let fo = geom.out_len(in_freq)?;
    if fo != ds.freq {
        return Err(shape_err!(
            "adjoint of {in_freq}-bin convolution expects {fo} bins, got {}",
            ds.freq
        ));
    }
    let (out_rows, pitch) = geom.layout(in_freq);
    let rows = ds.rows();
    let s = geom.stride;

    let dyp = spread_rows(dy.data(), rows, fo, out_rows, cout);
    let mut dxp = vec![S::zero(); (rows * pitch + geom.kernel) * cin];
    let m = rows * out_rows;
    for k in 0..geom.kernel {
        gemm(
            &dyp,
            View::new(0, m, cout, cout, 1),
            w.data(),
            View::new(k * cin * cout, cin, cout, cout, 1).transposed(),
            S::one(),
            &mut dxp,
            View::new(k * cin, m, cin, s * cin, 1),
        );
    }

    let xs = ds.with_freq(in_freq).with_chan(cin);
    let mut dx = Vec::with_capacity(xs.len());
    for r in 0..rows {
        let start = (r * pitch + geom.pad_lo) * cin;
        dx.extend_from_slice(&dxp[start..start + in_freq * cin]);
    }
    Tensor::act_from_vec(xs, dx)
}

/// Gradient of [`conv_forward`] with respect to the kernel.
pub fn conv_backward_weight<S: Real>(
    x: &Tensor<S>,
    dy: &Tensor<S>,
    geom: ConvGeometry,
) -> Result<Tensor<S>> {
    let xs = x.act()?;
    let ds = dy.act()?;
    let fo = geom.out_len(xs.freq)?;
    if ds.freq != fo || ds.rows() != xs.rows() {
        return Err(shape_err!(
            "weight gradient: input {xs:?} does not match output {ds:?}"
        ));
    }
    let (cin, cout) = (xs.chan, ds.chan);
    let (out_rows, pitch) = geom.layout(xs.freq);
    let rows = xs.rows();
    let s = geom.stride;

    let xp = pad_rows(x.data(), xs, geom.pad_lo, pitch, geom.kernel);
    let dyp = spread_rows(dy.data(), rows, fo, out_rows, cout);
    let mut dw = vec![S::zero(); geom.kernel * cin * cout];
    let m = rows * out_rows;
    let taps = geom.kernel * cin;
    gemm(
        &xp,
        View::new(0, m, taps, s * cin, 1).transposed(),
        &dyp,
        View::new(0, m, cout, cout, 1),
        S::zero(),
        &mut dw,
        View::new(0, taps, cout, cout, 1),
    );
    Tensor::from_vec(&[geom.kernel, 1, cin, cout], dw)
}

/// Transposed convolution. The kernel is stored `(N, 1, C_out, C_in)`, i.e.
/// in the layout of the forward convolution it is the adjoint of.
pub fn conv_transpose_forward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: ConvGeometry,
    out_freq: usize,
) -> Result<Tensor<S>> {
    let (cout, _) = kernel_dims(w, &geom)?;
    bias_len(bias, cout)?;
    let mut y = conv_backward_input(x, w, geom, out_freq)?;
    if let Some(b) = bias {
        add_channel_bias(y.data_mut(), b.data());
    }
    Ok(y)
}

pub fn bias_grad<S: Real>(dy: &Tensor<S>) -> Result<Tensor<S>> {
    let c = dy.act()?.chan;
    let mut g = vec![S::zero(); c];
    for chunk in dy.data().chunks_exact(c) {
        for (a, &v) in g.iter_mut().zip(chunk) {
            *a += v;
        }
    }
    Tensor::from_vec(&[c], g)
}

fn add_channel_bias<S: Real>(y: &mut [S], b: &[S]) {
    for chunk in y.chunks_exact_mut(b.len()) {
        for (v, &bb) in chunk.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

/// Per-channel scale and shift.
pub fn depthwise_forward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let c = x.act()?.chan;
    if w.len() != c {
        return Err(shape_err!(
            "depthwise weights have {} entries for {c} channels",
            w.len()
        ));
    }
    bias_len(b, c)?;
    let mut y = x.clone();
    for chunk in y.data_mut().chunks_exact_mut(c) {
        for (i, v) in chunk.iter_mut().enumerate() {
            *v *= w.data()[i];
            if let Some(b) = b {
                *v += b.data()[i];
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, dw)`.
pub fn depthwise_backward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let c = w.len();
    let mut dx = dy.clone();
    let mut dw = vec![S::zero(); c];
    for (dchunk, xchunk) in dx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(x.data().chunks_exact(c))
    {
        for i in 0..c {
            dw[i] += xchunk[i] * dchunk[i];
            dchunk[i] *= w.data()[i];
        }
    }
    Ok((dx, Tensor::from_vec(&[c], dw)?))
}

fn dense_dims<S: Real>(x: &Tensor<S>, w: &Tensor<S>) -> Result<(usize, usize, usize)> {
    let xs = x.act()?;
    match w.shape()[..] {
        [n, h] if n == xs.row_len() => Ok((xs.rows(), n, h)),
        _ => Err(shape_err!(
            "dense weights {:?} do not accept rows of {}",
            w.shape(),
            xs.row_len()
        )),
    }
}

/// Fully connected layer over the flattened `freq × chan` row.
/// The output has shape `(batch, time, 1, hidden)`.
pub fn dense_forward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let (rows, n, h) = dense_dims(x, w)?;
    bias_len(b, h)?;
    let mut y = vec![S::zero(); rows * h];
    gemm(
        x.data(),
        View::new(0, rows, n, n, 1),
        w.data(),
        View::new(0, n, h, h, 1),
        S::zero(),
        &mut y,
        View::new(0, rows, h, h, 1),
    );
    if let Some(b) = b {
        add_channel_bias(&mut y, b.data());
    }
    let xs = x.act()?;
    Tensor::act_from_vec(ActShape::new(xs.batch, xs.time, 1, h), y)
}

/// Returns `(dx, dw)`.
pub fn dense_backward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (rows, n, h) = dense_dims(x, w)?;
    let mut dx = vec![S::zero(); rows * n];
    gemm(
        dy.data(),
        View::new(0, rows, h, h, 1),
        w.data(),
        View::new(0, n, h, h, 1).transposed(),
        S::zero(),
        &mut dx,
        View::new(0, rows, n, n, 1),
    );
    let mut dw = vec![S::zero(); n * h];
    gemm(
        x.data(),
        View::new(0, rows, n, n, 1).transposed(),
        dy.data(),
        View::new(0, rows, h, h, 1),
        S::zero(),
        &mut dw,
        View::new(0, n, h, h, 1),
    );
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(&[n, h], dw)?,
    ))
}

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f32 },
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn apply<S: Real>(self, v: S) -> S {
        match self {
            Activation::LeakyRelu { slope } => {
                if v > S::zero() {
                    v
                } else {
                    v * S::lit(slope as f64)
                }
            }
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => S::one() / (S::one() + (-v).exp()),
            Activation::Linear => v,
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    pub fn derivative<S: Real>(self, x: S, y: S) -> S {
        match self {
            Activation::LeakyRelu { slope } => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::lit(slope as f64)
                }
            }
            Activation::Tanh => S::one() - y * y,
            Activation::Sigmoid => y * (S::one() - y),
            Activation::Linear => S::one(),
        }
    }

    pub fn is_linear(self) -> bool {
        matches!(self, Activation::Linear)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Direct sliding dot product, used as the reference for the GEMM path.
    fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, geom: ConvGeometry) -> Tensor<f64> {
        let xs = x.act().unwrap();
        let (cin, cout) = (w.shape()[2], w.shape()[3]);
        let fo = geom.out_len(xs.freq).unwrap();
        let mut y = Tensor::act_zeros(xs.with_freq(fo).with_chan(cout));
        for r in 0..xs.rows() {
            for f in 0..fo {
                for k in 0..geom.kernel {
                    let i = (f * geom.stride + k) as isize - geom.pad_lo as isize;
                    if i < 0 || i >= xs.freq as isize {
                        continue;
                    }
                    for ci in 0..cin {
                        let xv = x.data()[(r * xs.freq + i as usize) * cin + ci];
                        for co in 0..cout {
                            y.data_mut()[(r * fo + f) * cout + co] +=
                                xv * w.data()[(k * cin + ci) * cout + co];
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn ramp_stride_two_no_pad() {
        let x = Tensor::<f32>::act_from_vec(
            ActShape::new(1, 1, 8, 1),
            (0..8).map(|v| v as f32).collect(),
        )
        .unwrap();
        let w = Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 1.0]).unwrap();
        let y = conv_forward(&x, &w, None, ConvGeometry::valid(2, 2).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 1]);
        assert_eq!(y.data(), &[1.0, 5.0, 9.0, 13.0]);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = Tensor::<f32>::act_from_vec(
            ActShape::new(1, 1, 6, 1),
            vec![3.0, -1.0, 2.0, 7.0, 0.5, 1.0],
        )
        .unwrap();
        let w = Tensor::zeros(&[3, 1, 1, 2]);
        let b = Tensor::from_vec(&[2], vec![0.25, -4.0]).unwrap();
        for stride in 1..=3 {
            let y =
                conv_forward(&x, &w, Some(&b), ConvGeometry::same(6, 3, stride).unwrap()).unwrap();
            for pair in y.data().chunks(2) {
                assert_eq!(pair, &[0.25, -4.0]);
            }
        }
    }

    #[test]
    fn same_padding_shapes() {
        // 264 bins, N = 12, 32 filters, stride 1.
        let x = Tensor::<f32>::act_zeros(ActShape::new(1, 1, 264, 2));
        let w = Tensor::zeros(&[12, 1, 2, 32]);
        let y = conv_forward(&x, &w, None, ConvGeometry::same(264, 12, 1).unwrap()).unwrap();
        assert_eq!(y.act().unwrap(), ActShape::new(1, 1, 264, 32));
        let g = ConvGeometry::same(264, 12, 2).unwrap();
        assert_eq!((g.pad_lo, g.pad_hi), (5, 5));
        assert_eq!(g.out_len(264).unwrap(), 132);
        // Odd total padding puts the extra element on the high side.
        let g = ConvGeometry::same(10, 4, 1).unwrap();
        assert_eq!((g.pad_lo, g.pad_hi), (1, 2));
    }

    #[test]
    fn transposed_raw_length() {
        let g = ConvGeometry::valid(12, 2).unwrap();
        assert_eq!(g.transpose_out_len(33).unwrap(), 76);
        let g = ConvGeometry::same(66, 12, 2).unwrap();
        assert_eq!(g.transpose_out_len(33).unwrap(), 66);
    }

    #[test]
    fn stride_validation() {
        assert!(matches!(
            ConvGeometry::new(3, 0, 0, 0),
            Err(Error::Config(_))
        ));
        let x = Tensor::<f32>::act_zeros(ActShape::new(1, 1, 8, 3));
        let w = Tensor::zeros(&[3, 1, 2, 4]);
        assert!(matches!(
            conv_forward(&x, &w, None, ConvGeometry::same(8, 3, 1).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn gemm_path_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(freq, n, stride, cin, cout) in &[
            (9, 4, 1, 3, 5),
            (18, 4, 2, 2, 3),
            (33, 12, 1, 4, 2),
            (66, 12, 2, 3, 3),
            (7, 3, 3, 1, 1),
        ] {
            let x = Tensor::<f64>::uniform(&[2, 3, freq, cin], 1.0, &mut rng);
            let w = Tensor::<f64>::uniform(&[n, 1, cin, cout], 1.0, &mut rng);
            for geom in [
                ConvGeometry::same(freq, n, stride).unwrap(),
                ConvGeometry::valid(n, stride).unwrap(),
            ] {
                if geom.out_len(freq).is_err() {
                    continue;
                }
                let y = conv_forward(&x, &w, None, geom).unwrap();
                assert!(y.rel_err(&conv_reference(&x, &w, geom)) < 1e-12, "{geom:?}");
            }
        }
    }

    #[test]
    fn depthwise_per_channel() {
        let x = Tensor::<f32>::act_from_vec(ActShape::new(1, 1, 4, 2), vec![1.0; 8]).unwrap();
        let w = Tensor::from_vec(&[2], vec![2.0, -1.0]).unwrap();
        let y = depthwise_forward(&x, &w, None).unwrap();
        assert_eq!(y.data(), &[2.0, -1.0, 2.0, -1.0, 2.0, -1.0, 2.0, -1.0]);
        let ones = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let zero = Tensor::zeros(&[2]);
        assert_eq!(depthwise_forward(&x, &ones, Some(&zero)).unwrap(), x);
        assert!(depthwise_forward(&x, &Tensor::zeros(&[3]), None).is_err());
    }

    #[test]
    fn activations() {
        let leaky = Activation::LeakyRelu { slope: 0.2 };
        assert!((leaky.apply(-1.0f64) + 0.2).abs() < 1e-7);
        assert_eq!(leaky.apply(3.0f64), 3.0);
        assert_eq!(Activation::Tanh.apply(0.0f64), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::Linear.apply(-7.5f64), -7.5);
        assert_eq!(Activation::Sigmoid.apply(-1e4f32), 0.0);
        assert_eq!(Activation::Sigmoid.apply(1e4f32), 1.0);
    }
}
