//! STFT analysis and overlap-add synthesis with square-root Hann windows.
//!
//! Spectra are `(1, L, K/2 + 1, 2)` tensors holding `(Re, Im)` per bin.
//! Transforms run in double precision whatever the output type.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ActShape, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameConfig {
    pub dft_size: usize,
    pub shift: usize,
    pub sample_rate: u32,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            dft_size: 512,
            shift: 256,
            sample_rate: 16_000,
        }
    }
}

impl FrameConfig {
    pub fn bins(&self) -> usize {
        self.dft_size / 2 + 1
    }

    /// Periodic square-root Hann window. Its square sums to one at 50%
    /// overlap, so the same window serves analysis and synthesis.
    pub fn window(&self) -> Vec<f64> {
        let k = self.dft_size as f64;
        (0..self.dft_size)
            .map(|n| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / k).cos()).sqrt())
            .collect()
    }

    /// Frames needed to cover `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        if len <= self.dft_size {
            1
        } else {
            (len - self.dft_size).div_ceil(self.shift) + 1
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dft_size < 2
            || self.dft_size % 2 != 0
            || self.shift == 0
            || self.shift > self.dft_size
        {
            return Err(Error::Config(format!("invalid framing {self:?}")));
        }
        Ok(())
    }
}

/// Windowed forward and inverse DFTs of one frame.
pub struct FrameTransform {
    cfg: FrameConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    buf: Vec<Complex<f64>>,
}

impl FrameTransform {
    pub fn new(cfg: FrameConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: cfg.window(),
            forward: planner.plan_fft_forward(cfg.dft_size),
            inverse: planner.plan_fft_inverse(cfg.dft_size),
            buf: vec![Complex::default(); cfg.dft_size],
            cfg,
        })
    }

    pub fn config(&self) -> FrameConfig {
        self.cfg
    }

    /// Windows `frame` (K samples) and writes `K/2 + 1` interleaved
    /// `(Re, Im)` pairs into `out`.
    pub fn analyze(&mut self, frame: &[f64], out: &mut [f64]) {
        debug_assert_eq!(frame.len(), self.cfg.dft_size);
        for ((b, &x), &w) in self.buf.iter_mut().zip(frame).zip(&self.window) {
            *b = Complex::new(x * w, 0.0);
        }
        self.forward.process(&mut self.buf);
        for (k, pair) in out.chunks_exact_mut(2).take(self.cfg.bins()).enumerate() {
            pair[0] = self.buf[k].re;
            pair[1] = self.buf[k].im;
        }
    }

    /// Inverse of [`FrameTransform::analyze`] up to the synthesis window:
    /// extends the half spectrum conjugate-symmetrically, inverts, windows.
    pub fn synthesize(&mut self, spec: &[f64], out: &mut [f64]) {
        let k = self.cfg.dft_size;
        let bins = self.cfg.bins();
        for b in 0..bins {
            self.buf[b] = Complex::new(spec[2 * b], spec[2 * b + 1]);
        }
        // DC and Nyquist of a real signal are real.
        self.buf[0].im = 0.0;
        self.buf[bins - 1].im = 0.0;
        for b in bins..k {
            self.buf[b] = self.buf[k - b].conj();
        }
        self.inverse.process(&mut self.buf);
        let scale = 1.0 / k as f64;
        for ((o, b), &w) in out.iter_mut().zip(&self.buf).zip(&self.window) {
            *o = b.re * scale * w;
        }
    }
}

/// Frame `ℓ` covers samples `ℓR .. ℓR + K`, zero-padded past the end.
pub fn stft<S: Real>(signal: &[f64], cfg: FrameConfig) -> Result<Tensor<S>> {
    if signal.is_empty() {
        return Err(Error::Usage("cannot analyze an empty signal".into()));
    }
    let mut tr = FrameTransform::new(cfg)?;
    let frames = cfg.frames_for(signal.len());
    let bins = cfg.bins();
    let mut frame = vec![0.0; cfg.dft_size];
    let mut out = vec![0.0; frames * bins * 2];
    for (l, dst) in out.chunks_exact_mut(bins * 2).enumerate() {
        let start = l * cfg.shift;
        let end = (start + cfg.dft_size).min(signal.len());
        frame.fill(0.0);
        frame[..end - start].copy_from_slice(&signal[start..end]);
        tr.analyze(&frame, dst);
    }
    Tensor::act_from_vec(
        ActShape::new(1, frames, bins, 2),
        out.into_iter().map(S::lit).collect(),
    )
}

/// Overlap-adds every frame; the result has `(L − 1)·R + K` samples.
pub fn istft<S: Real>(spec: &Tensor<S>, cfg: FrameConfig) -> Result<Vec<f64>> {
    let s = spec.act()?;
    if s.batch != 1 || s.freq != cfg.bins() || s.chan != 2 {
        return Err(shape_err!(
            "expected (1, L, {}, 2) spectra, got {s:?}",
            cfg.bins()
        ));
    }
    let mut tr = FrameTransform::new(cfg)?;
    let mut out = vec![0.0; (s.time - 1) * cfg.shift + cfg.dft_size];
    let mut frame = vec![0.0; cfg.dft_size];
    let mut half = vec![0.0; s.row_len()];
    for (l, src) in spec.data().chunks_exact(s.row_len()).enumerate() {
        for (h, v) in half.iter_mut().zip(src) {
            *h = v.to_f64().unwrap_or(0.0);
        }
        tr.synthesize(&half, &mut frame);
        for (o, f) in out[l * cfg.shift..].iter_mut().zip(&frame) {
            *o += f;
        }
    }
    Ok(out)
}

/// Streaming analysis: each hop of `R` samples yields the frame ending with
/// that hop.
pub struct StreamAnalyzer {
    tr: FrameTransform,
    history: Vec<f64>,
}

impl StreamAnalyzer {
    pub fn new(cfg: FrameConfig) -> Result<Self> {
        Ok(Self {
            history: vec![0.0; cfg.dft_size],
            tr: FrameTransform::new(cfg)?,
        })
    }

    pub fn push(&mut self, hop: &[f64], out: &mut [f64]) -> Result<()> {
        let r = self.tr.cfg.shift;
        if hop.len() != r {
            return Err(shape_err!(
                "expected a hop of {r} samples, got {}",
                hop.len()
            ));
        }
        self.history.copy_within(r.., 0);
        let k = self.history.len();
        self.history[k - r..].copy_from_slice(hop);
        self.tr.analyze(&self.history, out);
        Ok(())
    }

    pub fn reset(&mut self) {
        self.history.fill(0.0);
    }
}

/// Streaming overlap-add: each frame completes one hop of output.
pub struct StreamSynthesizer {
    tr: FrameTransform,
    acc: Vec<f64>,
    frame: Vec<f64>,
}

impl StreamSynthesizer {
    pub fn new(cfg: FrameConfig) -> Result<Self> {
        Ok(Self {
            acc: vec![0.0; cfg.dft_size],
            frame: vec![0.0; cfg.dft_size],
            tr: FrameTransform::new(cfg)?,
        })
    }

    pub fn push(&mut self, spec: &[f64], out: &mut [f64]) {
        let r = self.tr.cfg.shift;
        self.tr.synthesize(spec, &mut self.frame);
        for (a, f) in self.acc.iter_mut().zip(&self.frame) {
            *a += f;
        }
        out[..r].copy_from_slice(&self.acc[..r]);
        self.acc.copy_within(r.., 0);
        let k = self.acc.len();
        self.acc[k - r..].fill(0.0);
    }

    pub fn reset(&mut self) {
        self.acc.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cfg() -> FrameConfig {
        FrameConfig::default()
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn interior_err(x: &[f64], y: &[f64]) -> f64 {
        let edge = cfg().dft_size - cfg().shift;
        let range = edge..x.len() - edge;
        let num: f64 = range.clone().map(|i| (x[i] - y[i]).powi(2)).sum();
        let den: f64 = range.map(|i| x[i].powi(2)).sum();
        (num / den).sqrt()
    }

    #[test]
    fn window_is_cola() {
        let w = cfg().window();
        for n in 0..256 {
            assert!((w[n] * w[n] + w[n + 256] * w[n + 256] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bin_centred_cosine() {
        let f = 16_000.0 * 32.0 / 512.0;
        let x: Vec<f64> = (0..2048)
            .map(|n| (2.0 * std::f64::consts::PI * f * n as f64 / 16_000.0).cos())
            .collect();
        let s = stft::<f64>(&x, cfg()).unwrap();
        let row = &s.data()[2 * 257 * 2..3 * 257 * 2];
        let power = |k: usize| row[2 * k].powi(2) + row[2 * k + 1].powi(2);
        let total: f64 = (0..257).map(power).sum();
        // A sqrt-Hann window leaks into the neighbouring bins; the peak must
        // dominate and the main lobe must hold essentially all the energy.
        let lobe: f64 = (31..=33).map(power).sum();
        assert!(lobe / total > 0.99, "{}", lobe / total);
        assert!((0..257).all(|k| power(k) <= power(32)));
    }

    #[test]
    fn zero_in_zero_out() {
        let s = stft::<f64>(&vec![0.0; 1000], cfg()).unwrap();
        assert_eq!(s.max_abs(), 0.0);
        assert!(istft(&s, cfg()).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(stft::<f64>(&[], cfg()), Err(Error::Usage(_))));
    }

    #[test]
    fn parseval() {
        let x = noise(512, 4);
        let s = stft::<f64>(&x, cfg()).unwrap();
        let w = cfg().window();
        let time: f64 = x.iter().zip(&w).map(|(a, b)| (a * b).powi(2)).sum();
        let d = s.data();
        let freq: f64 = (0..257)
            .map(|k| {
                let p = d[2 * k].powi(2) + d[2 * k + 1].powi(2);
                if k == 0 || k == 256 {
                    p
                } else {
                    2.0 * p
                }
            })
            .sum::<f64>()
            / 512.0;
        assert!((time - freq).abs() / time < 1e-6);
    }

    #[test]
    fn istft_is_linear() {
        let a = stft::<f64>(&noise(3000, 1), cfg()).unwrap();
        let b = stft::<f64>(&noise(3000, 2), cfg()).unwrap();
        let mix = a.zip_map(&b, |x, y| 2.0 * x - 0.5 * y).unwrap();
        let lhs = istft(&mix, cfg()).unwrap();
        let (ra, rb) = (istft(&a, cfg()).unwrap(), istft(&b, cfg()).unwrap());
        for i in 0..lhs.len() {
            assert!((lhs[i] - (2.0 * ra[i] - 0.5 * rb[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn streaming_matches_offline_with_one_hop_delay() {
        let c = cfg();
        let x = noise(256 * 20, 5);
        let offline = istft(&stft::<f64>(&x, c).unwrap(), c).unwrap();
        let mut an = StreamAnalyzer::new(c).unwrap();
        let mut syn = StreamSynthesizer::new(c).unwrap();
        let mut spec = vec![0.0; 514];
        let mut hop = vec![0.0; 256];
        let mut out = Vec::new();
        for chunk in x.chunks(256) {
            an.push(chunk, &mut spec).unwrap();
            syn.push(&spec, &mut hop);
            out.extend_from_slice(&hop);
        }
        // The streaming path lags by K − R samples.
        for i in 512..x.len() - 256 {
            assert!((out[i] - x[i - 256]).abs() < 1e-9, "{i}");
            assert!((offline[i] - x[i]).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip(seed in any::<u64>(), len in 1024usize..8000) {
            let x = noise(len, seed);
            let y = istft(&stft::<f64>(&x, cfg()).unwrap(), cfg()).unwrap();
            prop_assert!(interior_err(&x, &y) < 1e-6);
        }
    }
}
