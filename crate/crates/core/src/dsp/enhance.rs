//! Frame-by-frame enhancement with carried recurrent state.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use super::mask::bound_and_apply_mask;
use super::stft::{FrameConfig, StreamAnalyzer, StreamSynthesizer};
use super::wav::{open_samples, WavWriter};
use crate::error::{shape_err, Result};
use crate::recurrent::RecurrentState;
use crate::tensor::{ActShape, Tensor};
use crate::topology::Model;

/// Frames skipped before timing starts.
pub const WARMUP_FRAMES: usize = 10;

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct EnhanceStats {
    pub frames: usize,
    /// Mean wall-clock time per frame after warm-up.
    pub ms_per_frame: f64,
    /// Processing time over audio time; below one is faster than real time.
    pub real_time_factor: f64,
}

/// Streaming enhancer: consumes hops of `R` samples and emits hops of `R`
/// samples, `K − R` samples late.
pub struct Enhancer<'m> {
    model: &'m Model<f32>,
    state: RecurrentState<f32>,
    cfg: FrameConfig,
    analyzer: StreamAnalyzer,
    synthesizer: StreamSynthesizer,
    spec: Vec<f64>,
    frames: usize,
    total_seconds: f64,
    steady_seconds: f64,
}

impl<'m> Enhancer<'m> {
    pub fn new(model: &'m Model<f32>, cfg: FrameConfig) -> Result<Self> {
        if cfg.bins() != model.spec().spectrum_bins {
            return Err(shape_err!(
                "framing gives {} bins, model takes {}",
                cfg.bins(),
                model.spec().spectrum_bins
            ));
        }
        Ok(Self {
            state: model.zero_state(1),
            analyzer: StreamAnalyzer::new(cfg)?,
            synthesizer: StreamSynthesizer::new(cfg)?,
            spec: vec![0.0; 2 * cfg.bins()],
            frames: 0,
            total_seconds: 0.0,
            steady_seconds: 0.0,
            model,
            cfg,
        })
    }

    /// Samples between an input sample and its enhanced counterpart.
    pub fn latency(&self) -> usize {
        self.cfg.dft_size - self.cfg.shift
    }

    pub fn process_hop(&mut self, hop: &[f32], out: &mut [f32]) -> Result<()> {
        let start = Instant::now();
        let hop64: Vec<f64> = hop.iter().map(|&v| f64::from(v)).collect();
        self.analyzer.push(&hop64, &mut self.spec)?;
        let shape = ActShape::new(1, 1, self.cfg.bins(), 2);
        let noisy = Tensor::act_from_vec(shape, self.spec.iter().map(|&v| v as f32).collect())?;
        let mask = self.model.forward_frame(&noisy, &mut self.state)?;
        let est = bound_and_apply_mask(&mask, &noisy)?;
        for (s, &e) in self.spec.iter_mut().zip(est.data()) {
            *s = f64::from(e);
        }
        let mut out64 = vec![0.0; self.cfg.shift];
        self.synthesizer.push(&self.spec, &mut out64);
        for (o, v) in out.iter_mut().zip(&out64) {
            *o = *v as f32;
        }
        let seconds = start.elapsed().as_secs_f64();
        self.frames += 1;
        self.total_seconds += seconds;
        if self.frames > WARMUP_FRAMES {
            self.steady_seconds += seconds;
        }
        Ok(())
    }

    /// Enhances a whole signal through the streaming path and removes the
    /// latency, so the output aligns with `signal`.
    pub fn run(&mut self, signal: &[f32]) -> Result<Vec<f32>> {
        let r = self.cfg.shift;
        let lat = self.latency();
        let mut padded = signal.to_vec();
        padded.resize((signal.len() + lat).div_ceil(r) * r, 0.0);
        let mut out = vec![0.0f32; padded.len()];
        for (hop, dst) in padded.chunks_exact(r).zip(out.chunks_exact_mut(r)) {
            self.process_hop(hop, dst)?;
        }
        out.drain(..lat);
        out.truncate(signal.len());
        Ok(out)
    }

    pub fn stats(&self) -> EnhanceStats {
        let mean = match self.frames {
            0 => 0.0,
            n if n > WARMUP_FRAMES => self.steady_seconds / (n - WARMUP_FRAMES) as f64,
            n => self.total_seconds / n as f64,
        };
        let hop_seconds = self.cfg.shift as f64 / f64::from(self.cfg.sample_rate);
        EnhanceStats {
            frames: self.frames,
            ms_per_frame: mean * 1e3,
            real_time_factor: mean / hop_seconds,
        }
    }

    pub fn reset(&mut self) {
        self.state.reset();
        self.analyzer.reset();
        self.synthesizer.reset();
        self.frames = 0;
        self.total_seconds = 0.0;
        self.steady_seconds = 0.0;
    }
}

/// Enhances `input` into `output` hop by hop, holding one hop of samples at
/// a time. The output has the input's length and sample format.
pub fn enhance_file(model: &Model<f32>, input: &Path, output: &Path) -> Result<EnhanceStats> {
    let (samples, format, len) = open_samples(input)?;
    let mut enhancer = Enhancer::new(model, FrameConfig::default())?;
    let r = enhancer.cfg.shift;
    let mut writer = WavWriter::new(output, format)?;
    let mut skip = enhancer.latency();
    let mut remaining = len;
    let mut hop = vec![0.0f32; r];
    let mut out = vec![0.0f32; r];
    let mut samples = samples.fuse();
    while remaining > 0 {
        for h in &mut hop {
            *h = samples.next().transpose()?.unwrap_or(0.0);
        }
        enhancer.process_hop(&hop, &mut out)?;
        let from = skip.min(r);
        skip -= from;
        let take = (r - from).min(remaining);
        writer.write(&out[from..from + take])?;
        remaining -= take;
    }
    writer.finalize()?;
    Ok(enhancer.stats())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::wav::{read_wav, write_wav, WavFormat};
    use crate::topology::{Overrides, Variant};

    #[test]
    fn silence_stays_silent() {
        let model = Model::from_variant(&Variant::EffCrn23Lite, &Overrides::default(), 1).unwrap();
        let mut e = Enhancer::new(&model, FrameConfig::default()).unwrap();
        let out = e.run(&vec![0.0; 4000]).unwrap();
        assert_eq!(out.len(), 4000);
        assert!(out.iter().all(|&v| v == 0.0));
        assert_eq!(e.stats().frames, (4000usize + 256).div_ceil(256));
    }

    #[test]
    fn output_never_exceeds_input_energy_per_bin() {
        // |G'| ≤ 1, so the enhanced signal cannot carry more energy than the
        // noisy one beyond window-edge effects.
        let model = Model::from_variant(&Variant::EffCrn23Lite, &Overrides::default(), 2).unwrap();
        let mut e = Enhancer::new(&model, FrameConfig::default()).unwrap();
        let x: Vec<f32> = (0..8000).map(|n| (n as f32 * 0.05).sin() * 0.3).collect();
        let y = e.run(&x).unwrap();
        let ex: f32 = x.iter().map(|v| v * v).sum();
        let ey: f32 = y.iter().map(|v| v * v).sum();
        assert!(ey <= ex * 1.01, "{ey} > {ex}");
    }

    #[test]
    fn file_path_matches_in_memory_path() {
        let model = Model::from_variant(&Variant::EffCrn23Lite, &Overrides::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let x: Vec<f32> = (0..5000).map(|n| (n as f32 * 0.031).sin() * 0.4).collect();
        let (a, b) = (dir.path().join("in.wav"), dir.path().join("out.wav"));
        write_wav(&a, &x, WavFormat::Float32).unwrap();
        let stats = enhance_file(&model, &a, &b).unwrap();
        let y = read_wav(&b).unwrap();
        let expected = Enhancer::new(&model, FrameConfig::default())
            .unwrap()
            .run(&x)
            .unwrap();
        assert_eq!(y, expected);
        assert_eq!(stats.frames, (5000usize + 256).div_ceil(256));
    }
}
