//! Synthetic stand-in corpus: voiced harmonic "syllables" separated by
//! pauses, against spectrally shaped noise.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::wav::{write_wav, WavFormat, SAMPLE_RATE};
use crate::error::Result;

pub const SNR_CYCLE: [f64; 3] = [0.0, 5.0, 10.0];

#[derive(Clone, Debug)]
pub struct SynthUtterance {
    pub id: String,
    pub clean: Vec<f64>,
    pub noise: Vec<f64>,
    pub snr_db: f64,
}

/// Harmonic tone bursts with raised-cosine edges and silent gaps.
pub fn tone_speech<R: Rng>(samples: usize, rng: &mut R) -> Vec<f64> {
    let fs = f64::from(SAMPLE_RATE);
    let mut out = vec![0.0; samples];
    let mut pos = rng.gen_range(0..(fs * 0.1) as usize);
    while pos < samples {
        let len = rng
            .gen_range((0.15 * fs) as usize..(0.35 * fs) as usize)
            .min(samples - pos);
        let f0 = rng.gen_range(110.0..260.0);
        let glide = rng.gen_range(-0.3..0.3);
        let harmonics = rng.gen_range(4..10);
        let amp = rng.gen_range(0.3..1.0);
        let ramp = (0.02 * fs) as usize;
        let mut phase = vec![0.0f64; harmonics];
        for i in 0..len {
            let t = i as f64 / len as f64;
            let f = f0 * (1.0 + glide * (t - 0.5));
            let edge = ((i.min(len - 1 - i)) as f64 / ramp as f64).min(1.0);
            let env = amp * 0.5 * (1.0 - (PI * edge).cos());
            let mut v = 0.0;
            for (k, ph) in phase.iter_mut().enumerate() {
                let fk = f * (k + 1) as f64;
                if fk < fs / 2.0 - 200.0 {
                    *ph += 2.0 * PI * fk / fs;
                    v += ph.sin() / (k + 1) as f64;
                }
            }
            out[pos + i] = env * v;
        }
        pos += len + rng.gen_range((0.05 * fs) as usize..(0.2 * fs) as usize);
    }
    out
}

/// Gaussian noise through a one-pole filter; `pole` near one gives a
/// low-frequency tilt, negative values a high-frequency one.
pub fn shaped_noise<R: Rng>(samples: usize, pole: f64, rng: &mut R) -> Vec<f64> {
    let mut y = 0.0;
    (0..samples)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            y = pole * y + (1.0 - pole.abs()) * w;
            y
        })
        .collect()
}

/// `count` utterances of `seconds` each; SNRs cycle through 0, 5, 10 dB.
pub fn generate(count: usize, seconds: f64, seed: u64) -> Vec<SynthUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (seconds * f64::from(SAMPLE_RATE)).round() as usize;
    (0..count)
        .map(|i| {
            let clean = tone_speech(samples, &mut rng);
            let pole = [0.0, 0.7, 0.95, -0.5][i % 4];
            let noise = shaped_noise(samples + 4096, pole, &mut rng);
            SynthUtterance {
                id: format!("utt{i:03}"),
                clean,
                noise,
                snr_db: SNR_CYCLE[i % SNR_CYCLE.len()],
            }
        })
        .collect()
}

/// Writes `clean/`, `noise/` and a `manifest.txt`. The last `val` utterances
/// go to the validation split.
pub fn write_corpus(dir: &Path, utts: &[SynthUtterance], val: usize) -> Result<()> {
    fs::create_dir_all(dir.join("clean"))?;
    fs::create_dir_all(dir.join("noise"))?;
    let mut manifest = fs::File::create(dir.join("manifest.txt"))?;
    writeln!(manifest, "# clean noise snr_db split")?;
    for (i, u) in utts.iter().enumerate() {
        let to_f32 = |x: &[f64]| x.iter().map(|&v| v as f32).collect::<Vec<_>>();
        let clean = format!("clean/{}.wav", u.id);
        let noise = format!("noise/{}.wav", u.id);
        write_wav(&dir.join(&clean), &to_f32(&u.clean), WavFormat::Float32)?;
        write_wav(&dir.join(&noise), &to_f32(&u.noise), WavFormat::Float32)?;
        let split = if i + val >= utts.len() {
            "val"
        } else {
            "train"
        };
        writeln!(manifest, "{clean} {noise} {} {split}", u.snr_db)?;
    }
    Ok(())
}
