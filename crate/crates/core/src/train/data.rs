//! Manifests, on-the-fly mixing, and fixed-length training segments.
//!
//! A manifest line reads `clean_path noise_path snr_db split`; paths are
//! relative to the manifest's directory, `#` starts a comment.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::level::{mix_at_snr, Mixture, TARGET_LEVEL_DBOV};
use super::synth::SynthUtterance;
use crate::dsp::stft::{stft, FrameConfig};
use crate::dsp::wav::read_wav;
use crate::error::{Error, Result};
use crate::tensor::{ActShape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (train, val or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub clean: PathBuf,
    pub noise: PathBuf,
    pub snr_db: f64,
    pub split: Split,
    pub line: usize,
}

pub fn parse_manifest(text: &str, base: &Path, origin: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Data(format!("{}:{line}: {msg}", origin.display()));
        let fields: Vec<&str> = content.split_whitespace().collect();
        let [clean, noise, snr, split] = fields[..] else {
            return Err(bad(format!(
                "expected 4 fields (clean noise snr_db split), found {}",
                fields.len()
            )));
        };
        let snr_db: f64 = snr
            .parse()
            .map_err(|_| bad(format!("invalid SNR {snr:?}")))?;
        if !snr_db.is_finite() {
            return Err(bad(format!("invalid SNR {snr:?}")));
        }
        let split = split.parse().map_err(bad)?;
        entries.push(ManifestEntry {
            clean: base.join(clean),
            noise: base.join(noise),
            snr_db,
            split,
            line,
        });
    }
    if entries.is_empty() {
        return Err(Error::Usage(format!(
            "{} lists no utterances",
            origin.display()
        )));
    }
    Ok(entries)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")), path)
}

/// A mixed utterance with its spectra.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
    /// `(1, L, bins, 2)`.
    pub clean_spec: Tensor<f32>,
    pub noisy_spec: Tensor<f32>,
}

impl Utterance {
    pub fn new(id: String, mix: Mixture, cfg: FrameConfig) -> Result<Self> {
        Ok(Self {
            clean_spec: stft(&mix.clean, cfg)?,
            noisy_spec: stft(&mix.noisy, cfg)?,
            clean: mix.clean,
            noisy: mix.noisy,
            id,
        })
    }

    pub fn frames(&self) -> usize {
        self.noisy_spec.shape()[1]
    }
}

/// Utterances cut into segments of `seq_len` frames. Every frame is in at
/// least one segment; the last segment of an utterance ends at its last
/// frame, and utterances shorter than `seq_len` are zero-padded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub segments: Vec<(usize, usize)>,
    pub seq_len: usize,
    pub frame: FrameConfig,
}

impl Dataset {
    pub fn new(utterances: Vec<Utterance>, seq_len: usize, frame: FrameConfig) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        let mut segments = Vec::new();
        for (u, utt) in utterances.iter().enumerate() {
            let frames = utt.frames();
            let mut start = 0;
            loop {
                if start + seq_len >= frames {
                    segments.push((u, frames.saturating_sub(seq_len)));
                    break;
                }
                segments.push((u, start));
                start += seq_len;
            }
        }
        Ok(Self {
            utterances,
            segments,
            seq_len,
            frame,
        })
    }

    /// Mixes every entry of `split`, reading noise from a seeded random
    /// offset.
    pub fn from_manifest(
        entries: &[ManifestEntry],
        split: Split,
        seq_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let frame = FrameConfig::default();
        let utts = entries
            .par_iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let ctx = |err: Error| Error::Data(format!("manifest line {}: {err}", e.line));
                let to64 = |x: Vec<f32>| x.into_iter().map(f64::from).collect::<Vec<_>>();
                let clean = to64(read_wav(&e.clean).map_err(ctx)?);
                let noise = to64(read_wav(&e.noise).map_err(ctx)?);
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ (e.line as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                );
                let offset = if noise.is_empty() {
                    0
                } else {
                    rng.gen_range(0..noise.len())
                };
                let mix =
                    mix_at_snr(&clean, &noise, e.snr_db, TARGET_LEVEL_DBOV, offset).map_err(ctx)?;
                let id = e
                    .clean
                    .file_stem()
                    .map_or_else(|| format!("line{}", e.line), |s| s.to_string_lossy().into());
                Utterance::new(id, mix, frame)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(utts, seq_len, frame)
    }

    pub fn from_synth(utts: &[SynthUtterance], seq_len: usize) -> Result<Self> {
        let frame = FrameConfig::default();
        let utts = utts
            .par_iter()
            .map(|u| {
                let mix = mix_at_snr(&u.clean, &u.noise, u.snr_db, TARGET_LEVEL_DBOV, 0)?;
                Utterance::new(u.id.clone(), mix, frame)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(utts, seq_len, frame)
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    /// Stacks segments into `(noisy, clean)` tensors of shape
    /// `(B, seq_len, bins, 2)`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let bins = self.frame.bins();
        let shape = ActShape::new(indices.len(), self.seq_len, bins, 2);
        let row = bins * 2;
        let mut noisy = vec![0.0f32; shape.len()];
        let mut clean = vec![0.0f32; shape.len()];
        for (b, &i) in indices.iter().enumerate() {
            let (u, start) = self.segments[i];
            let utt = &self.utterances[u];
            let n = (utt.frames() - start).min(self.seq_len);
            let dst = b * self.seq_len * row;
            noisy[dst..dst + n * row]
                .copy_from_slice(&utt.noisy_spec.data()[start * row..(start + n) * row]);
            clean[dst..dst + n * row]
                .copy_from_slice(&utt.clean_spec.data()[start * row..(start + n) * row]);
        }
        Ok((
            Tensor::act_from_vec(shape, noisy)?,
            Tensor::act_from_vec(shape, clean)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::synth;

    #[test]
    fn manifest_errors_name_the_line() {
        let text = "# header\na.wav b.wav 5 train\n\nc.wav d.wav five train\n";
        let err = parse_manifest(text, Path::new("."), Path::new("m.txt")).unwrap_err();
        assert!(err.to_string().contains("m.txt:4"), "{err}");
        let err = parse_manifest("a b 0 holdout", Path::new("."), Path::new("m.txt")).unwrap_err();
        assert!(err.to_string().contains("m.txt:1"), "{err}");
        assert!(matches!(
            parse_manifest("# nothing\n", Path::new("."), Path::new("m")),
            Err(Error::Usage(_))
        ));
        let ok = parse_manifest("a.wav b.wav -5 val # c", Path::new("/d"), Path::new("m")).unwrap();
        assert_eq!(ok[0].clean, Path::new("/d/a.wav"));
        assert_eq!((ok[0].snr_db, ok[0].split), (-5.0, Split::Val));
    }

    #[test]
    fn segments_cover_every_frame() {
        let utts = synth::generate(2, 1.3, 1);
        let ds = Dataset::from_synth(&utts, 30).unwrap();
        let frames = ds.utterances[0].frames();
        assert_eq!(frames, 81);
        let starts: Vec<_> = ds
            .segments
            .iter()
            .filter(|s| s.0 == 0)
            .map(|s| s.1)
            .collect();
        assert_eq!(starts, vec![0, 30, 51]);
        let (noisy, clean) = ds.batch(&[0, 2]).unwrap();
        assert_eq!(noisy.shape(), &[2, 30, 257, 2]);
        assert!(clean.max_abs() > 0.0);

        let short = Dataset::from_synth(&utts, 200).unwrap();
        assert_eq!(short.segments, vec![(0, 0), (1, 0)]);
        let (noisy, _) = short.batch(&[0]).unwrap();
        assert!(noisy.data()[81 * 514..].iter().all(|&v| v == 0.0));
    }
}
