//! 16 kHz mono WAV input and output. Samples are `f32` with full scale at
//! ±1.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WavFormat {
    #[default]
    Pcm16,
    Float32,
}

type Samples = Box<dyn Iterator<Item = Result<f32>>>;

/// Opens 16-bit PCM or 32-bit float for sample-by-sample reading, with the
/// sample format and length. Anything that is not 16 kHz mono is rejected
/// rather than converted.
pub fn open_samples(path: &Path) -> Result<(Samples, WavFormat, usize)> {
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    let len = reader.len() as usize;
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Data(format!(
            "{}: sample rate is {} Hz, expected {SAMPLE_RATE} Hz (resampling is not supported)",
            path.display(),
            spec.sample_rate
        )));
    }
    if spec.channels != 1 {
        return Err(Error::Data(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => Ok((
            Box::new(reader.into_samples::<i16>().map(|s| Ok(f32::from(s?) / 32768.0))),
            WavFormat::Pcm16,
            len,
        )),
        (SampleFormat::Float, 32) => {
            Ok((Box::new(reader.into_samples::<f32>().map(|s| Ok(s?))), WavFormat::Float32, len))
        }
        (fmt, bits) => Err(Error::Data(format!(
            "{}: unsupported sample format {fmt:?} with {bits} bits (use 16-bit PCM or 32-bit float)",
            path.display()
        ))),
    }
}

pub fn read_wav(path: &Path) -> Result<Vec<f32>> {
    open_samples(path)?.0.collect()
}

/// Incremental mono 16 kHz writer.
pub struct WavWriter {
    inner: hound::WavWriter<BufWriter<File>>,
    format: WavFormat,
}

impl WavWriter {
    pub fn new(path: &Path, format: WavFormat) -> Result<Self> {
        let (bits, sample_format) = match format {
            WavFormat::Pcm16 => (16, SampleFormat::Int),
            WavFormat::Float32 => (32, SampleFormat::Float),
        };
        let spec = WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: bits,
            sample_format,
        };
        Ok(Self {
            inner: hound::WavWriter::create(path, spec)?,
            format,
        })
    }

    pub fn write(&mut self, samples: &[f32]) -> Result<()> {
        for &s in samples {
            match self.format {
                WavFormat::Pcm16 => self.inner.write_sample(to_pcm16(s))?,
                WavFormat::Float32 => self.inner.write_sample(s)?,
            }
        }
        Ok(())
    }

    pub fn finalize(self) -> Result<()> {
        Ok(self.inner.finalize()?)
    }
}

/// Converts to 16-bit PCM, saturating outside `[-1, 1)`.
pub fn to_pcm16(x: f32) -> i16 {
    let v = (x * 32768.0).round();
    if v.is_nan() {
        0
    } else {
        v.clamp(-32768.0, 32767.0) as i16
    }
}

pub fn write_wav(path: &Path, samples: &[f32], format: WavFormat) -> Result<()> {
    let mut w = WavWriter::new(path, format)?;
    w.write(samples)?;
    w.finalize()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_saturates() {
        assert_eq!(to_pcm16(2.0), 32767);
        assert_eq!(to_pcm16(-2.0), -32768);
        assert_eq!(to_pcm16(0.5), 16384);
        assert_eq!(to_pcm16(f32::NAN), 0);
    }

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let x: Vec<f32> = (0..1000).map(|i| ((i as f32) * 0.01).sin() * 0.5).collect();
        let p = dir.path().join("a.wav");
        write_wav(&p, &x, WavFormat::Float32).unwrap();
        assert_eq!(read_wav(&p).unwrap(), x);
        write_wav(&p, &x, WavFormat::Pcm16).unwrap();
        let y = read_wav(&p).unwrap();
        assert!(x
            .iter()
            .zip(&y)
            .all(|(a, b)| (a - b).abs() <= 1.0 / 32768.0));
    }

    #[test]
    fn rejects_wrong_rate_and_channels() {
        let dir = tempfile::tempdir().unwrap();
        for (rate, channels) in [(44_100, 1), (16_000, 2)] {
            let p = dir.path().join(format!("{rate}_{channels}.wav"));
            let spec = WavSpec {
                channels,
                sample_rate: rate,
                bits_per_sample: 16,
                sample_format: SampleFormat::Int,
            };
            let mut w = hound::WavWriter::create(&p, spec).unwrap();
            w.write_sample(0i16).unwrap();
            w.write_sample(0i16).unwrap();
            w.finalize().unwrap();
            assert!(matches!(read_wav(&p), Err(Error::Data(_))));
        }
    }
}
