//! Active speech level and SNR-controlled mixing.
//!
//! The level follows the envelope-threshold method: a twice-smoothed
//! rectified envelope is compared with a ladder of thresholds one octave
//! apart; a sample is active while the envelope exceeds the threshold or
//! within a hangover after it last did. The active level is where the
//! active power sits a fixed margin above the threshold.

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: f64 = 16_000.0;
pub const ENVELOPE_TIME: f64 = 0.03;
pub const HANGOVER_TIME: f64 = 0.2;
pub const MARGIN_DB: f64 = 15.9;
/// Target active level of clean speech before mixing.
pub const TARGET_LEVEL_DBOV: f64 = -26.0;

const LADDER: usize = 16;

fn db(power: f64) -> f64 {
    10.0 * power.log10()
}

/// Active level in dB relative to full scale (a full-scale square wave
/// reads 0 dBov).
pub fn active_speech_level(x: &[f64], sample_rate: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Data("active level of an empty signal".into()));
    }
    let energy: f64 = x.iter().map(|v| v * v).sum();
    if energy == 0.0 || !energy.is_finite() {
        return Err(Error::Data("signal is silent or non-finite".into()));
    }
    let g = (-1.0 / (ENVELOPE_TIME * sample_rate)).exp();
    let hangover = (HANGOVER_TIME * sample_rate).round() as usize;
    let thresholds: Vec<f64> = (0..LADDER)
        .map(|j| f64::from(1u32 << j) / 32768.0)
        .collect();

    let mut active = [0usize; LADDER];
    let mut since = [usize::MAX; LADDER];
    let (mut p, mut q) = (0.0, 0.0);
    for &v in x {
        p = g * p + (1.0 - g) * v.abs();
        q = g * q + (1.0 - g) * p;
        for j in 0..LADDER {
            if q >= thresholds[j] {
                since[j] = 0;
            } else if since[j] != usize::MAX {
                since[j] += 1;
            }
            if since[j] <= hangover {
                active[j] += 1;
            }
        }
    }

    // Margin between active level and threshold shrinks as the threshold
    // rises; find where it crosses MARGIN_DB.
    let mut prev: Option<(f64, f64)> = None;
    for j in 0..LADDER {
        if active[j] == 0 {
            break;
        }
        let level = db(energy / active[j] as f64);
        let delta = level - 20.0 * thresholds[j].log10();
        if delta <= MARGIN_DB {
            return Ok(match prev {
                Some((pl, pd)) if pd != delta => {
                    pl + (MARGIN_DB - pd) * (level - pl) / (delta - pd)
                }
                _ => level,
            });
        }
        prev = Some((level, delta));
    }
    // Never crossed: everything loud enough is active; fall back to the
    // highest populated rung.
    prev.map(|(l, _)| l)
        .ok_or_else(|| Error::Data("signal never exceeds the lowest activity threshold".into()))
}

/// Mean power in dB relative to full scale.
pub fn power_db(x: &[f64]) -> f64 {
    db(x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct Mixture {
    /// Scaled clean speech.
    pub clean: Vec<f64>,
    /// Scaled noise, cropped or looped to the speech length.
    pub noise: Vec<f64>,
    pub noisy: Vec<f64>,
    pub snr_db: f64,
    pub speech_gain: f64,
    pub noise_gain: f64,
}

/// Levels `s` to `target_dbov` active level and adds `d` scaled to the
/// requested SNR (active speech power over mean noise power). `d` is read
/// from `noise_offset`, wrapping around.
pub fn mix_at_snr(
    s: &[f64],
    d: &[f64],
    snr_db: f64,
    target_dbov: f64,
    noise_offset: usize,
) -> Result<Mixture> {
    let level = active_speech_level(s, DEFAULT_SAMPLE_RATE)?;
    if d.is_empty() {
        return Err(Error::Data("noise signal is empty".into()));
    }
    let noise: Vec<f64> = (0..s.len())
        .map(|i| d[(noise_offset + i) % d.len()])
        .collect();
    let noise_power = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
    if noise_power == 0.0 || !noise_power.is_finite() {
        return Err(Error::Data("noise segment is silent or non-finite".into()));
    }
    // The threshold ladder is fixed, so the level is only piecewise linear
    // in the gain; a few corrections land it on the target.
    let mut speech_gain = 10f64.powf((target_dbov - level) / 20.0);
    for _ in 0..3 {
        let scaled: Vec<f64> = s.iter().map(|v| v * speech_gain).collect();
        let err = target_dbov - active_speech_level(&scaled, DEFAULT_SAMPLE_RATE)?;
        if err.abs() < 1e-9 {
            break;
        }
        speech_gain *= 10f64.powf(err / 20.0);
    }
    let speech_power = 10f64.powf(target_dbov / 10.0);
    let noise_gain = (speech_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt();
    let clean: Vec<f64> = s.iter().map(|v| v * speech_gain).collect();
    let noise: Vec<f64> = noise.iter().map(|v| v * noise_gain).collect();
    let noisy = clean.iter().zip(&noise).map(|(a, b)| a + b).collect();
    Ok(Mixture {
        clean,
        noise,
        noisy,
        snr_db,
        speech_gain,
        noise_gain,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn square(amp: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| if (i / 40) % 2 == 0 { amp } else { -amp })
            .collect()
    }

    #[test]
    fn full_scale_square_is_zero_dbov() {
        let l = active_speech_level(&square(1.0, 32_000), 16_000.0).unwrap();
        assert!(l.abs() < 0.05, "{l}");
    }

    #[test]
    fn halving_amplitude_lowers_level_by_6_02() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..32_000).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let half: Vec<f64> = x.iter().map(|v| v / 2.0).collect();
        let a = active_speech_level(&x, 16_000.0).unwrap();
        let b = active_speech_level(&half, 16_000.0).unwrap();
        assert!((a - b - 20.0 * 2f64.log10()).abs() < 1e-9, "{}", a - b);
    }

    #[test]
    fn half_silent_burst_reads_three_db_above_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seg = 48_000;
        let x: Vec<f64> = (0..4 * seg)
            .map(|i| {
                if (i / seg) % 2 == 0 {
                    rng.gen_range(-0.2..0.2)
                } else {
                    0.0
                }
            })
            .collect();
        // Brute-force oracle: exactly the burst samples are active.
        let active: f64 = x.iter().map(|v| v * v).sum::<f64>() / (2 * seg) as f64;
        let oracle = db(active);
        assert!((oracle - power_db(&x) - 3.0103).abs() < 1e-3);
        let l = active_speech_level(&x, 16_000.0).unwrap();
        assert!((l - oracle).abs() < 0.5, "{l} vs {oracle}");
    }

    #[test]
    fn silence_is_an_error() {
        assert!(matches!(
            active_speech_level(&[0.0; 100], 16_000.0),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            active_speech_level(&[], 16_000.0),
            Err(Error::Data(_))
        ));
        assert!(mix_at_snr(&square(0.1, 1000), &[0.0; 10], 0.0, -26.0, 0).is_err());
    }

    #[test]
    fn mixing_hits_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = square(0.5, 16_000);
        let d: Vec<f64> = (0..7_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for snr in [0.0, 5.0, 10.0] {
            let m = mix_at_snr(&s, &d, snr, TARGET_LEVEL_DBOV, 123).unwrap();
            let level = active_speech_level(&m.clean, 16_000.0).unwrap();
            assert!((level - TARGET_LEVEL_DBOV).abs() < 1e-3, "{level}");
            let measured = level - power_db(&m.noise);
            assert!((measured - snr).abs() < 0.1, "{measured}");
            for i in 0..s.len() {
                assert_eq!(m.noisy[i], m.clean[i] + m.noise[i]);
                assert_eq!(m.clean[i], s[i] * m.speech_gain);
                assert_eq!(m.noise[i], d[(123 + i) % d.len()] * m.noise_gain);
            }
        }
    }

    #[test]
    fn coherent_sum_at_zero_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: Vec<f64> = (0..16_000).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let m = mix_at_snr(&s, &s, 0.0, TARGET_LEVEL_DBOV, 0).unwrap();
        let level = active_speech_level(&m.clean, 16_000.0).unwrap();
        assert!((level - power_db(&m.noise)).abs() < 0.1);
        // Same waveform: y = (1 + k)·clean with k the speech-to-noise gain
        // ratio, within the 0.1 dB gap between active level and mean power.
        let k = m.noise_gain / m.speech_gain;
        assert!((20.0 * k.log10()).abs() < 0.15, "{k}");
        for i in 0..s.len() {
            assert!((m.noisy[i] - (1.0 + k) * m.clean[i]).abs() <= 1e-12);
        }
    }
}
