//! SNR improvement of an enhanced signal.

use serde::Serialize;

use super::level::{active_speech_level, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Ceiling for the output SNR when the residual vanishes.
pub const MAX_SNR_DB: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SnrGain {
    pub snr_in: f64,
    pub snr_out: f64,
    /// `snr_out − snr_in` in dB.
    pub delta: f64,
    /// The output residual was (numerically) zero and `snr_out` was capped.
    pub clamped: bool,
}

fn residual_power(x: &[f64], s: &[f64]) -> f64 {
    x.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / s.len() as f64
}

/// SNR is the active speech level of `clean` over the mean power of the
/// residual (`noisy − clean` before, `enhanced − clean` after).
pub fn delta_snr(clean: &[f64], noisy: &[f64], enhanced: &[f64]) -> Result<SnrGain> {
    if clean.len() != noisy.len() || clean.len() != enhanced.len() {
        return Err(Error::Usage(format!(
            "signals differ in length: {}, {}, {}",
            clean.len(),
            noisy.len(),
            enhanced.len()
        )));
    }
    let level = active_speech_level(clean, DEFAULT_SAMPLE_RATE)?;
    let snr = |p: f64| {
        if p > 0.0 {
            (level - 10.0 * p.log10()).min(MAX_SNR_DB)
        } else {
            MAX_SNR_DB
        }
    };
    let (p_in, p_out) = (
        residual_power(noisy, clean),
        residual_power(enhanced, clean),
    );
    let snr_in = snr(p_in);
    let snr_out = snr(p_out);
    Ok(SnrGain {
        snr_in,
        snr_out,
        delta: snr_out - snr_in,
        clamped: snr_out >= MAX_SNR_DB,
    })
}
