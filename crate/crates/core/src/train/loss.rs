//! Power-law compressed spectral loss blending a magnitude term and a
//! complex (magnitude plus phase) term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Magnitude compression exponent `c`.
    pub compression: f64,
    /// Weight `α` of the complex term; `1 − α` goes to the magnitude term.
    pub alpha: f64,
    /// Magnitudes are floored here before being raised to `c`.
    pub floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            compression: 0.3,
            alpha: 0.3,
            floor: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!(
                "compression must be in (0, 1], got {}",
                self.compression
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.floor.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config("magnitude floor must be positive".into()));
        }
        Ok(())
    }
}

fn check_pair<S: Real>(est: &Tensor<S>, target: &Tensor<S>) -> Result<usize> {
    let s = est.act()?;
    if s.chan != 2 {
        return Err(Error::Usage(format!(
            "loss expects complex (re, im) tensors, got {} channels",
            s.chan
        )));
    }
    if est.shape() != target.shape() {
        return Err(Error::Usage(format!(
            "estimate {:?} and target {:?} differ in shape",
            est.shape(),
            target.shape()
        )));
    }
    Ok(est.len() / 2)
}

/// `|X|^c · e^{jφ}` for one bin, plus the floored magnitude used.
#[inline]
fn compress(re: f64, im: f64, cfg: &LossConfig) -> (f64, f64, f64) {
    let r = re.hypot(im).max(cfg.floor);
    let k = r.powf(cfg.compression - 1.0);
    (r, re * k, im * k)
}

/// Mean over batch, frames and stored bins of
/// `(1−α)(|Ŝ|^c − |S|^c)² + α·| |Ŝ|^c e^{jφ̂} − |S|^c e^{jφ} |²`.
pub fn compressed_loss<S: Real>(
    est: &Tensor<S>,
    target: &Tensor<S>,
    cfg: &LossConfig,
) -> Result<S> {
    let bins = check_pair(est, target)?;
    let c = cfg.compression;
    let mut total = 0.0;
    for (e, t) in est
        .data()
        .chunks_exact(2)
        .zip(target.data().chunks_exact(2))
    {
        let (re, er, ei) = compress(e[0].to_f64().unwrap(), e[1].to_f64().unwrap(), cfg);
        let (rt, tr, ti) = compress(t[0].to_f64().unwrap(), t[1].to_f64().unwrap(), cfg);
        let dm = re.powf(c) - rt.powf(c);
        let (dx, dy) = (er - tr, ei - ti);
        total += (1.0 - cfg.alpha) * dm * dm + cfg.alpha * (dx * dx + dy * dy);
    }
    Ok(S::lit(total / bins as f64))
}

/// Gradient of [`compressed_loss`] with respect to the estimate.
pub fn compressed_loss_grad<S: Real>(
    est: &Tensor<S>,
    target: &Tensor<S>,
    cfg: &LossConfig,
) -> Result<Tensor<S>> {
    let bins = check_pair(est, target)?;
    let c = cfg.compression;
    let norm = 1.0 / bins as f64;
    let mut grad = est.clone();
    for (g, t) in grad
        .data_mut()
        .chunks_exact_mut(2)
        .zip(target.data().chunks_exact(2))
    {
        let (p, q) = (g[0].to_f64().unwrap(), g[1].to_f64().unwrap());
        let r = p.hypot(q);
        let (_, er, ei) = compress(p, q, cfg);
        let (rt, tr, ti) = compress(t[0].to_f64().unwrap(), t[1].to_f64().unwrap(), cfg);
        let (dx, dy) = (er - tr, ei - ti);
        let (gp, gq) = if r > cfg.floor {
            let mag = 2.0 * (1.0 - cfg.alpha) * (r.powf(c) - rt.powf(c)) * c * r.powf(c - 2.0);
            let a1 = r.powf(c - 1.0);
            let a3 = (c - 1.0) * r.powf(c - 3.0);
            let cp = 2.0 * cfg.alpha * (dx * (a1 + a3 * p * p) + dy * a3 * p * q);
            let cq = 2.0 * cfg.alpha * (dx * a3 * p * q + dy * (a1 + a3 * q * q));
            (mag * p + cp, mag * q + cq)
        } else {
            // Floored magnitude is constant; only the linear complex term moves.
            let k = 2.0 * cfg.alpha * cfg.floor.powf(c - 1.0);
            (k * dx, k * dy)
        };
        g[0] = S::lit(gp * norm);
        g[1] = S::lit(gq * norm);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::ActShape;

    #[test]
    fn perfect_estimate_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Tensor::<f64>::uniform(&[2, 3, 5, 2], 2.0, &mut rng);
        assert_eq!(
            compressed_loss(&s, &s, &LossConfig::default()).unwrap(),
            0.0
        );
    }

    #[test]
    fn unit_estimate_against_silence() {
        let shape = ActShape::new(2, 4, 7, 2);
        let mut est = Tensor::<f64>::act_zeros(shape);
        for pair in est.data_mut().chunks_exact_mut(2) {
            pair[0] = 0.6;
            pair[1] = -0.8;
        }
        let target = Tensor::act_zeros(shape);
        let cfg = LossConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let j = compressed_loss(&est, &target, &cfg).unwrap();
        // (1 − floor^c)² with floor^0.3 ≈ 2.5e-4.
        let expect = (1.0 - 1e-12f64.powf(0.3)).powi(2);
        assert!((j - expect).abs() < 1e-12, "{j}");
        assert!((j - 1.0).abs() < 1e-3);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            compression: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            alpha: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            floor: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let a = Tensor::<f64>::zeros(&[1, 2, 3, 2]);
        let b = Tensor::<f64>::zeros(&[1, 2, 4, 2]);
        assert!(matches!(
            compressed_loss(&a, &b, &LossConfig::default()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LossConfig::default();
        let est = Tensor::<f64>::uniform(&[2, 2, 6, 2], 1.0, &mut rng);
        let target = Tensor::<f64>::uniform(&[2, 2, 6, 2], 1.0, &mut rng);
        let grad = compressed_loss_grad(&est, &target, &cfg).unwrap();
        let h = 1e-7;
        for i in 0..est.len() {
            let mut p = est.clone();
            p.data_mut()[i] += h;
            let mut m = est.clone();
            m.data_mut()[i] -= h;
            let num = (compressed_loss(&p, &target, &cfg).unwrap()
                - compressed_loss(&m, &target, &cfg).unwrap())
                / (2.0 * h);
            let a = grad.data()[i];
            assert!(
                (num - a).abs() / a.abs().max(num.abs()).max(1e-8) < 1e-5,
                "{i}: {a} vs {num}"
            );
        }
    }

    #[test]
    fn gradient_finite_at_zero_magnitude() {
        let est = Tensor::<f32>::zeros(&[1, 1, 3, 2]);
        let target = Tensor::<f32>::full(&[1, 1, 3, 2], 0.5);
        let g = compressed_loss_grad(&est, &target, &LossConfig::default()).unwrap();
        assert!(g.all_finite());
        assert!(compressed_loss(&est, &target, &LossConfig::default()).unwrap() >= 0.0);
    }
}
