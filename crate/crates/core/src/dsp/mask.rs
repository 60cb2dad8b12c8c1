//! Bounded complex masking.
//!
//! The network emits an unbounded complex gain `G` per bin as two real
//! channels. It is squashed to `G' = tanh(|G|) · G / |G|`, which keeps the
//! phase and limits the magnitude to `[0, 1]`, and then multiplied onto the
//! noisy spectrum.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Below this magnitude the series expansion of `tanh(m)/m` is used.
const SERIES_BELOW: f64 = 1e-3;

/// Returns `(s, q)` with `s = tanh(m)/m` and `q = s'(m)/m`.
///
/// Both are smooth through `m = 0`: `s → 1`, `q → −2/3`.
pub fn bound_scale(m: f64) -> (f64, f64) {
    if m < SERIES_BELOW {
        let m2 = m * m;
        (
            1.0 - m2 / 3.0 + 2.0 * m2 * m2 / 15.0,
            -2.0 / 3.0 + 8.0 * m2 / 15.0,
        )
    } else {
        let t = m.tanh();
        let sech2 = 1.0 - t * t;
        (t / m, (m * sech2 - t) / (m * m * m))
    }
}

fn check_complex<S: Real>(t: &Tensor<S>) -> Result<()> {
    let s = t.act()?;
    if s.chan != 2 {
        return Err(shape_err!(
            "complex tensor needs 2 channels (re, im), got {}",
            s.chan
        ));
    }
    Ok(())
}

/// Shrinks `(re, im)` by an ulp at a time until the magnitude does not
/// exceed one after rounding to `S`.
fn clamp_unit<S: Real>(mut re: S, mut im: S) -> (S, S) {
    let shrink = S::one() - S::epsilon();
    while re.to_f64().unwrap().hypot(im.to_f64().unwrap()) > 1.0 {
        re *= shrink;
        im *= shrink;
    }
    (re, im)
}

/// `G' = tanh(|G|)·G/|G|`, with `G' = 0` at the origin.
pub fn bound_mask<S: Real>(g: &Tensor<S>) -> Result<Tensor<S>> {
    check_complex(g)?;
    let mut out = g.clone();
    for pair in out.data_mut().chunks_exact_mut(2) {
        let (a, b) = (pair[0].to_f64().unwrap(), pair[1].to_f64().unwrap());
        let m = a.hypot(b);
        let (re, im) = if m.is_infinite() {
            // Saturated: only the direction survives.
            let (ua, ub) = (
                a.signum() * a.is_infinite() as u8 as f64,
                b.signum() * b.is_infinite() as u8 as f64,
            );
            let n = ua.hypot(ub);
            (ua / n, ub / n)
        } else {
            let (s, _) = bound_scale(m);
            (a * s, b * s)
        };
        let (re, im) = clamp_unit(S::lit(re), S::lit(im));
        pair[0] = re;
        pair[1] = im;
    }
    Ok(out)
}

/// Vector-Jacobian product of [`bound_mask`].
pub fn bound_mask_backward<S: Real>(g: &Tensor<S>, dy: &Tensor<S>) -> Result<Tensor<S>> {
    check_complex(g)?;
    g.same_shape(dy)?;
    let mut dg = dy.clone();
    for (d, x) in dg
        .data_mut()
        .chunks_exact_mut(2)
        .zip(g.data().chunks_exact(2))
    {
        let (a, b) = (x[0].to_f64().unwrap(), x[1].to_f64().unwrap());
        let (ga, gb) = (d[0].to_f64().unwrap(), d[1].to_f64().unwrap());
        let (s, q) = bound_scale(a.hypot(b));
        let proj = a * ga + b * gb;
        d[0] = S::lit(s * ga + q * a * proj);
        d[1] = S::lit(s * gb + q * b * proj);
    }
    Ok(dg)
}

/// Bin-wise complex product `G · Y`.
pub fn complex_mul<S: Real>(g: &Tensor<S>, y: &Tensor<S>) -> Result<Tensor<S>> {
    check_complex(g)?;
    g.same_shape(y)?;
    let mut out = g.clone();
    for (o, yv) in out
        .data_mut()
        .chunks_exact_mut(2)
        .zip(y.data().chunks_exact(2))
    {
        let (gr, gi) = (o[0], o[1]);
        o[0] = gr * yv[0] - gi * yv[1];
        o[1] = gr * yv[1] + gi * yv[0];
    }
    Ok(out)
}

/// Gradient of `G · Y` with respect to `G` (multiplication by `conj(Y)`).
pub fn complex_mul_backward<S: Real>(dy: &Tensor<S>, y: &Tensor<S>) -> Result<Tensor<S>> {
    dy.same_shape(y)?;
    let mut dg = dy.clone();
    for (d, yv) in dg
        .data_mut()
        .chunks_exact_mut(2)
        .zip(y.data().chunks_exact(2))
    {
        let (dr, di) = (d[0], d[1]);
        d[0] = dr * yv[0] + di * yv[1];
        d[1] = di * yv[0] - dr * yv[1];
    }
    Ok(dg)
}

/// Bounds a raw network output and applies it to the noisy spectrum:
/// `Ŝ = G' · Y`.
pub fn bound_and_apply_mask<S: Real>(g_raw: &Tensor<S>, noisy: &Tensor<S>) -> Result<Tensor<S>> {
    complex_mul(&bound_mask(g_raw)?, noisy)
}
