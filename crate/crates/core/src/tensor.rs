//! Dense real tensors.
//!
//! Activations are rank-4 and stored `[batch, time, freq, chan]` with the
//! channel axis fastest, so one `(batch, time)` row is a contiguous
//! `freq × chan` matrix. Kernels and weight matrices use whatever rank their
//! layer needs.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Floating-point scalar the numerics are generic over.
///
/// `f32` is the working precision; `f64` exists so finite-difference oracles
/// have headroom.
pub trait Real:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    const BYTES: usize;

    /// `C ← α·A·B + β·C` on strided views.
    ///
    /// # Safety
    /// Every element addressed through the pointers and strides must be in
    /// bounds, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn to_le_bytes_vec(values: &[Self], out: &mut Vec<u8>);
    fn from_le_chunk(chunk: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Real for f32 {
    const BYTES: usize = 4;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes_vec(values: &[f32], out: &mut Vec<u8>) {
        out.reserve(values.len() * 4);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn from_le_chunk(chunk: &[u8]) -> f32 {
        f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"))
    }
}

impl Real for f64 {
    const BYTES: usize = 8;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes_vec(values: &[f64], out: &mut Vec<u8>) {
        out.reserve(values.len() * 8);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn from_le_chunk(chunk: &[u8]) -> f64 {
        f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"))
    }
}

/// Strided matrix view into a slice, used to drive [`gemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn new(offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        Self {
            offset,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn transposed(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// Bounds-checked `C ← A·B + β·C`.
pub(crate) fn gemm<S: Real>(a: &[S], av: View, b: &[S], bv: View, beta: S, c: &mut [S], cv: View) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    assert!(
        av.last_index() < a.len() || av.cols == 0,
        "gemm A out of bounds"
    );
    assert!(
        bv.last_index() < b.len() || bv.rows == 0,
        "gemm B out of bounds"
    );
    assert!(cv.last_index() < c.len(), "gemm C out of bounds");
    // SAFETY: all three views were bounds-checked above and `c` is a
    // distinct mutable borrow.
    unsafe {
        S::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            S::one(),
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Dimensions of a rank-4 activation tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActShape {
    pub batch: usize,
    pub time: usize,
    pub freq: usize,
    pub chan: usize,
}

impl ActShape {
    pub fn new(batch: usize, time: usize, freq: usize, chan: usize) -> Self {
        Self {
            batch,
            time,
            freq,
            chan,
        }
    }

    /// Number of `(batch, time)` rows.
    pub fn rows(&self) -> usize {
        self.batch * self.time
    }

    pub fn row_len(&self) -> usize {
        self.freq * self.chan
    }

    pub fn len(&self) -> usize {
        self.rows() * self.row_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.time, self.freq, self.chan]
    }

    pub fn with_freq(self, freq: usize) -> Self {
        Self { freq, ..self }
    }

    pub fn with_chan(self, chan: usize) -> Self {
        Self { chan, ..self }
    }

    pub fn with_time(self, time: usize) -> Self {
        Self { time, ..self }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Debug> Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_dims(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(shape_err!("tensor needs at least one dimension"));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(shape_err!("zero-sized dimension in {shape:?}"));
    }
    Ok(shape.iter().product())
}

impl<S: Real> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let len = check_dims(shape).expect("valid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let len = check_dims(shape)?;
        if len != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn act_zeros(shape: ActShape) -> Self {
        Self::zeros(&shape.dims())
    }

    pub fn act_from_vec(shape: ActShape, data: Vec<S>) -> Result<Self> {
        Self::from_vec(&shape.dims(), data)
    }

    /// A single `(freq, 1, chan)` frame.
    pub fn frame(freq: usize, chan: usize) -> Self {
        Self::act_zeros(ActShape::new(1, 1, freq, chan))
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], limit: f64, rng: &mut R) -> Self {
        let len = check_dims(shape).expect("valid tensor shape");
        let data = (0..len)
            .map(|_| S::lit(rng.gen_range(-limit..=limit)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    /// Interprets the tensor as an activation.
    pub fn act(&self) -> Result<ActShape> {
        match self.shape[..] {
            [b, t, f, c] => Ok(ActShape::new(b, t, f, c)),
            _ => Err(shape_err!(
                "expected rank-4 activation, got {:?}",
                self.shape
            )),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_dims(shape)?;
        if len != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "shape mismatch {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: S) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn fill(&mut self, value: S) {
        self.data.fill(value);
    }

    pub fn dot(&self, other: &Self) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::lit(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// Relative L2 distance `‖a − b‖ / max(‖b‖, tiny)`.
    pub fn rel_err(&self, reference: &Self) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (&a, &b) in self.data.iter().zip(&reference.data) {
            let (a, b) = (a.to_f64().unwrap(), b.to_f64().unwrap());
            num += (a - b) * (a - b);
            den += b * b;
        }
        num.sqrt() / den.sqrt().max(1e-30)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::from_vec(&[], vec![]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
        assert!(t.clone().reshape(&[3, 2]).is_ok());
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn gemm_strided_transpose() {
        // A = [[1,2],[3,4]] read transposed, B = identity.
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 0.0, 0.0, 1.0];
        let mut c = [0.0f64; 4];
        gemm(
            &a,
            View::new(0, 2, 2, 2, 1).transposed(),
            &b,
            View::new(0, 2, 2, 2, 1),
            0.0,
            &mut c,
            View::new(0, 2, 2, 2, 1),
        );
        assert_eq!(c, [1.0, 3.0, 2.0, 4.0]);
    }
}
