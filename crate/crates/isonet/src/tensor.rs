//! Dense rank-4 tensor storage, deterministic counter-based RNG, and the
//! elementwise/reduction primitives every operator is built on.
//!
//! Layout is row-major NCHW everywhere. All reductions accumulate in a fixed
//! sequential row-major order so results are bit-reproducible across runs and
//! thread counts.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Shape of a rank-4 tensor: (batch, channels, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "all dimensions must be >= 1, got ({n},{c},{h},{w})"
            )));
        }
        n.checked_mul(c)
            .and_then(|x| x.checked_mul(h))
            .and_then(|x| x.checked_mul(w))
            .ok_or_else(|| Error::shape(format!("element count overflows: ({n},{c},{h},{w})")))?;
        Ok(Shape4 { n, c, h, w })
    }

    pub fn elems(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    /// Spatial size per (n, c) plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Scalar type the numeric kernels are generic over. Network math runs in
/// `f32`; gradient-check mode instantiates the same kernels at `f64`.
pub trait Scalar:
    num_traits::Float + Copy + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static
{
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn as_f32(self) -> f32;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f32(self) -> f32 {
        self
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense rank-4 tensor, row-major (n, c, h, w).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF<F> {
    shape: Shape4,
    data: Vec<F>,
}

/// The single-precision tensor all public network math uses.
pub type Tensor = TensorF<f32>;

impl<F: Scalar> TensorF<F> {
    pub fn zeros(shape: Shape4) -> Self {
        TensorF {
            shape,
            data: vec![F::zero(); shape.elems()],
        }
    }

    pub fn full(shape: Shape4, value: F) -> Self {
        TensorF {
            shape,
            data: vec![value; shape.elems()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<F>) -> Result<Self> {
        if data.len() != shape.elems() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.elems()
            )));
        }
        Ok(TensorF { shape, data })
    }

    /// I.i.d. normal samples with mean 0 and the given stddev, drawn from the
    /// counter-based stream. Bit-identical for identical (seed, stream) state.
    pub fn rand_normal(shape: Shape4, rng: &mut Rng, stddev: f64) -> Self {
        assert!(stddev > 0.0, "stddev must be positive");
        let data = (0..shape.elems())
            .map(|_| F::from_f64(rng.next_normal() * stddev))
            .collect();
        TensorF { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> F {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: F) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret as a different shape with the same element count.
    pub fn reshaped(mut self, shape: Shape4) -> Result<Self> {
        if shape.elems() != self.shape.elems() {
            return Err(Error::shape(format!(
                "cannot reshape {} to {}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<G: Scalar>(&self) -> TensorF<G> {
        TensorF {
            shape: self.shape,
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwiseKind {
    Add,
    Sub,
    Mul,
}

/// Elementwise op over equal shapes, or with `b` of shape (1, c, 1, 1)
/// broadcast per channel.
pub fn ewise<F: Scalar>(a: &TensorF<F>, b: &TensorF<F>, kind: EwiseKind) -> Result<TensorF<F>> {
    let sa = a.shape();
    let sb = b.shape();
    let apply = |x: F, y: F| match kind {
        EwiseKind::Add => x + y,
        EwiseKind::Sub => x - y,
        EwiseKind::Mul => x * y,
    };
    if sa == sb {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| apply(x, y))
            .collect();
        return Ok(TensorF { shape: sa, data });
    }
    if sb.n == 1 && sb.h == 1 && sb.w == 1 && sb.c == sa.c {
        let mut out = TensorF::zeros(sa);
        let plane = sa.plane();
        for n in 0..sa.n {
            for c in 0..sa.c {
                let bv = b.data()[c];
                let start = (n * sa.c + c) * plane;
                for i in 0..plane {
                    out.data[start + i] = apply(a.data[start + i], bv);
                }
            }
        }
        return Ok(out);
    }
    Err(Error::shape(format!(
        "ewise shapes incompatible: {sa} vs {sb} (equal or (1,c,1,1) broadcast required)"
    )))
}

/// Axes to reduce over; reduced dimensions become 1 in the output shape.
#[derive(Debug, Clone, Copy, Default)]
pub struct Axes {
    pub n: bool,
    pub c: bool,
    pub h: bool,
    pub w: bool,
}

impl Axes {
    pub fn spatial() -> Self {
        Axes {
            h: true,
            w: true,
            ..Default::default()
        }
    }
    pub fn all() -> Self {
        Axes {
            n: true,
            c: true,
            h: true,
            w: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Reduction over the given axes. Accumulation walks the input in row-major
/// order, which fixes the summation order regardless of thread count.
pub fn reduce<F: Scalar>(a: &TensorF<F>, axes: Axes, kind: ReduceKind) -> TensorF<F> {
    let s = a.shape();
    let out_shape = Shape4 {
        n: if axes.n { 1 } else { s.n },
        c: if axes.c { 1 } else { s.c },
        h: if axes.h { 1 } else { s.h },
        w: if axes.w { 1 } else { s.w },
    };
    let init = match kind {
        ReduceKind::Max => F::neg_infinity(),
        _ => F::zero(),
    };
    let mut out = TensorF::full(out_shape, init);
    let mut i = 0usize;
    for n in 0..s.n {
        let on = if axes.n { 0 } else { n };
        for c in 0..s.c {
            let oc = if axes.c { 0 } else { c };
            for y in 0..s.h {
                let oy = if axes.h { 0 } else { y };
                for x in 0..s.w {
                    let ox = if axes.w { 0 } else { x };
                    let oi = out_shape.index(on, oc, oy, ox);
                    let v = a.data[i];
                    out.data[oi] = match kind {
                        ReduceKind::Sum | ReduceKind::Mean => out.data[oi] + v,
                        ReduceKind::Max => {
                            if v > out.data[oi] {
                                v
                            } else {
                                out.data[oi]
                            }
                        }
                    };
                    i += 1;
                }
            }
        }
    }
    if kind == ReduceKind::Mean {
        let count = F::from_f64((s.elems() / out_shape.elems()) as f64);
        for v in out.data.iter_mut() {
            *v = *v / count;
        }
    }
    out
}

/// 2-D matrix multiply on tensors shaped (rows, cols, 1, 1).
/// Accumulates over the inner dimension in ascending order.
pub fn matmul2d<F: Scalar>(a: &TensorF<F>, b: &TensorF<F>) -> Result<TensorF<F>> {
    let sa = a.shape();
    let sb = b.shape();
    if sa.h != 1 || sa.w != 1 || sb.h != 1 || sb.w != 1 {
        return Err(Error::shape(format!(
            "matmul2d expects (rows, cols, 1, 1) operands, got {sa} x {sb}"
        )));
    }
    if sa.c != sb.n {
        return Err(Error::shape(format!(
            "matmul2d inner dims differ: {} vs {}",
            sa.c, sb.n
        )));
    }
    let (rows, inner, cols) = (sa.n, sa.c, sb.c);
    let mut out = TensorF::zeros(Shape4::new(rows, cols, 1, 1)?);
    for r in 0..rows {
        let orow = &mut out.data[r * cols..(r + 1) * cols];
        for k in 0..inner {
            let av = a.data[r * inner + k];
            let brow = &b.data[k * cols..(k + 1) * cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Counter-based RNG
// ---------------------------------------------------------------------------

/// Deterministic counter-based generator. Every draw is a pure function of
/// (seed, stream, counter), so the stream is reproducible regardless of how
/// calls are batched, and `split` yields independent streams that cannot be
/// perturbed by each other's consumption.
///
/// The normal transform uses only +, -, *, / and sqrt (all correctly rounded
/// under IEEE 754) plus a fixed-term series for ln, so samples are
/// bit-identical across platforms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rng {
    seed: u64,
    stream: u64,
    counter: u64,
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            stream: 0,
            counter: 0,
        }
    }

    /// Independent stream derived from this one; the child starts at
    /// counter 0 and never aliases the parent.
    pub fn split(&self, id: u64) -> Rng {
        Rng {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(id ^ 0xA076_1D64_78BD_642F)),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        self.value_at(c)
    }

    #[inline]
    fn value_at(&self, counter: u64) -> u64 {
        let key = splitmix64(self.seed) ^ splitmix64(self.stream.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        splitmix64(key ^ counter.wrapping_mul(0x9E3779B97F4A7C15))
    }

    /// Uniform in the open interval (0, 1).
    pub fn next_uniform(&mut self) -> f64 {
        let bits = self.next_u64() >> 11; // 53 bits
        (bits as f64 + 0.5) * (1.0 / 9007199254740992.0)
    }

    /// Standard normal via inverse-CDF (Acklam's rational approximation).
    pub fn next_normal(&mut self) -> f64 {
        inv_normal_cdf(self.next_uniform())
    }

    /// Standard normal conditioned on |z| <= cutoff, by deterministic
    /// rejection along the counter sequence.
    pub fn next_truncated_normal(&mut self, cutoff: f64) -> f64 {
        loop {
            let z = self.next_normal();
            if z.abs() <= cutoff {
                return z;
            }
        }
    }

    /// Uniform integer in [0, bound) via 128-bit multiply (bias < 2^-64).
    pub fn next_below(&mut self, bound: u64) -> u64 {
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    /// In-place Fisher-Yates shuffle with a fixed draw order.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Natural log built from exponent extraction and a fixed 16-term atanh
/// series; uses only IEEE-exact arithmetic so results do not depend on the
/// platform libm.
fn det_ln(x: f64) -> f64 {
    debug_assert!(x > 0.0 && x.is_finite());
    const LN2: f64 = core::f64::consts::LN_2;
    let bits = x.to_bits();
    let mut exp = ((bits >> 52) & 0x7FF) as i64 - 1023;
    let mut mant = f64::from_bits((bits & 0x000F_FFFF_FFFF_FFFF) | 0x3FF0_0000_0000_0000);
    // mant in [1, 2); fold to [sqrt(1/2), sqrt(2)) for series accuracy.
    if mant > core::f64::consts::SQRT_2 {
        mant *= 0.5;
        exp += 1;
    }
    let s = (mant - 1.0) / (mant + 1.0);
    let s2 = s * s;
    let mut term = s;
    let mut acc = 0.0;
    for k in 0..16 {
        acc += term / (2 * k + 1) as f64;
        term *= s2;
    }
    exp as f64 * LN2 + 2.0 * acc
}

/// Acklam's inverse normal CDF. Central region is a pure rational
/// approximation; tails use sqrt(-2 ln u) with the deterministic ln above.
/// Relative error below 1.2e-9, ample for initialization and data synthesis.
fn inv_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * det_ln(p)).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * det_ln(1.0 - p)).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, c, h, w).unwrap()
    }

    #[test]
    fn zeros_counts() {
        assert_eq!(Tensor::zeros(shape(1, 1, 2, 2)).data(), &[0.0; 4]);
        assert_eq!(Tensor::zeros(shape(2, 3, 4, 4)).data().len(), 96);
        // 768 * 14 * 14
        assert_eq!(Tensor::zeros(shape(1, 768, 14, 14)).data().len(), 150_528);
    }

    #[test]
    fn shape_rejects_zero_dims() {
        assert!(Shape4::new(0, 1, 1, 1).is_err());
        assert!(Shape4::new(1, 1, 0, 1).is_err());
    }

    #[test]
    fn shape_rejects_overflow() {
        assert!(Shape4::new(usize::MAX, 2, 1, 1).is_err());
    }

    #[test]
    fn rand_normal_deterministic() {
        let a = Tensor::rand_normal(shape(2, 3, 4, 4), &mut Rng::new(7), 1.0);
        let b = Tensor::rand_normal(shape(2, 3, 4, 4), &mut Rng::new(7), 1.0);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rand_normal_batching_independent() {
        // Drawing 10 then 10 equals drawing 20 from the same stream.
        let mut r1 = Rng::new(3).split(5);
        let first: Vec<f64> = (0..10).map(|_| r1.next_normal()).collect();
        let second: Vec<f64> = (0..10).map(|_| r1.next_normal()).collect();
        let mut r2 = Rng::new(3).split(5);
        let all: Vec<f64> = (0..20).map(|_| r2.next_normal()).collect();
        assert_eq!(first, all[..10]);
        assert_eq!(second, all[10..]);
    }

    #[test]
    fn split_streams_differ() {
        let base = Rng::new(11);
        let mut a = base.split(0);
        let mut b = base.split(1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_sample_stddev() {
        let mut rng = Rng::new(123);
        let n = 1_000_000usize;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for _ in 0..n {
            let v = rng.next_normal() * 0.05;
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let sd = (sumsq / n as f64 - mean * mean).sqrt();
        assert!(sd > 0.049 && sd < 0.051, "sd = {sd}");
    }

    #[test]
    fn normal_sample_mean() {
        let mut rng = Rng::new(99);
        let n = 1_000_000usize;
        let mean = (0..n).map(|_| rng.next_normal()).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.005, "mean = {mean}");
    }

    #[test]
    fn det_ln_matches_libm() {
        for &x in &[1e-12, 0.02425, 0.3, 0.5, 0.9999, 1.0, 2.0, 10.0, 1e9] {
            let err = (det_ln(x) - x.ln()).abs();
            assert!(err <= 4e-15 * x.ln().abs().max(1.0), "x={x} err={err}");
        }
    }

    #[test]
    fn truncated_normal_respects_cutoff() {
        let mut rng = Rng::new(4);
        for _ in 0..10_000 {
            assert!(rng.next_truncated_normal(2.0).abs() <= 2.0);
        }
    }

    #[test]
    fn ewise_add_zeros_is_identity() {
        let mut rng = Rng::new(1);
        let x = Tensor::rand_normal(shape(2, 3, 4, 5), &mut rng, 1.0);
        let z = Tensor::zeros(x.shape());
        let y = ewise(&x, &z, EwiseKind::Add).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn ewise_shape_mismatch_errors() {
        let a = Tensor::zeros(shape(1, 2, 3, 3));
        let b = Tensor::zeros(shape(1, 3, 3, 3));
        assert!(ewise(&a, &b, EwiseKind::Add).is_err());
    }

    #[test]
    fn reduce_mean_of_constant() {
        let x = Tensor::full(shape(1, 3, 5, 5), 2.5);
        let m = reduce(&x, Axes::spatial(), ReduceKind::Mean);
        assert_eq!(m.shape(), shape(1, 3, 1, 1));
        for &v in m.data() {
            assert_eq!(v, 2.5);
        }
    }

    #[test]
    fn reduce_sum_closed_form() {
        // 1..=100 laid out (1,1,10,10): sum = 100*101/2.
        let data: Vec<f32> = (1..=100).map(|v| v as f32).collect();
        let x = Tensor::from_vec(shape(1, 1, 10, 10), data).unwrap();
        let s = reduce(&x, Axes::all(), ReduceKind::Sum);
        assert_eq!(s.data()[0], 5050.0);
    }

    #[test]
    fn reduce_max() {
        let x = Tensor::from_vec(shape(1, 2, 1, 2), vec![1.0, -3.0, 7.0, 2.0]).unwrap();
        let m = reduce(
            &x,
            Axes {
                c: true,
                h: true,
                w: true,
                ..Default::default()
            },
            ReduceKind::Max,
        );
        assert_eq!(m.data(), &[7.0]);
    }

    #[test]
    fn matmul2d_small() {
        let a = Tensor::from_vec(shape(2, 3, 1, 1), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(shape(3, 2, 1, 1), vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = matmul2d(&a, &b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn matmul2d_inner_mismatch() {
        let a = Tensor::zeros(shape(2, 3, 1, 1));
        let b = Tensor::zeros(shape(4, 2, 1, 1));
        assert!(matmul2d(&a, &b).is_err());
    }

    #[test]
    fn broadcast_equals_tiling_brute_force() {
        // Exhaustive check on small shapes per the contract.
        let mut rng = Rng::new(21);
        for (n, c, h, w) in [(1, 1, 1, 1), (2, 4, 5, 5), (2, 3, 2, 4)] {
            let a = Tensor::rand_normal(shape(n, c, h, w), &mut rng, 1.0);
            let b = Tensor::rand_normal(shape(1, c, 1, 1), &mut rng, 1.0);
            let fast = ewise(&a, &b, EwiseKind::Add).unwrap();
            let mut tiled = Tensor::zeros(a.shape());
            for ni in 0..n {
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            tiled.set(ni, ci, y, x, b.at(0, ci, 0, 0));
                        }
                    }
                }
            }
            let slow = ewise(&a, &tiled, EwiseKind::Add).unwrap();
            assert_eq!(fast.data(), slow.data());
        }
    }
}
