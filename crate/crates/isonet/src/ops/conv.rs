//! 2-D convolution (cross-correlation semantics) with stride, dilation,
//! groups, and same-zero / valid padding.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, TensorF};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Below this many scalar multiplies a kernel runs serially; the per-element
/// accumulation order is identical either way, so results do not depend on
/// the path taken.
const PAR_WORK_THRESHOLD: usize = 1 << 16;

fn for_each_chunk<F: Send, W>(data: &mut [F], chunk: usize, work: usize, body: W)
where
    W: Fn(usize, &mut [F]) + Send + Sync,
{
    if work >= PAR_WORK_THRESHOLD {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| body(i, c));
    } else {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            body(i, c);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output spatial size is ceil(in/stride); zero padding split as
    /// (floor, ceil) over (top/left, bottom/right) when the total is odd.
    SameZero,
    /// No padding; output size (in - (k-1)*dilation - 1)/stride + 1.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl ConvParams {
    pub fn dense(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        ConvParams {
            in_ch,
            out_ch,
            kernel,
            stride,
            dilation: 1,
            groups: 1,
            padding: Padding::SameZero,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        ConvParams {
            in_ch: channels,
            out_ch: channels,
            kernel,
            stride,
            dilation,
            groups: channels,
            padding: Padding::SameZero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::shape(
                "kernel, stride, dilation, groups must all be >= 1".to_string(),
            ));
        }
        if self.in_ch % self.groups != 0 || self.out_ch % self.groups != 0 {
            return Err(Error::Divisibility(format!(
                "channels ({} -> {}) not divisible by groups {}",
                self.in_ch, self.out_ch, self.groups
            )));
        }
        Ok(())
    }

    /// Effective kernel extent (k-1)*dilation + 1.
    pub fn effective_kernel(&self) -> usize {
        (self.kernel - 1) * self.dilation + 1
    }

    pub fn weight_shape(&self) -> Result<Shape4> {
        Shape4::new(
            self.out_ch,
            self.in_ch / self.groups,
            self.kernel,
            self.kernel,
        )
    }

    /// Output length and left/top padding for one spatial dimension.
    fn geometry(&self, in_len: usize) -> Result<(usize, usize)> {
        let eff = self.effective_kernel();
        match self.padding {
            Padding::SameZero => {
                let out = in_len.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + eff).saturating_sub(in_len);
                Ok((out, total / 2))
            }
            Padding::Valid => {
                if in_len < eff {
                    return Err(Error::shape(format!(
                        "valid conv: input {} smaller than effective kernel {}",
                        in_len, eff
                    )));
                }
                Ok(((in_len - eff) / self.stride + 1, 0))
            }
        }
    }
}

/// Output spatial length for the given input length.
pub fn conv_output_len(p: &ConvParams, in_len: usize) -> Result<usize> {
    p.geometry(in_len).map(|(out, _)| out)
}

/// Cross-correlation forward pass. Weight layout (out_ch, in_ch/groups, k, k).
/// Per output element, contributions accumulate over (ky, kx, in-channel) in
/// ascending order — the same order a 1x1 convolution over space-to-depth
/// packed channels uses, which makes the fold identity bit-exact.
pub fn conv2d<F: Scalar>(
    x: &TensorF<F>,
    weights: &TensorF<F>,
    bias: Option<&TensorF<F>>,
    p: &ConvParams,
) -> Result<TensorF<F>> {
    p.validate()?;
    let s = x.shape();
    if s.c != p.in_ch {
        return Err(Error::shape(format!(
            "conv2d: input has {} channels, params expect {}",
            s.c, p.in_ch
        )));
    }
    if weights.shape() != p.weight_shape()? {
        return Err(Error::shape(format!(
            "conv2d: weight shape {} does not match params {}",
            weights.shape(),
            p.weight_shape()?
        )));
    }
    if let Some(b) = bias {
        if b.shape() != Shape4::new(1, p.out_ch, 1, 1)? {
            return Err(Error::shape(format!(
                "conv2d: bias shape {} must be (1,{},1,1)",
                b.shape(),
                p.out_ch
            )));
        }
    }
    let (out_h, pad_t) = p.geometry(s.h)?;
    let (out_w, pad_l) = p.geometry(s.w)?;
    let out_shape = Shape4::new(s.n, p.out_ch, out_h, out_w)?;
    let mut out = TensorF::zeros(out_shape);

    let icpg = p.in_ch / p.groups;
    let ocpg = p.out_ch / p.groups;
    let in_plane = s.plane();
    let out_plane = out_h * out_w;
    let xd = x.data();
    let wd = weights.data();
    let ksq = p.kernel * p.kernel;

    let work = out_shape.elems() * ksq * icpg;
    let pointwise = p.kernel == 1 && p.stride == 1;
    // One (n, oc) output plane per worker; accumulation inside a plane is
    // strictly ordered, so thread count cannot change results.
    for_each_chunk(out.data_mut(), out_plane, work, |plane_idx, oplane| {
            let n = plane_idx / p.out_ch;
            let oc = plane_idx % p.out_ch;
            let g = oc / ocpg;
            if let Some(b) = bias {
                let bv = b.data()[oc];
                for v in oplane.iter_mut() {
                    *v = bv;
                }
            }
            if pointwise {
                // 1x1 stride-1: each input plane contributes one whole-plane
                // axpy; same (ic ascending) accumulation order as the
                // general path.
                for ic_local in 0..icpg {
                    let ic = g * icpg + ic_local;
                    let xplane = &xd[(n * s.c + ic) * in_plane..(n * s.c + ic + 1) * in_plane];
                    let wv = wd[oc * icpg + ic_local];
                    if wv == F::zero() {
                        continue;
                    }
                    for (o, &xv) in oplane.iter_mut().zip(xplane) {
                        *o = *o + wv * xv;
                    }
                }
                return;
            }
            for ky in 0..p.kernel {
                for kx in 0..p.kernel {
                    for ic_local in 0..icpg {
                        let ic = g * icpg + ic_local;
                        let xplane = &xd[(n * s.c + ic) * in_plane..(n * s.c + ic + 1) * in_plane];
                        let wv = wd[oc * icpg * ksq + ic_local * ksq + ky * p.kernel + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        accumulate_tap(
                            oplane, xplane, wv, s.h, s.w, out_h, out_w, p.stride, pad_t, pad_l,
                            ky * p.dilation, kx * p.dilation,
                        );
                    }
                }
            }
    });
    Ok(out)
}

/// out[oy, ox] += wv * x[oy*s - pad_t + dy, ox*s - pad_l + dx] over the valid
/// output range for this kernel tap.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_tap<F: Scalar>(
    oplane: &mut [F],
    xplane: &[F],
    wv: F,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad_t: usize,
    pad_l: usize,
    dy: usize,
    dx: usize,
) {
    // iy = oy*stride + dy - pad_t must land in [0, in_h).
    let oy_lo = pad_t.saturating_sub(dy).div_ceil(stride);
    let ox_lo = pad_l.saturating_sub(dx).div_ceil(stride);
    for oy in oy_lo..out_h {
        let iy = oy * stride + dy - pad_t;
        if iy >= in_h {
            break;
        }
        let orow = &mut oplane[oy * out_w..(oy + 1) * out_w];
        let xrow = &xplane[iy * in_w..(iy + 1) * in_w];
        if stride == 1 {
            let shift = dx as isize - pad_l as isize;
            let ox_hi =
                ((in_w as isize - shift).min(out_w as isize)).max(ox_lo as isize) as usize;
            if ox_hi == ox_lo {
                continue;
            }
            let ix_lo = (ox_lo as isize + shift) as usize;
            for (o, &xv) in orow[ox_lo..ox_hi]
                .iter_mut()
                .zip(&xrow[ix_lo..ix_lo + (ox_hi - ox_lo)])
            {
                *o = *o + wv * xv;
            }
        } else {
            for ox in ox_lo..out_w {
                let ix = ox * stride + dx - pad_l;
                if ix >= in_w {
                    break;
                }
                orow[ox] = orow[ox] + wv * xrow[ix];
            }
        }
    }
}

#[derive(Debug)]
pub struct ConvGrads<F> {
    pub input: TensorF<F>,
    pub weights: TensorF<F>,
    pub bias: Option<TensorF<F>>,
}

/// Reverse-mode gradients for `conv2d`. `want_bias` mirrors whether the
/// forward pass used a bias.
pub fn conv2d_backward<F: Scalar>(
    x: &TensorF<F>,
    weights: &TensorF<F>,
    p: &ConvParams,
    grad_out: &TensorF<F>,
    want_bias: bool,
) -> Result<ConvGrads<F>> {
    p.validate()?;
    let s = x.shape();
    let (out_h, pad_t) = p.geometry(s.h)?;
    let (out_w, pad_l) = p.geometry(s.w)?;
    let expected = Shape4::new(s.n, p.out_ch, out_h, out_w)?;
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "conv2d_backward: grad shape {} != expected {}",
            grad_out.shape(),
            expected
        )));
    }
    let icpg = p.in_ch / p.groups;
    let ocpg = p.out_ch / p.groups;
    let in_plane = s.plane();
    let out_plane = out_h * out_w;
    let ksq = p.kernel * p.kernel;
    let xd = x.data();
    let gd = grad_out.data();
    let wd = weights.data();

    // grad bias: one output channel per worker, summed over (n, oy, ox).
    let bwd_work = grad_out.shape().elems() * ksq * icpg;
    let grad_bias = if want_bias {
        let mut gb = TensorF::zeros(Shape4::new(1, p.out_ch, 1, 1)?);
        for_each_chunk(gb.data_mut(), 1, bwd_work, |oc, slot| {
            let mut acc = F::zero();
            for n in 0..s.n {
                let plane = &gd[(n * p.out_ch + oc) * out_plane..][..out_plane];
                for &g in plane {
                    acc = acc + g;
                }
            }
            slot[0] = acc;
        });
        Some(gb)
    } else {
        None
    };

    let pointwise = p.kernel == 1 && p.stride == 1;

    // grad weights: each worker owns all taps of one output channel and
    // accumulates over (n, oy, ox) in ascending order.
    let mut gw = TensorF::zeros(weights.shape());
    for_each_chunk(gw.data_mut(), icpg * ksq, bwd_work, |oc, grow| {
            let g = oc / ocpg;
            if pointwise {
                for n in 0..s.n {
                    let gplane = &gd[(n * p.out_ch + oc) * out_plane..][..out_plane];
                    for ic_local in 0..icpg {
                        let ic = g * icpg + ic_local;
                        let xplane = &xd[(n * s.c + ic) * in_plane..][..in_plane];
                        let mut acc = F::zero();
                        for (&gv, &xv) in gplane.iter().zip(xplane) {
                            acc = acc + gv * xv;
                        }
                        grow[ic_local] = grow[ic_local] + acc;
                    }
                }
                return;
            }
            for n in 0..s.n {
                let gplane = &gd[(n * p.out_ch + oc) * out_plane..][..out_plane];
                for ic_local in 0..icpg {
                    let ic = g * icpg + ic_local;
                    let xplane = &xd[(n * s.c + ic) * in_plane..][..in_plane];
                    for ky in 0..p.kernel {
                        for kx in 0..p.kernel {
                            let (dy, dx) = (ky * p.dilation, kx * p.dilation);
                            let mut acc = F::zero();
                            let oy_lo = pad_t.saturating_sub(dy).div_ceil(p.stride);
                            let ox_lo = pad_l.saturating_sub(dx).div_ceil(p.stride);
                            for oy in oy_lo..out_h {
                                let iy = oy * p.stride + dy - pad_t;
                                if iy >= s.h {
                                    break;
                                }
                                let grow_o = &gplane[oy * out_w..(oy + 1) * out_w];
                                let xrow = &xplane[iy * s.w..(iy + 1) * s.w];
                                if p.stride == 1 {
                                    let shift = dx as isize - pad_l as isize;
                                    let ox_hi = ((s.w as isize - shift).min(out_w as isize))
                                        .max(ox_lo as isize)
                                        as usize;
                                    if ox_hi == ox_lo {
                                        continue;
                                    }
                                    let ix_lo = (ox_lo as isize + shift) as usize;
                                    for (&g, &xv) in grow_o[ox_lo..ox_hi]
                                        .iter()
                                        .zip(&xrow[ix_lo..ix_lo + (ox_hi - ox_lo)])
                                    {
                                        acc = acc + g * xv;
                                    }
                                } else {
                                    for ox in ox_lo..out_w {
                                        let ix = ox * p.stride + dx - pad_l;
                                        if ix >= s.w {
                                            break;
                                        }
                                        acc = acc + grow_o[ox] * xrow[ix];
                                    }
                                }
                            }
                            grow[ic_local * ksq + ky * p.kernel + kx] =
                                grow[ic_local * ksq + ky * p.kernel + kx] + acc;
                        }
                    }
                }
            }
    });

    // grad input: one sample per worker; fixed (oc, ic, ky, kx, oy, ox) order.
    let mut gx = TensorF::zeros(s);
    for_each_chunk(gx.data_mut(), s.c * in_plane, bwd_work, |n, gx_sample| {
            if pointwise {
                for oc in 0..p.out_ch {
                    let g = oc / ocpg;
                    let gplane = &gd[(n * p.out_ch + oc) * out_plane..][..out_plane];
                    for ic_local in 0..icpg {
                        let ic = g * icpg + ic_local;
                        let wv = wd[oc * icpg + ic_local];
                        if wv == F::zero() {
                            continue;
                        }
                        let gx_plane = &mut gx_sample[ic * in_plane..(ic + 1) * in_plane];
                        for (gxv, &gv) in gx_plane.iter_mut().zip(gplane) {
                            *gxv = *gxv + wv * gv;
                        }
                    }
                }
                return;
            }
            for oc in 0..p.out_ch {
                let g = oc / ocpg;
                let gplane = &gd[(n * p.out_ch + oc) * out_plane..][..out_plane];
                for ic_local in 0..icpg {
                    let ic = g * icpg + ic_local;
                    let gx_plane = &mut gx_sample[ic * in_plane..(ic + 1) * in_plane];
                    let wbase = oc * icpg * ksq + ic_local * ksq;
                    for ky in 0..p.kernel {
                        for kx in 0..p.kernel {
                            let wv = wd[wbase + ky * p.kernel + kx];
                            if wv == F::zero() {
                                continue;
                            }
                            let (dy, dx) = (ky * p.dilation, kx * p.dilation);
                            let oy_lo = pad_t.saturating_sub(dy).div_ceil(p.stride);
                            let ox_lo = pad_l.saturating_sub(dx).div_ceil(p.stride);
                            for oy in oy_lo..out_h {
                                let iy = oy * p.stride + dy - pad_t;
                                if iy >= s.h {
                                    break;
                                }
                                let grow_o = &gplane[oy * out_w..(oy + 1) * out_w];
                                let gxrow = &mut gx_plane[iy * s.w..(iy + 1) * s.w];
                                if p.stride == 1 {
                                    let shift = dx as isize - pad_l as isize;
                                    let ox_hi = ((s.w as isize - shift).min(out_w as isize))
                                        .max(ox_lo as isize)
                                        as usize;
                                    if ox_hi == ox_lo {
                                        continue;
                                    }
                                    let ix_lo = (ox_lo as isize + shift) as usize;
                                    for (gxv, &g) in gxrow[ix_lo..ix_lo + (ox_hi - ox_lo)]
                                        .iter_mut()
                                        .zip(&grow_o[ox_lo..ox_hi])
                                    {
                                        *gxv = *gxv + wv * g;
                                    }
                                } else {
                                    for ox in ox_lo..out_w {
                                        let ix = ox * p.stride + dx - pad_l;
                                        if ix >= s.w {
                                            break;
                                        }
                                        gxrow[ix] = gxrow[ix] + wv * grow_o[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
    });

    Ok(ConvGrads {
        input: gx,
        weights: gw,
        bias: grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Tensor};

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, c, h, w).unwrap()
    }

    #[test]
    fn identity_1x1_conv() {
        let mut rng = Rng::new(1);
        let x = Tensor::rand_normal(shape(2, 3, 5, 5), &mut rng, 1.0);
        // Identity weight matrix: w[o][i] = delta(o, i).
        let mut w = Tensor::zeros(shape(3, 3, 1, 1));
        for i in 0..3 {
            w.set(i, i, 0, 0, 1.0);
        }
        let p = ConvParams::dense(3, 3, 1, 1);
        let y = conv2d(&x, &w, None, &p).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn depthwise_ones_on_constant_input() {
        // 3x3 all-ones depthwise kernel on constant c, same-zero 4x4 input:
        // interior pixels see 9c, corners 4c, edges 6c.
        let c = 2.5f32;
        let x = Tensor::full(shape(1, 2, 4, 4), c);
        let w = Tensor::full(shape(2, 1, 3, 3), 1.0);
        let p = ConvParams::depthwise(2, 3, 1, 1);
        let y = conv2d(&x, &w, None, &p).unwrap();
        for ch in 0..2 {
            assert_eq!(y.at(0, ch, 1, 1), 9.0 * c);
            assert_eq!(y.at(0, ch, 2, 2), 9.0 * c);
            assert_eq!(y.at(0, ch, 0, 0), 4.0 * c);
            assert_eq!(y.at(0, ch, 0, 3), 4.0 * c);
            assert_eq!(y.at(0, ch, 3, 3), 4.0 * c);
            assert_eq!(y.at(0, ch, 0, 1), 6.0 * c);
        }
    }

    #[test]
    fn full_image_stride_conv_shape() {
        // k=32, s=32 dense conv on (1,3,224,224) gives 7x7 output.
        let x = Tensor::zeros(shape(1, 3, 224, 224));
        let p = ConvParams::dense(3, 8, 32, 32);
        let w = Tensor::zeros(shape(8, 3, 32, 32));
        let y = conv2d(&x, &w, None, &p).unwrap();
        assert_eq!(y.shape(), shape(1, 8, 7, 7));
    }

    #[test]
    fn same_padding_output_len() {
        let p = ConvParams::dense(1, 1, 3, 2);
        assert_eq!(conv_output_len(&p, 224).unwrap(), 112);
        assert_eq!(conv_output_len(&p, 7).unwrap(), 4);
    }

    #[test]
    fn valid_output_len_with_dilation() {
        let mut p = ConvParams::dense(1, 1, 3, 1);
        p.padding = Padding::Valid;
        p.dilation = 2;
        // (h - (k-1)d - 1)/s + 1 = (9 - 4 - 1)/1 + 1 = 5
        assert_eq!(conv_output_len(&p, 9).unwrap(), 5);
        assert!(conv_output_len(&p, 4).is_err());
    }

    #[test]
    fn group_divisibility_enforced() {
        let p = ConvParams {
            groups: 3,
            ..ConvParams::dense(4, 8, 1, 1)
        };
        let x = Tensor::zeros(shape(1, 4, 2, 2));
        let w = Tensor::zeros(shape(8, 1, 1, 1));
        assert!(conv2d(&x, &w, None, &p).is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let p = ConvParams::dense(3, 4, 1, 1);
        let x = Tensor::zeros(shape(1, 2, 2, 2));
        let w = Tensor::zeros(shape(4, 3, 1, 1));
        assert!(conv2d(&x, &w, None, &p).is_err());
    }

    #[test]
    fn identity_conv_backward_passes_grad_through() {
        let mut rng = Rng::new(5);
        let x = Tensor::rand_normal(shape(1, 3, 4, 4), &mut rng, 1.0);
        let mut w = Tensor::zeros(shape(3, 3, 1, 1));
        for i in 0..3 {
            w.set(i, i, 0, 0, 1.0);
        }
        let p = ConvParams::dense(3, 3, 1, 1);
        let gy = Tensor::rand_normal(shape(1, 3, 4, 4), &mut rng, 1.0);
        let grads = conv2d_backward(&x, &w, &p, &gy, false).unwrap();
        assert_eq!(grads.input.data(), gy.data());
    }

    #[test]
    fn conv_matches_naive_reference() {
        // Brute-force per-element reference on a strided, dilated, grouped case.
        let mut rng = Rng::new(9);
        let p = ConvParams {
            in_ch: 4,
            out_ch: 6,
            kernel: 3,
            stride: 2,
            dilation: 2,
            groups: 2,
            padding: Padding::SameZero,
        };
        let x = Tensor::rand_normal(shape(2, 4, 9, 8), &mut rng, 1.0);
        let w = Tensor::rand_normal(p.weight_shape().unwrap(), &mut rng, 1.0);
        let b = Tensor::rand_normal(shape(1, 6, 1, 1), &mut rng, 1.0);
        let fast = conv2d(&x, &w, Some(&b), &p).unwrap();

        let (out_h, pad_t) = p.geometry(9).unwrap();
        let (out_w, pad_l) = p.geometry(8).unwrap();
        let icpg = p.in_ch / p.groups;
        let ocpg = p.out_ch / p.groups;
        for n in 0..2 {
            for oc in 0..p.out_ch {
                let g = oc / ocpg;
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut acc = b.at(0, oc, 0, 0);
                        for il in 0..icpg {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = oy * 2 + ky * 2;
                                    let ix = ox * 2 + kx * 2;
                                    if iy < pad_t || ix < pad_l {
                                        continue;
                                    }
                                    let (iy, ix) = (iy - pad_t, ix - pad_l);
                                    if iy >= 9 || ix >= 8 {
                                        continue;
                                    }
                                    acc += w.at(oc, il, ky, kx) * x.at(n, g * icpg + il, iy, ix);
                                }
                            }
                        }
                        let got = fast.at(n, oc, oy, ox);
                        assert!(
                            (got - acc).abs() <= 1e-5 * acc.abs().max(1.0),
                            "mismatch at ({n},{oc},{oy},{ox}): {got} vs {acc}"
                        );
                    }
                }
            }
        }
    }
}
