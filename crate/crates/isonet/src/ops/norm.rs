//! Batch normalization over (n, h, w) per channel.
//!
//! Train mode normalizes with the batch statistics (biased variance,
//! eps = 1e-3) and folds them into the running stats with momentum 0.99.
//! Inference mode normalizes with the running stats.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, TensorF};

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics, each (1, c, 1, 1).
#[derive(Debug, Clone)]
pub struct BnStats<F> {
    pub mean: TensorF<F>,
    pub var: TensorF<F>,
}

impl<F: Scalar> BnStats<F> {
    pub fn fresh(channels: usize) -> Self {
        let shape = Shape4::new(1, channels, 1, 1).expect("channels >= 1");
        BnStats {
            mean: TensorF::zeros(shape),
            var: TensorF::full(shape, F::one()),
        }
    }
}

/// Statistics actually used for normalization (batch stats in train mode,
/// running stats in eval mode); backward needs them.
#[derive(Debug, Clone)]
pub struct BnSaved<F> {
    pub mean: TensorF<F>,
    pub var: TensorF<F>,
    pub mode: BnMode,
}

/// y = gamma * (x - mu) / sqrt(var + eps) + beta. In train mode this also
/// updates `stats` in place: running = momentum*running + (1-momentum)*batch.
pub fn batch_norm<F: Scalar>(
    x: &TensorF<F>,
    gamma: &TensorF<F>,
    beta: &TensorF<F>,
    stats: &mut BnStats<F>,
    mode: BnMode,
) -> Result<(TensorF<F>, BnSaved<F>)> {
    let s = x.shape();
    let param_shape = Shape4::new(1, s.c, 1, 1)?;
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running mean", &stats.mean),
        ("running var", &stats.var),
    ] {
        if t.shape() != param_shape {
            return Err(Error::shape(format!(
                "batch_norm: {name} shape {} must be {param_shape}",
                t.shape()
            )));
        }
    }
    let count = s.n * s.h * s.w;
    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = TensorF::zeros(param_shape);
            let mut var = TensorF::zeros(param_shape);
            let inv = F::one() / F::from_f64(count as f64);
            for c in 0..s.c {
                let mut acc = F::zero();
                for n in 0..s.n {
                    let plane = channel_plane(x, n, c);
                    for &v in plane {
                        acc = acc + v;
                    }
                }
                let m = acc * inv;
                let mut vacc = F::zero();
                for n in 0..s.n {
                    let plane = channel_plane(x, n, c);
                    for &v in plane {
                        let d = v - m;
                        vacc = vacc + d * d;
                    }
                }
                mean.data_mut()[c] = m;
                var.data_mut()[c] = vacc * inv;
            }
            let momentum = F::from_f64(BN_MOMENTUM);
            let one_minus = F::one() - momentum;
            for c in 0..s.c {
                stats.mean.data_mut()[c] = stats.mean.data()[c] * momentum + mean.data()[c] * one_minus;
                stats.var.data_mut()[c] = stats.var.data()[c] * momentum + var.data()[c] * one_minus;
            }
            (mean, var)
        }
        BnMode::Eval => (stats.mean.clone(), stats.var.clone()),
    };

    let eps = F::from_f64(BN_EPS);
    let mut out = TensorF::zeros(s);
    for c in 0..s.c {
        let m = mean.data()[c];
        let inv_sd = F::one() / (var.data()[c] + eps).sqrt();
        let g = gamma.data()[c];
        let b = beta.data()[c];
        let scale = g * inv_sd;
        for n in 0..s.n {
            let plane = s.plane();
            let start = (n * s.c + c) * plane;
            for i in 0..plane {
                out.data_mut()[start + i] = (x.data()[start + i] - m) * scale + b;
            }
        }
    }
    Ok((out, BnSaved { mean, var, mode }))
}

#[derive(Debug)]
pub struct BnGrads<F> {
    pub input: TensorF<F>,
    pub gamma: TensorF<F>,
    pub beta: TensorF<F>,
}

pub fn batch_norm_backward<F: Scalar>(
    x: &TensorF<F>,
    gamma: &TensorF<F>,
    saved: &BnSaved<F>,
    grad_out: &TensorF<F>,
) -> Result<BnGrads<F>> {
    let s = x.shape();
    if grad_out.shape() != s {
        return Err(Error::shape(format!(
            "batch_norm_backward: grad shape {} != input {}",
            grad_out.shape(),
            s
        )));
    }
    let param_shape = Shape4::new(1, s.c, 1, 1)?;
    let eps = F::from_f64(BN_EPS);
    let count = F::from_f64((s.n * s.h * s.w) as f64);
    let mut gx = TensorF::zeros(s);
    let mut gg = TensorF::zeros(param_shape);
    let mut gb = TensorF::zeros(param_shape);
    let plane = s.plane();
    for c in 0..s.c {
        let m = saved.mean.data()[c];
        let inv_sd = F::one() / (saved.var.data()[c] + eps).sqrt();
        let g = gamma.data()[c];
        // Channel sums in fixed (n, y, x) order.
        let mut sum_gy = F::zero();
        let mut sum_gy_xhat = F::zero();
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            for i in 0..plane {
                let gy = grad_out.data()[start + i];
                let xhat = (x.data()[start + i] - m) * inv_sd;
                sum_gy = sum_gy + gy;
                sum_gy_xhat = sum_gy_xhat + gy * xhat;
            }
        }
        gb.data_mut()[c] = sum_gy;
        gg.data_mut()[c] = sum_gy_xhat;
        match saved.mode {
            BnMode::Train => {
                let mean_gy = sum_gy / count;
                let mean_gy_xhat = sum_gy_xhat / count;
                for n in 0..s.n {
                    let start = (n * s.c + c) * plane;
                    for i in 0..plane {
                        let gy = grad_out.data()[start + i];
                        let xhat = (x.data()[start + i] - m) * inv_sd;
                        gx.data_mut()[start + i] =
                            g * inv_sd * (gy - mean_gy - xhat * mean_gy_xhat);
                    }
                }
            }
            BnMode::Eval => {
                // Running stats are constants: the layer is affine.
                let scale = g * inv_sd;
                for n in 0..s.n {
                    let start = (n * s.c + c) * plane;
                    for i in 0..plane {
                        gx.data_mut()[start + i] = grad_out.data()[start + i] * scale;
                    }
                }
            }
        }
    }
    Ok(BnGrads {
        input: gx,
        gamma: gg,
        beta: gb,
    })
}

#[inline]
fn channel_plane<'a, F: Scalar>(x: &'a TensorF<F>, n: usize, c: usize) -> &'a [F] {
    let s = x.shape();
    let plane = s.plane();
    &x.data()[(n * s.c + c) * plane..(n * s.c + c + 1) * plane]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Tensor};

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, c, h, w).unwrap()
    }

    #[test]
    fn train_mode_normalizes() {
        let mut rng = Rng::new(42);
        let x = Tensor::rand_normal(shape(4, 3, 6, 6), &mut rng, 2.0);
        let gamma = Tensor::full(shape(1, 3, 1, 1), 1.0);
        let beta = Tensor::zeros(shape(1, 3, 1, 1));
        let mut stats = BnStats::fresh(3);
        let (y, _) = batch_norm(&x, &gamma, &beta, &mut stats, BnMode::Train).unwrap();
        let count = 4.0 * 36.0;
        for c in 0..3 {
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            for n in 0..4 {
                for i in 0..36 {
                    let v = y.data()[(n * 3 + c) * 36 + i] as f64;
                    sum += v;
                    sumsq += v * v;
                }
            }
            let mean = sum / count;
            let var = sumsq / count - mean * mean;
            assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
            // Normalized variance is var/(var+eps), slightly below 1.
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn running_stats_update() {
        let x = Tensor::full(shape(2, 1, 2, 2), 4.0);
        let gamma = Tensor::full(shape(1, 1, 1, 1), 1.0);
        let beta = Tensor::zeros(shape(1, 1, 1, 1));
        let mut stats = BnStats::fresh(1);
        batch_norm(&x, &gamma, &beta, &mut stats, BnMode::Train).unwrap();
        // running_mean = 0.99*0 + 0.01*4
        assert!((stats.mean.data()[0] - 0.04).abs() < 1e-6);
        // batch var of a constant is 0: running_var = 0.99*1
        assert!((stats.var.data()[0] - 0.99).abs() < 1e-6);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::full(shape(1, 1, 2, 2), 3.0);
        let gamma = Tensor::full(shape(1, 1, 1, 1), 2.0);
        let beta = Tensor::full(shape(1, 1, 1, 1), 0.5);
        let mut stats = BnStats::fresh(1);
        stats.mean.data_mut()[0] = 1.0;
        stats.var.data_mut()[0] = 4.0;
        let (y, _) = batch_norm(&x, &gamma, &beta, &mut stats, BnMode::Eval).unwrap();
        let expected = 2.0 * (3.0 - 1.0) / (4.0f32 + 1e-3).sqrt() + 0.5;
        for &v in y.data() {
            assert!((v - expected).abs() < 1e-6);
        }
    }
}
