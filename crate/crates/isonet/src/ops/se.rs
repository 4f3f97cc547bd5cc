//! Squeeze-excite channel gating: global mean over the spatial plane, a
//! two-layer bottleneck (relu inside, hard-sigmoid gate), and a per-channel
//! multiplicative gate broadcast back over space.

use crate::error::{Error, Result};
use crate::ops::activation::{hard_sigmoid, hard_sigmoid_grad};
use crate::ops::dense::global_avg_pool;
use crate::tensor::{Scalar, Shape4, TensorF};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqueezeExciteParams {
    /// Gated width (the block's expansion width).
    pub channels: usize,
    /// Reduction factor z; hidden width = channels / z.
    pub reduction: usize,
}

impl SqueezeExciteParams {
    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || self.channels % self.reduction != 0 || self.hidden() == 0 {
            return Err(Error::Divisibility(format!(
                "squeeze-excite: channels {} not divisible by reduction {} (hidden >= 1 required)",
                self.channels, self.reduction
            )));
        }
        Ok(())
    }
}

/// Saved forward state for the backward pass.
#[derive(Debug)]
pub struct SeSaved<F> {
    pub pooled: TensorF<F>,   // (n, c, 1, 1)
    pub pre1: TensorF<F>,     // (n, hidden, 1, 1), before relu
    pub hidden: TensorF<F>,   // (n, hidden, 1, 1), after relu
    pub pre2: TensorF<F>,     // (n, c, 1, 1), before hard-sigmoid
    pub gate: TensorF<F>,     // (n, c, 1, 1)
}

/// w1: (hidden, c, 1, 1), b1: (1, hidden, 1, 1), w2: (c, hidden, 1, 1),
/// b2: (1, c, 1, 1). Output = x * gate, gate broadcast over (h, w).
#[allow(clippy::too_many_arguments)]
pub fn squeeze_excite<F: Scalar>(
    x: &TensorF<F>,
    w1: &TensorF<F>,
    b1: &TensorF<F>,
    w2: &TensorF<F>,
    b2: &TensorF<F>,
    p: &SqueezeExciteParams,
) -> Result<(TensorF<F>, SeSaved<F>)> {
    p.validate()?;
    let s = x.shape();
    if s.c != p.channels {
        return Err(Error::shape(format!(
            "squeeze_excite: input has {} channels, params expect {}",
            s.c, p.channels
        )));
    }
    let hid = p.hidden();
    if w1.shape() != Shape4::new(hid, s.c, 1, 1)?
        || b1.shape() != Shape4::new(1, hid, 1, 1)?
        || w2.shape() != Shape4::new(s.c, hid, 1, 1)?
        || b2.shape() != Shape4::new(1, s.c, 1, 1)?
    {
        return Err(Error::shape("squeeze_excite: parameter shape mismatch".to_string()));
    }

    let pooled = global_avg_pool(x);
    let mut pre1 = TensorF::zeros(Shape4::new(s.n, hid, 1, 1)?);
    for n in 0..s.n {
        for o in 0..hid {
            let mut acc = b1.data()[o];
            for c in 0..s.c {
                acc = acc + w1.data()[o * s.c + c] * pooled.data()[n * s.c + c];
            }
            pre1.data_mut()[n * hid + o] = acc;
        }
    }
    let mut hidden = pre1.clone();
    for v in hidden.data_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
    let mut pre2 = TensorF::zeros(Shape4::new(s.n, s.c, 1, 1)?);
    for n in 0..s.n {
        for o in 0..s.c {
            let mut acc = b2.data()[o];
            for h in 0..hid {
                acc = acc + w2.data()[o * hid + h] * hidden.data()[n * hid + h];
            }
            pre2.data_mut()[n * s.c + o] = acc;
        }
    }
    let mut gate = pre2.clone();
    for v in gate.data_mut() {
        *v = hard_sigmoid(*v);
    }

    let mut out = TensorF::zeros(s);
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let g = gate.data()[n * s.c + c];
            let start = (n * s.c + c) * plane;
            for i in 0..plane {
                out.data_mut()[start + i] = x.data()[start + i] * g;
            }
        }
    }
    Ok((
        out,
        SeSaved {
            pooled,
            pre1,
            hidden,
            pre2,
            gate,
        },
    ))
}

#[derive(Debug)]
pub struct SeGrads<F> {
    pub input: TensorF<F>,
    pub w1: TensorF<F>,
    pub b1: TensorF<F>,
    pub w2: TensorF<F>,
    pub b2: TensorF<F>,
}

pub fn squeeze_excite_backward<F: Scalar>(
    x: &TensorF<F>,
    w1: &TensorF<F>,
    w2: &TensorF<F>,
    p: &SqueezeExciteParams,
    saved: &SeSaved<F>,
    grad_out: &TensorF<F>,
) -> Result<SeGrads<F>> {
    let s = x.shape();
    if grad_out.shape() != s {
        return Err(Error::shape(format!(
            "squeeze_excite_backward: grad shape {} != input {}",
            grad_out.shape(),
            s
        )));
    }
    let hid = p.hidden();
    let plane = s.plane();

    // d(out)/d(gate): sum over the plane of gy * x; d(out)/dx direct term.
    let mut g_gate = TensorF::zeros(Shape4::new(s.n, s.c, 1, 1)?);
    let mut gx = TensorF::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * plane;
            let g = saved.gate.data()[n * s.c + c];
            let mut acc = F::zero();
            for i in 0..plane {
                let gy = grad_out.data()[start + i];
                acc = acc + gy * x.data()[start + i];
                gx.data_mut()[start + i] = gy * g;
            }
            g_gate.data_mut()[n * s.c + c] = acc;
        }
    }

    // Through the hard-sigmoid.
    let mut g_pre2 = g_gate;
    for (g, &t) in g_pre2.data_mut().iter_mut().zip(saved.pre2.data()) {
        *g = *g * hard_sigmoid_grad(t);
    }

    // Second FC: pre2 = w2 * hidden + b2.
    let mut gw2 = TensorF::zeros(w2.shape());
    let mut gb2 = TensorF::zeros(Shape4::new(1, s.c, 1, 1)?);
    let mut g_hidden = TensorF::zeros(Shape4::new(s.n, hid, 1, 1)?);
    for n in 0..s.n {
        for o in 0..s.c {
            let g = g_pre2.data()[n * s.c + o];
            gb2.data_mut()[o] = gb2.data_mut()[o] + g;
            for h in 0..hid {
                gw2.data_mut()[o * hid + h] =
                    gw2.data_mut()[o * hid + h] + g * saved.hidden.data()[n * hid + h];
                g_hidden.data_mut()[n * hid + h] =
                    g_hidden.data_mut()[n * hid + h] + g * w2.data()[o * hid + h];
            }
        }
    }

    // Relu.
    let mut g_pre1 = g_hidden;
    for (g, &t) in g_pre1.data_mut().iter_mut().zip(saved.pre1.data()) {
        if t < F::zero() {
            *g = F::zero();
        }
    }

    // First FC: pre1 = w1 * pooled + b1.
    let mut gw1 = TensorF::zeros(w1.shape());
    let mut gb1 = TensorF::zeros(Shape4::new(1, hid, 1, 1)?);
    let mut g_pooled: TensorF<F> = TensorF::zeros(Shape4::new(s.n, s.c, 1, 1)?);
    for n in 0..s.n {
        for o in 0..hid {
            let g = g_pre1.data()[n * hid + o];
            gb1.data_mut()[o] = gb1.data_mut()[o] + g;
            for c in 0..s.c {
                gw1.data_mut()[o * s.c + c] =
                    gw1.data_mut()[o * s.c + c] + g * saved.pooled.data()[n * s.c + c];
                g_pooled.data_mut()[n * s.c + c] =
                    g_pooled.data_mut()[n * s.c + c] + g * w1.data()[o * s.c + c];
            }
        }
    }

    // Pooled mean spreads back uniformly.
    let inv_plane = F::one() / F::from_f64(plane as f64);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = g_pooled.data()[n * s.c + c] * inv_plane;
            let start = (n * s.c + c) * plane;
            for i in 0..plane {
                gx.data_mut()[start + i] = gx.data_mut()[start + i] + g;
            }
        }
    }

    Ok(SeGrads {
        input: gx,
        w1: gw1,
        b1: gb1,
        w2: gw2,
        b2: gb2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Tensor};

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, c, h, w).unwrap()
    }

    fn se_params(x_shape: Shape4, p: &SqueezeExciteParams, b2_val: f32) -> (Tensor, Tensor, Tensor, Tensor) {
        let hid = p.hidden();
        let w1 = Tensor::zeros(shape(hid, x_shape.c, 1, 1));
        let b1 = Tensor::zeros(shape(1, hid, 1, 1));
        let w2 = Tensor::zeros(shape(x_shape.c, hid, 1, 1));
        let b2 = Tensor::full(shape(1, x_shape.c, 1, 1), b2_val);
        (w1, b1, w2, b2)
    }

    #[test]
    fn saturated_gate_is_identity() {
        let p = SqueezeExciteParams { channels: 4, reduction: 4 };
        let mut rng = Rng::new(1);
        let x = Tensor::rand_normal(shape(2, 4, 3, 3), &mut rng, 1.0);
        // Zero weights so the gate pre-activation is b2 = +3: gate == 1.
        let (w1, b1, w2, b2) = se_params(x.shape(), &p, 3.0);
        let (y, saved) = squeeze_excite(&x, &w1, &b1, &w2, &b2, &p).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(saved.gate.data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn closed_gate_zeroes_output() {
        let p = SqueezeExciteParams { channels: 4, reduction: 2 };
        let mut rng = Rng::new(2);
        let x = Tensor::rand_normal(shape(1, 4, 2, 2), &mut rng, 1.0);
        let (w1, b1, w2, b2) = se_params(x.shape(), &p, -3.0);
        let (y, _) = squeeze_excite(&x, &w1, &b1, &w2, &b2, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_scalar_reference() {
        // Brute-force per-element reference: loops, no vector ops.
        let p = SqueezeExciteParams { channels: 6, reduction: 3 };
        let hid = p.hidden();
        let mut rng = Rng::new(17);
        let x = Tensor::rand_normal(shape(2, 6, 4, 4), &mut rng, 1.0);
        let w1 = Tensor::rand_normal(shape(hid, 6, 1, 1), &mut rng, 0.5);
        let b1 = Tensor::rand_normal(shape(1, hid, 1, 1), &mut rng, 0.5);
        let w2 = Tensor::rand_normal(shape(6, hid, 1, 1), &mut rng, 0.5);
        let b2 = Tensor::rand_normal(shape(1, 6, 1, 1), &mut rng, 0.5);
        let (y, _) = squeeze_excite(&x, &w1, &b1, &w2, &b2, &p).unwrap();

        for n in 0..2 {
            let mut s = [0f32; 6];
            for (c, slot) in s.iter_mut().enumerate() {
                let mut acc = 0.0;
                for yy in 0..4 {
                    for xx in 0..4 {
                        acc += x.at(n, c, yy, xx);
                    }
                }
                *slot = acc / 16.0;
            }
            for c in 0..6 {
                let mut pre2 = b2.at(0, c, 0, 0);
                for h in 0..hid {
                    let mut pre1 = b1.at(0, h, 0, 0);
                    for ci in 0..6 {
                        pre1 += w1.at(h, ci, 0, 0) * s[ci];
                    }
                    pre2 += w2.at(c, h, 0, 0) * pre1.max(0.0);
                }
                let gate = ((pre2 + 3.0) / 6.0).clamp(0.0, 1.0);
                for yy in 0..4 {
                    for xx in 0..4 {
                        let want = x.at(n, c, yy, xx) * gate;
                        let got = y.at(n, c, yy, xx);
                        assert!((want - got).abs() < 1e-5, "({n},{c},{yy},{xx})");
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_reduction() {
        let p = SqueezeExciteParams { channels: 6, reduction: 4 };
        assert!(p.validate().is_err());
    }
}
