//! Elementwise nonlinearities and the softmax cross-entropy head.
//!
//! hard_sigmoid(t) = clamp((t+3)/6, 0, 1) and hard_swish(t) = t*hard_sigmoid(t).
//! Subgradients at the breakpoints t = ±3 take the interior branch.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, TensorF};

#[inline]
pub fn hard_sigmoid<F: Scalar>(t: F) -> F {
    let three = F::from_f64(3.0);
    let six = F::from_f64(6.0);
    ((t + three) / six).max(F::zero()).min(F::one())
}

/// d/dt hard_sigmoid, interior branch on [-3, 3].
#[inline]
pub fn hard_sigmoid_grad<F: Scalar>(t: F) -> F {
    let three = F::from_f64(3.0);
    if t >= -three && t <= three {
        F::from_f64(1.0 / 6.0)
    } else {
        F::zero()
    }
}

pub fn relu<F: Scalar>(x: &TensorF<F>) -> TensorF<F> {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
    out
}

pub fn relu_backward<F: Scalar>(x: &TensorF<F>, grad_out: &TensorF<F>) -> TensorF<F> {
    let mut gx = grad_out.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
        if v < F::zero() {
            *g = F::zero();
        }
    }
    gx
}

pub fn hard_swish<F: Scalar>(x: &TensorF<F>) -> TensorF<F> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = *v * hard_sigmoid(*v);
    }
    out
}

/// d/dt (t*hs(t)) = (2t+3)/6 on [-3, 3], 0 below, 1 above.
pub fn hard_swish_backward<F: Scalar>(x: &TensorF<F>, grad_out: &TensorF<F>) -> TensorF<F> {
    let three = F::from_f64(3.0);
    let six = F::from_f64(6.0);
    let two = F::from_f64(2.0);
    let mut gx = grad_out.clone();
    for (g, &t) in gx.data_mut().iter_mut().zip(x.data()) {
        let d = if t < -three {
            F::zero()
        } else if t > three {
            F::one()
        } else {
            (two * t + three) / six
        };
        *g = *g * d;
    }
    gx
}

#[derive(Debug)]
pub struct CrossEntropySaved<F> {
    /// Softmax probabilities, shape (n, classes, 1, 1).
    pub probs: TensorF<F>,
}

/// Mean softmax cross-entropy over the batch with optional label smoothing.
/// Logits are max-subtracted per sample for stability. Target distribution is
/// (1 - smoothing) * onehot + smoothing / classes.
pub fn softmax_cross_entropy<F: Scalar>(
    logits: &TensorF<F>,
    labels: &[usize],
    smoothing: f64,
) -> Result<(F, CrossEntropySaved<F>)> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::shape(format!(
            "softmax_cross_entropy expects (n, classes, 1, 1), got {s}"
        )));
    }
    if labels.len() != s.n {
        return Err(Error::Data(format!(
            "label count {} != batch size {}",
            labels.len(),
            s.n
        )));
    }
    let classes = s.c;
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Data(format!(
                "label {l} out of range for {classes} classes (sample {i})"
            )));
        }
    }
    let uniform = F::from_f64(smoothing / classes as f64);
    let on = F::from_f64(1.0 - smoothing);
    let mut probs = TensorF::zeros(s);
    let mut total = F::zero();
    for n in 0..s.n {
        let row = &logits.data()[n * classes..(n + 1) * classes];
        let mut maxv = row[0];
        for &v in row {
            if v > maxv {
                maxv = v;
            }
        }
        let mut denom = F::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - maxv).exp();
            probs.data_mut()[n * classes + j] = e;
            denom = denom + e;
        }
        let log_denom = denom.ln();
        let mut sample_loss = F::zero();
        for (j, &v) in row.iter().enumerate() {
            let logp = (v - maxv) - log_denom;
            probs.data_mut()[n * classes + j] = probs.data()[n * classes + j] / denom;
            let q = if j == labels[n] { on + uniform } else { uniform };
            sample_loss = sample_loss - q * logp;
        }
        total = total + sample_loss;
    }
    let loss = total / F::from_f64(s.n as f64);
    Ok((loss, CrossEntropySaved { probs }))
}

/// Gradient of the mean loss with respect to the logits: (p - q) / n.
pub fn softmax_cross_entropy_backward<F: Scalar>(
    saved: &CrossEntropySaved<F>,
    labels: &[usize],
    smoothing: f64,
) -> TensorF<F> {
    let s = saved.probs.shape();
    let classes = s.c;
    let uniform = F::from_f64(smoothing / classes as f64);
    let on = F::from_f64(1.0 - smoothing);
    let inv_n = F::one() / F::from_f64(s.n as f64);
    let mut grad = saved.probs.clone();
    for n in 0..s.n {
        for j in 0..classes {
            let q = if j == labels[n] { on + uniform } else { uniform };
            let i = n * classes + j;
            grad.data_mut()[i] = (grad.data()[i] - q) * inv_n;
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape4, Tensor};

    fn logits(n: usize, k: usize, vals: Vec<f32>) -> Tensor {
        Tensor::from_vec(Shape4::new(n, k, 1, 1).unwrap(), vals).unwrap()
    }

    #[test]
    fn hard_swish_breakpoints() {
        let x = Tensor::from_vec(
            Shape4::new(1, 1, 1, 5).unwrap(),
            vec![0.0, 3.0, -3.0, 6.0, -6.0],
        )
        .unwrap();
        let y = hard_swish(&x);
        assert_eq!(y.data(), &[0.0, 3.0, 0.0, 6.0, 0.0]);
    }

    #[test]
    fn hard_sigmoid_clamps() {
        assert_eq!(hard_sigmoid(0.0f32), 0.5);
        assert_eq!(hard_sigmoid(3.0f32), 1.0);
        assert_eq!(hard_sigmoid(-3.0f32), 0.0);
        assert_eq!(hard_sigmoid(100.0f32), 1.0);
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let x = logits(1, 1000, vec![0.25; 1000]);
        let (loss, _) = softmax_cross_entropy(&x, &[17], 0.0).unwrap();
        assert!((loss - 1000f32.ln()).abs() < 1e-4, "loss = {loss}");
        // Label smoothing does not change the uniform-logit loss analytically;
        // f32 accumulation over 1000 smoothed terms needs a looser bound.
        let (loss_ls, _) = softmax_cross_entropy(&x, &[17], 0.1).unwrap();
        assert!((loss_ls - 1000f32.ln()).abs() < 1e-3);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let x = logits(1, 4, vec![0.0; 4]);
        assert!(softmax_cross_entropy(&x, &[4], 0.0).is_err());
    }

    #[test]
    fn batch_size_mismatch_rejected() {
        let x = logits(2, 3, vec![0.0; 6]);
        assert!(softmax_cross_entropy(&x, &[1], 0.0).is_err());
    }

    #[test]
    fn ce_gradient_sums_to_zero_per_sample() {
        let x = logits(2, 5, vec![0.3, -1.0, 2.0, 0.0, 0.5, 1.0, 1.0, -2.0, 0.1, 0.0]);
        let (_, saved) = softmax_cross_entropy(&x, &[2, 0], 0.1).unwrap();
        let g = softmax_cross_entropy_backward(&saved, &[2, 0], 0.1);
        for n in 0..2 {
            let s: f32 = g.data()[n * 5..(n + 1) * 5].iter().sum();
            assert!(s.abs() < 1e-6);
        }
    }
}
