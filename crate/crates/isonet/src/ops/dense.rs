//! Global average pooling and the fully connected layer.

use crate::error::{Error, Result};
use crate::tensor::{Axes, reduce, ReduceKind, Scalar, Shape4, TensorF};
use rayon::prelude::*;

const PAR_WORK_THRESHOLD: usize = 1 << 16;

/// (n, c, h, w) -> (n, c, 1, 1), mean over the spatial plane in row-major
/// order.
pub fn global_avg_pool<F: Scalar>(x: &TensorF<F>) -> TensorF<F> {
    reduce(x, Axes::spatial(), ReduceKind::Mean)
}

/// Spreads the pooled gradient uniformly back over the plane.
pub fn global_avg_pool_backward<F: Scalar>(in_shape: Shape4, grad_out: &TensorF<F>) -> TensorF<F> {
    let mut gx = TensorF::zeros(in_shape);
    let scale = F::one() / F::from_f64(in_shape.plane() as f64);
    let plane = in_shape.plane();
    for n in 0..in_shape.n {
        for c in 0..in_shape.c {
            let g = grad_out.at(n, c, 0, 0) * scale;
            let start = (n * in_shape.c + c) * plane;
            for v in &mut gx.data_mut()[start..start + plane] {
                *v = g;
            }
        }
    }
    gx
}

/// x (n, in, 1, 1) with weights (out, in, 1, 1) and bias (1, out, 1, 1)
/// -> (n, out, 1, 1). Accumulates over the input dimension in ascending
/// order.
pub fn fully_connected<F: Scalar>(
    x: &TensorF<F>,
    weights: &TensorF<F>,
    bias: &TensorF<F>,
) -> Result<TensorF<F>> {
    let s = x.shape();
    let ws = weights.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::shape(format!(
            "fully_connected expects pooled input (n,c,1,1), got {s}"
        )));
    }
    if ws.c != s.c || ws.h != 1 || ws.w != 1 {
        return Err(Error::shape(format!(
            "fully_connected: weight shape {ws} incompatible with input {s}"
        )));
    }
    if bias.shape() != Shape4::new(1, ws.n, 1, 1)? {
        return Err(Error::shape(format!(
            "fully_connected: bias shape {} must be (1,{},1,1)",
            bias.shape(),
            ws.n
        )));
    }
    let (in_dim, out_dim) = (ws.c, ws.n);
    let mut out = TensorF::zeros(Shape4::new(s.n, out_dim, 1, 1)?);
    let xd = x.data();
    let wd = weights.data();
    let bd = bias.data();
    let body = |n: usize, orow: &mut [F]| {
        let xrow = &xd[n * in_dim..(n + 1) * in_dim];
        for (o, slot) in orow.iter_mut().enumerate() {
            let wrow = &wd[o * in_dim..(o + 1) * in_dim];
            let mut acc = bd[o];
            for (wv, xv) in wrow.iter().zip(xrow) {
                acc = acc + *wv * *xv;
            }
            *slot = acc;
        }
    };
    if s.n * out_dim * in_dim >= PAR_WORK_THRESHOLD {
        out.data_mut()
            .par_chunks_mut(out_dim)
            .enumerate()
            .for_each(|(n, orow)| body(n, orow));
    } else {
        for (n, orow) in out.data_mut().chunks_mut(out_dim).enumerate() {
            body(n, orow);
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct FcGrads<F> {
    pub input: TensorF<F>,
    pub weights: TensorF<F>,
    pub bias: TensorF<F>,
}

pub fn fully_connected_backward<F: Scalar>(
    x: &TensorF<F>,
    weights: &TensorF<F>,
    grad_out: &TensorF<F>,
) -> Result<FcGrads<F>> {
    let s = x.shape();
    let ws = weights.shape();
    let (in_dim, out_dim) = (ws.c, ws.n);
    if grad_out.shape() != Shape4::new(s.n, out_dim, 1, 1)? {
        return Err(Error::shape(format!(
            "fully_connected_backward: grad shape {} unexpected",
            grad_out.shape()
        )));
    }
    let xd = x.data();
    let gd = grad_out.data();
    let wd = weights.data();

    let work = s.n * out_dim * in_dim;
    let mut gw = TensorF::zeros(ws);
    let gw_body = |o: usize, grow: &mut [F]| {
        for n in 0..s.n {
            let g = gd[n * out_dim + o];
            let xrow = &xd[n * in_dim..(n + 1) * in_dim];
            for (slot, xv) in grow.iter_mut().zip(xrow) {
                *slot = *slot + g * *xv;
            }
        }
    };
    if work >= PAR_WORK_THRESHOLD {
        gw.data_mut()
            .par_chunks_mut(in_dim)
            .enumerate()
            .for_each(|(o, grow)| gw_body(o, grow));
    } else {
        for (o, grow) in gw.data_mut().chunks_mut(in_dim).enumerate() {
            gw_body(o, grow);
        }
    }

    let mut gb = TensorF::zeros(Shape4::new(1, out_dim, 1, 1)?);
    for n in 0..s.n {
        for o in 0..out_dim {
            gb.data_mut()[o] = gb.data_mut()[o] + gd[n * out_dim + o];
        }
    }

    let mut gx = TensorF::zeros(s);
    let gx_body = |n: usize, grow: &mut [F]| {
        for o in 0..out_dim {
            let g = gd[n * out_dim + o];
            let wrow = &wd[o * in_dim..(o + 1) * in_dim];
            for (slot, wv) in grow.iter_mut().zip(wrow) {
                *slot = *slot + g * *wv;
            }
        }
    };
    if work >= PAR_WORK_THRESHOLD {
        gx.data_mut()
            .par_chunks_mut(in_dim)
            .enumerate()
            .for_each(|(n, grow)| gx_body(n, grow));
    } else {
        for (n, grow) in gx.data_mut().chunks_mut(in_dim).enumerate() {
            gx_body(n, grow);
        }
    }

    Ok(FcGrads {
        input: gx,
        weights: gw,
        bias: gb,
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
    fn gap_shape_and_constant() {
        let x = Tensor::full(shape(1, 768, 14, 14), 1.5);
        let y = global_avg_pool(&x);
        assert_eq!(y.shape(), shape(1, 768, 1, 1));
        for &v in y.data() {
            assert_eq!(v, 1.5);
        }
    }

    #[test]
    fn fc_matches_manual() {
        let x = Tensor::from_vec(shape(1, 2, 1, 1), vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(shape(3, 2, 1, 1), vec![1., 0., 0., 1., 1., 1.]).unwrap();
        let b = Tensor::from_vec(shape(1, 3, 1, 1), vec![0.5, -0.5, 0.0]).unwrap();
        let y = fully_connected(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.5, 1.5, 3.0]);
    }

    #[test]
    fn fc_rejects_unpooled_input() {
        let x = Tensor::zeros(shape(1, 2, 2, 2));
        let w = Tensor::zeros(shape(3, 2, 1, 1));
        let b = Tensor::zeros(shape(1, 3, 1, 1));
        assert!(fully_connected(&x, &w, &b).is_err());
    }

    #[test]
    fn gap_backward_uniform() {
        let gy = Tensor::from_vec(shape(1, 1, 1, 1), vec![8.0]).unwrap();
        let gx = global_avg_pool_backward(shape(1, 1, 2, 2), &gy);
        assert_eq!(gx.data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn fc_backward_shapes() {
        let mut rng = Rng::new(1);
        let x = Tensor::rand_normal(shape(4, 6, 1, 1), &mut rng, 1.0);
        let w = Tensor::rand_normal(shape(3, 6, 1, 1), &mut rng, 1.0);
        let gy = Tensor::rand_normal(shape(4, 3, 1, 1), &mut rng, 1.0);
        let grads = fully_connected_backward(&x, &w, &gy).unwrap();
        assert_eq!(grads.input.shape(), x.shape());
        assert_eq!(grads.weights.shape(), w.shape());
        assert_eq!(grads.bias.shape(), shape(1, 3, 1, 1));
    }
}
