//! Lossless spatial rearrangements: space-to-depth / depth-to-space and the
//! polyphase space-to-batch / batch-to-space pair. All four are pure index
//! permutations; each backward is the inverse map applied to the gradient.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, TensorF};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RearrangeDirection {
    SpaceToDepth,
    DepthToSpace,
    SpaceToBatch,
    BatchToSpace,
}

/// Block rearrangement descriptor: block size plus direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRearrange {
    pub block: usize,
    pub direction: RearrangeDirection,
}

/// (n, c, h, w) -> (n, c*k^2, h/k, w/k).
/// Output channel (cy*k + cx)*c + ci at (y, x) takes input (ci, y*k+cy, x*k+cx):
/// phase-major, input-channel-minor ordering.
pub fn space_to_depth<F: Scalar>(x: &TensorF<F>, k: usize) -> Result<TensorF<F>> {
    if k == 0 {
        return Err(Error::shape("block size must be >= 1".to_string()));
    }
    if k == 1 {
        return Ok(x.clone());
    }
    let s = x.shape();
    if s.h % k != 0 || s.w % k != 0 {
        return Err(Error::Divisibility(format!(
            "space_to_depth: spatial {}x{} not divisible by block {}",
            s.h, s.w, k
        )));
    }
    let out_shape = Shape4::new(s.n, s.c * k * k, s.h / k, s.w / k)?;
    let mut out = TensorF::zeros(out_shape);
    for n in 0..s.n {
        for cy in 0..k {
            for cx in 0..k {
                for ci in 0..s.c {
                    let oc = (cy * k + cx) * s.c + ci;
                    for y in 0..out_shape.h {
                        for x_ in 0..out_shape.w {
                            let v = x.at(n, ci, y * k + cy, x_ * k + cx);
                            out.set(n, oc, y, x_, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of `space_to_depth`.
pub fn depth_to_space<F: Scalar>(x: &TensorF<F>, k: usize) -> Result<TensorF<F>> {
    if k == 0 {
        return Err(Error::shape("block size must be >= 1".to_string()));
    }
    if k == 1 {
        return Ok(x.clone());
    }
    let s = x.shape();
    if s.c % (k * k) != 0 {
        return Err(Error::Divisibility(format!(
            "depth_to_space: {} channels not divisible by k^2 = {}",
            s.c,
            k * k
        )));
    }
    let c_out = s.c / (k * k);
    let out_shape = Shape4::new(s.n, c_out, s.h * k, s.w * k)?;
    let mut out = TensorF::zeros(out_shape);
    for n in 0..s.n {
        for cy in 0..k {
            for cx in 0..k {
                for ci in 0..c_out {
                    let ic = (cy * k + cx) * c_out + ci;
                    for y in 0..s.h {
                        for x_ in 0..s.w {
                            let v = x.at(n, ic, y, x_);
                            out.set(n, ci, y * k + cy, x_ * k + cx, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// (n, c, h, w) -> (n*k^2, c, h/k, w/k). Replica r = cy*k + cx holds the
/// polyphase component with offsets (cy, cx); output batch index is
/// n*k^2 + r (replicas of one sample stay contiguous).
pub fn space_to_batch<F: Scalar>(x: &TensorF<F>, k: usize) -> Result<TensorF<F>> {
    if k == 0 {
        return Err(Error::shape("block size must be >= 1".to_string()));
    }
    if k == 1 {
        return Ok(x.clone());
    }
    let s = x.shape();
    if s.h % k != 0 || s.w % k != 0 {
        return Err(Error::Divisibility(format!(
            "space_to_batch: spatial {}x{} not divisible by block {}",
            s.h, s.w, k
        )));
    }
    let out_shape = Shape4::new(s.n * k * k, s.c, s.h / k, s.w / k)?;
    let mut out = TensorF::zeros(out_shape);
    for n in 0..s.n {
        for cy in 0..k {
            for cx in 0..k {
                let ob = n * k * k + cy * k + cx;
                for ci in 0..s.c {
                    for y in 0..out_shape.h {
                        for x_ in 0..out_shape.w {
                            let v = x.at(n, ci, y * k + cy, x_ * k + cx);
                            out.set(ob, ci, y, x_, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of `space_to_batch`.
pub fn batch_to_space<F: Scalar>(x: &TensorF<F>, k: usize) -> Result<TensorF<F>> {
    if k == 0 {
        return Err(Error::shape("block size must be >= 1".to_string()));
    }
    if k == 1 {
        return Ok(x.clone());
    }
    let s = x.shape();
    if s.n % (k * k) != 0 {
        return Err(Error::Divisibility(format!(
            "batch_to_space: batch {} not divisible by k^2 = {}",
            s.n,
            k * k
        )));
    }
    let n_out = s.n / (k * k);
    let out_shape = Shape4::new(n_out, s.c, s.h * k, s.w * k)?;
    let mut out = TensorF::zeros(out_shape);
    for n in 0..n_out {
        for cy in 0..k {
            for cx in 0..k {
                let ib = n * k * k + cy * k + cx;
                for ci in 0..s.c {
                    for y in 0..s.h {
                        for x_ in 0..s.w {
                            let v = x.at(ib, ci, y, x_);
                            out.set(n, ci, y * k + cy, x_ * k + cx, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
