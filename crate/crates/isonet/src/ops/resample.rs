//! Integer-factor upsampling: nearest, zero-fill dilation of the input grid,
//! and bilinear with half-pixel centers (align_corners = false).

use crate::error::Result;
use crate::tensor::{Scalar, Shape4, TensorF};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Bilinear,
    Nearest,
    ZeroFill,
}

/// Spatial dims scale by `factor`. Zero-fill places input values at
/// stride-`factor` grid positions (y*f, x*f) and zeros elsewhere.
pub fn upsample<F: Scalar>(x: &TensorF<F>, factor: usize, mode: UpsampleMode) -> Result<TensorF<F>> {
    assert!(factor >= 1, "upsample factor must be >= 1");
    if factor == 1 {
        return Ok(x.clone());
    }
    let s = x.shape();
    let out_shape = Shape4::new(s.n, s.c, s.h * factor, s.w * factor)?;
    let mut out = TensorF::zeros(out_shape);
    match mode {
        UpsampleMode::Nearest => {
            for n in 0..s.n {
                for c in 0..s.c {
                    for y in 0..out_shape.h {
                        for x_ in 0..out_shape.w {
                            out.set(n, c, y, x_, x.at(n, c, y / factor, x_ / factor));
                        }
                    }
                }
            }
        }
        UpsampleMode::ZeroFill => {
            for n in 0..s.n {
                for c in 0..s.c {
                    for y in 0..s.h {
                        for x_ in 0..s.w {
                            out.set(n, c, y * factor, x_ * factor, x.at(n, c, y, x_));
                        }
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let (ws_h, idx_h) = bilinear_taps(s.h, factor);
            let (ws_w, idx_w) = bilinear_taps(s.w, factor);
            for n in 0..s.n {
                for c in 0..s.c {
                    for y in 0..out_shape.h {
                        let (y0, y1) = idx_h[y];
                        let wy = ws_h[y];
                        for x_ in 0..out_shape.w {
                            let (x0, x1) = idx_w[x_];
                            let wx = ws_w[x_];
                            let a = x.at(n, c, y0, x0).as_f64();
                            let b = x.at(n, c, y0, x1).as_f64();
                            let cc = x.at(n, c, y1, x0).as_f64();
                            let d = x.at(n, c, y1, x1).as_f64();
                            let top = a * (1.0 - wx) + b * wx;
                            let bot = cc * (1.0 - wx) + d * wx;
                            let v = top * (1.0 - wy) + bot * wy;
                            out.set(n, c, y, x_, F::from_f64(v));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per output coordinate: interpolation weight for the upper tap plus the two
/// clamped source indices. Sample positions use half-pixel centers:
/// src = (dst + 0.5)/factor - 0.5.
fn bilinear_taps(in_len: usize, factor: usize) -> (Vec<f64>, Vec<(usize, usize)>) {
    let out_len = in_len * factor;
    let mut weights = Vec::with_capacity(out_len);
    let mut indices = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let src = (o as f64 + 0.5) / factor as f64 - 0.5;
        let floor = src.floor();
        let frac = src - floor;
        let i0 = floor.max(0.0) as usize;
        let i1 = (floor as i64 + 1).clamp(0, in_len as i64 - 1) as usize;
        // With floor clamped to 0 the fraction keeps full weight on tap 0.
        let w = if floor < 0.0 { 0.0 } else { frac };
        weights.push(w);
        indices.push((i0.min(in_len - 1), i1));
    }
    (weights, indices)
}

/// Adjoint of `upsample`: scatters the output gradient back through the same
/// taps and weights.
pub fn upsample_backward<F: Scalar>(
    in_shape: Shape4,
    factor: usize,
    mode: UpsampleMode,
    grad_out: &TensorF<F>,
) -> Result<TensorF<F>> {
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    let mut gx = TensorF::zeros(in_shape);
    let s = in_shape;
    let os = grad_out.shape();
    match mode {
        UpsampleMode::Nearest => {
            for n in 0..os.n {
                for c in 0..os.c {
                    for y in 0..os.h {
                        for x_ in 0..os.w {
                            let i = s.index(n, c, y / factor, x_ / factor);
                            gx.data_mut()[i] = gx.data_mut()[i] + grad_out.at(n, c, y, x_);
                        }
                    }
                }
            }
        }
        UpsampleMode::ZeroFill => {
            for n in 0..s.n {
                for c in 0..s.c {
                    for y in 0..s.h {
                        for x_ in 0..s.w {
                            gx.set(n, c, y, x_, grad_out.at(n, c, y * factor, x_ * factor));
                        }
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let (ws_h, idx_h) = bilinear_taps(s.h, factor);
            let (ws_w, idx_w) = bilinear_taps(s.w, factor);
            for n in 0..os.n {
                for c in 0..os.c {
                    for y in 0..os.h {
                        let (y0, y1) = idx_h[y];
                        let wy = ws_h[y];
                        for x_ in 0..os.w {
                            let (x0, x1) = idx_w[x_];
                            let wx = ws_w[x_];
                            let g = grad_out.at(n, c, y, x_).as_f64();
                            for (iy, fy) in [(y0, 1.0 - wy), (y1, wy)] {
                                for (ix, fx) in [(x0, 1.0 - wx), (x1, wx)] {
                                    if fy == 0.0 || fx == 0.0 {
                                        continue;
                                    }
                                    let i = s.index(n, c, iy, ix);
                                    gx.data_mut()[i] =
                                        gx.data_mut()[i] + F::from_f64(g * fy * fx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Tensor};

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, c, h, w).unwrap()
    }

    #[test]
    fn factor_one_any_mode_is_identity() {
        let mut rng = Rng::new(3);
        let x = Tensor::rand_normal(shape(1, 2, 3, 3), &mut rng, 1.0);
        for mode in [UpsampleMode::Bilinear, UpsampleMode::Nearest, UpsampleMode::ZeroFill] {
            assert_eq!(upsample(&x, 1, mode).unwrap().data(), x.data());
        }
    }

    #[test]
    fn zero_fill_grid_placement() {
        let x = Tensor::from_vec(shape(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample(&x, 2, UpsampleMode::ZeroFill).unwrap();
        assert_eq!(y.shape(), shape(1, 1, 4, 4));
        assert_eq!(y.at(0, 0, 0, 0), 1.0);
        assert_eq!(y.at(0, 0, 0, 2), 2.0);
        assert_eq!(y.at(0, 0, 2, 0), 3.0);
        assert_eq!(y.at(0, 0, 2, 2), 4.0);
        let placed = 1.0 + 2.0 + 3.0 + 4.0;
        let total: f32 = y.data().iter().sum();
        assert_eq!(total, placed);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = Tensor::full(shape(1, 3, 4, 4), 0.73);
        let y = upsample(&x, 2, UpsampleMode::Bilinear).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.73);
        }
    }

    #[test]
    fn nearest_replicates_blocks() {
        let x = Tensor::from_vec(shape(1, 1, 1, 2), vec![5.0, 6.0]).unwrap();
        let y = upsample(&x, 2, UpsampleMode::Nearest).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0, 6.0, 6.0, 5.0, 5.0, 6.0, 6.0]);
    }
}
