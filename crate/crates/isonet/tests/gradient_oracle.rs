//! Central-difference oracle for every operator backward.
//!
//! The oracle runs at f64 with h = 1e-3 and stays independent of the reverse
//! path it checks: it only ever calls the forward functions. Loss is a fixed
//! random weighting of the output so every output element influences the
//! scalar being differentiated.

use isonet::ops::*;
use isonet::tensor::{Rng, Shape4, TensorF};

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
    Shape4::new(n, c, h, w).unwrap()
}

fn randn(s: Shape4, rng: &mut Rng, sd: f64) -> TensorF<f64> {
    TensorF::rand_normal(s, rng, sd)
}

/// Central differences of `f` with respect to every element of `x`.
fn fd_grad(f: &mut dyn FnMut(&TensorF<f64>) -> f64, x: &TensorF<f64>) -> TensorF<f64> {
    let mut grad = TensorF::zeros(x.shape());
    for i in 0..x.data().len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += H;
        let mut minus = x.clone();
        minus.data_mut()[i] -= H;
        grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * H);
    }
    grad
}

fn max_rel_err(analytic: &TensorF<f64>, numeric: &TensorF<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// loss = sum(weights * y), so dloss/dy = weights.
fn weighted_loss(y: &TensorF<f64>, weights: &TensorF<f64>) -> f64 {
    y.data()
        .iter()
        .zip(weights.data())
        .map(|(&a, &b)| a * b)
        .sum()
}

fn check_conv_case(label: &str, p: ConvParams, in_shape: Shape4, with_bias: bool) {
    let mut rng = Rng::new(0xC0);
    let x = randn(in_shape, &mut rng, 1.0);
    let w = randn(p.weight_shape().unwrap(), &mut rng, 0.5);
    let b = with_bias.then(|| randn(shape(1, p.out_ch, 1, 1), &mut rng, 0.5));
    let y = conv2d(&x, &w, b.as_ref(), &p).unwrap();
    let r = randn(y.shape(), &mut rng, 1.0);

    let grads = conv2d_backward(&x, &w, &p, &r, with_bias).unwrap();

    let fd_x = fd_grad(
        &mut |xp| weighted_loss(&conv2d(xp, &w, b.as_ref(), &p).unwrap(), &r),
        &x,
    );
    let err = max_rel_err(&grads.input, &fd_x);
    assert!(err < TOL, "{label}: input grad err {err}");

    let fd_w = fd_grad(
        &mut |wp| weighted_loss(&conv2d(&x, wp, b.as_ref(), &p).unwrap(), &r),
        &w,
    );
    let err = max_rel_err(&grads.weights, &fd_w);
    assert!(err < TOL, "{label}: weight grad err {err}");

    if let Some(b) = &b {
        let fd_b = fd_grad(
            &mut |bp| weighted_loss(&conv2d(&x, &w, Some(bp), &p).unwrap(), &r),
            b,
        );
        let err = max_rel_err(grads.bias.as_ref().unwrap(), &fd_b);
        assert!(err < TOL, "{label}: bias grad err {err}");
    }
}

#[test]
fn conv_dense_3x3_stride1_same() {
    check_conv_case(
        "dense 3x3 s1",
        ConvParams::dense(3, 4, 3, 1),
        shape(2, 3, 6, 6),
        true,
    );
}

#[test]
fn conv_dense_3x3_stride2_same() {
    check_conv_case(
        "dense 3x3 s2",
        ConvParams::dense(4, 6, 3, 2),
        shape(2, 4, 7, 5),
        false,
    );
}

#[test]
fn conv_dense_2x2_valid() {
    let p = ConvParams {
        padding: Padding::Valid,
        ..ConvParams::dense(3, 2, 2, 1)
    };
    check_conv_case("dense 2x2 valid", p, shape(1, 3, 5, 5), true);
}

#[test]
fn conv_depthwise_dilated() {
    check_conv_case(
        "depthwise 3x3 d2",
        ConvParams::depthwise(6, 3, 1, 2),
        shape(2, 6, 8, 8),
        false,
    );
}

#[test]
fn conv_grouped_strided() {
    let p = ConvParams {
        in_ch: 6,
        out_ch: 4,
        kernel: 3,
        stride: 2,
        dilation: 1,
        groups: 2,
        padding: Padding::SameZero,
    };
    check_conv_case("grouped 3x3 s2", p, shape(2, 6, 6, 6), true);
}

#[test]
fn conv_wide_stride_kernel_equals_stride() {
    // The space-to-depth-equivalent configuration: kernel == stride.
    check_conv_case(
        "dense 4x4 s4",
        ConvParams::dense(2, 5, 4, 4),
        shape(1, 2, 8, 8),
        false,
    );
}

#[test]
fn fully_connected_grads() {
    let mut rng = Rng::new(0xFC);
    let x = randn(shape(3, 6, 1, 1), &mut rng, 1.0);
    let w = randn(shape(4, 6, 1, 1), &mut rng, 0.5);
    let b = randn(shape(1, 4, 1, 1), &mut rng, 0.5);
    let y = fully_connected(&x, &w, &b).unwrap();
    let r = randn(y.shape(), &mut rng, 1.0);
    let grads = fully_connected_backward(&x, &w, &r).unwrap();

    let fd_x = fd_grad(
        &mut |xp| weighted_loss(&fully_connected(xp, &w, &b).unwrap(), &r),
        &x,
    );
    assert!(max_rel_err(&grads.input, &fd_x) < TOL);
    let fd_w = fd_grad(
        &mut |wp| weighted_loss(&fully_connected(&x, wp, &b).unwrap(), &r),
        &w,
    );
    assert!(max_rel_err(&grads.weights, &fd_w) < TOL);
    let fd_b = fd_grad(
        &mut |bp| weighted_loss(&fully_connected(&x, &w, bp).unwrap(), &r),
        &b,
    );
    assert!(max_rel_err(&grads.bias, &fd_b) < TOL);
}

#[test]
fn global_avg_pool_grad() {
    let mut rng = Rng::new(0xA0);
    let x = randn(shape(2, 3, 5, 5), &mut rng, 1.0);
    let r = randn(shape(2, 3, 1, 1), &mut rng, 1.0);
    let gx = global_avg_pool_backward(x.shape(), &r);
    let fd = fd_grad(&mut |xp| weighted_loss(&global_avg_pool(xp), &r), &x);
    assert!(max_rel_err(&gx, &fd) < TOL);
}

#[test]
fn activation_grads_off_breakpoints() {
    let mut rng = Rng::new(0xAC);
    // Keep inputs away from 0 and +-3 by more than the step size.
    let mut x = randn(shape(2, 4, 6, 6), &mut rng, 1.5);
    for v in x.data_mut() {
        for brk in [-3.0, 0.0, 3.0] {
            if (*v - brk).abs() < 10.0 * H {
                *v += 20.0 * H;
            }
        }
    }
    let r = randn(x.shape(), &mut rng, 1.0);

    let g = relu_backward(&x, &r);
    let fd = fd_grad(&mut |xp| weighted_loss(&relu(xp), &r), &x);
    assert!(max_rel_err(&g, &fd) < TOL, "relu");

    let g = hard_swish_backward(&x, &r);
    let fd = fd_grad(&mut |xp| weighted_loss(&hard_swish(xp), &r), &x);
    assert!(max_rel_err(&g, &fd) < TOL, "hard_swish");
}

#[test]
fn batch_norm_grads_train_and_eval() {
    let mut rng = Rng::new(0xB0);
    let x = randn(shape(2, 3, 4, 4), &mut rng, 1.0);
    let gamma = randn(shape(1, 3, 1, 1), &mut rng, 0.5);
    let beta = randn(shape(1, 3, 1, 1), &mut rng, 0.5);
    let base_stats = BnStats {
        mean: randn(shape(1, 3, 1, 1), &mut rng, 0.3),
        var: TensorF::full(shape(1, 3, 1, 1), 1.7),
    };
    for mode in [BnMode::Train, BnMode::Eval] {
        let run = |xp: &TensorF<f64>, gp: &TensorF<f64>, bp: &TensorF<f64>| {
            let mut stats = base_stats.clone();
            batch_norm(xp, gp, bp, &mut stats, mode).unwrap().0
        };
        let y = run(&x, &gamma, &beta);
        let r = randn(y.shape(), &mut rng, 1.0);
        let mut stats = base_stats.clone();
        let (_, saved) = batch_norm(&x, &gamma, &beta, &mut stats, mode).unwrap();
        let grads = batch_norm_backward(&x, &gamma, &saved, &r).unwrap();

        let fd_x = fd_grad(&mut |xp| weighted_loss(&run(xp, &gamma, &beta), &r), &x);
        assert!(
            max_rel_err(&grads.input, &fd_x) < TOL,
            "bn {mode:?} input grad"
        );
        let fd_g = fd_grad(&mut |gp| weighted_loss(&run(&x, gp, &beta), &r), &gamma);
        assert!(
            max_rel_err(&grads.gamma, &fd_g) < TOL,
            "bn {mode:?} gamma grad"
        );
        let fd_b = fd_grad(&mut |bp| weighted_loss(&run(&x, &gamma, bp), &r), &beta);
        assert!(
            max_rel_err(&grads.beta, &fd_b) < TOL,
            "bn {mode:?} beta grad"
        );
    }
}

#[test]
fn squeeze_excite_grads() {
    let p = SqueezeExciteParams {
        channels: 6,
        reduction: 3,
    };
    let hid = p.hidden();
    let mut rng = Rng::new(0x5E);
    let x = randn(shape(2, 6, 4, 4), &mut rng, 1.0);
    let w1 = randn(shape(hid, 6, 1, 1), &mut rng, 0.4);
    let b1 = randn(shape(1, hid, 1, 1), &mut rng, 0.2);
    let w2 = randn(shape(6, hid, 1, 1), &mut rng, 0.4);
    let b2 = randn(shape(1, 6, 1, 1), &mut rng, 0.2);
    let (y, saved) = squeeze_excite(&x, &w1, &b1, &w2, &b2, &p).unwrap();
    let r = randn(y.shape(), &mut rng, 1.0);
    let grads = squeeze_excite_backward(&x, &w1, &w2, &p, &saved, &r).unwrap();

    let run = |x: &TensorF<f64>, w1: &TensorF<f64>, b1: &TensorF<f64>, w2: &TensorF<f64>, b2: &TensorF<f64>| {
        squeeze_excite(x, w1, b1, w2, b2, &p).unwrap().0
    };
    let fd = fd_grad(&mut |t| weighted_loss(&run(t, &w1, &b1, &w2, &b2), &r), &x);
    assert!(max_rel_err(&grads.input, &fd) < TOL, "se input");
    let fd = fd_grad(&mut |t| weighted_loss(&run(&x, t, &b1, &w2, &b2), &r), &w1);
    assert!(max_rel_err(&grads.w1, &fd) < TOL, "se w1");
    let fd = fd_grad(&mut |t| weighted_loss(&run(&x, &w1, t, &w2, &b2), &r), &b1);
    assert!(max_rel_err(&grads.b1, &fd) < TOL, "se b1");
    let fd = fd_grad(&mut |t| weighted_loss(&run(&x, &w1, &b1, t, &b2), &r), &w2);
    assert!(max_rel_err(&grads.w2, &fd) < TOL, "se w2");
    let fd = fd_grad(&mut |t| weighted_loss(&run(&x, &w1, &b1, &w2, t), &r), &b2);
    assert!(max_rel_err(&grads.b2, &fd) < TOL, "se b2");
}

#[test]
fn upsample_grads_all_modes() {
    let mut rng = Rng::new(0x15);
    let x = randn(shape(2, 2, 4, 4), &mut rng, 1.0);
    for mode in [
        UpsampleMode::Nearest,
        UpsampleMode::ZeroFill,
        UpsampleMode::Bilinear,
    ] {
        let y = upsample(&x, 2, mode).unwrap();
        let r = randn(y.shape(), &mut rng, 1.0);
        let gx = upsample_backward(x.shape(), 2, mode, &r).unwrap();
        let fd = fd_grad(&mut |xp| weighted_loss(&upsample(xp, 2, mode).unwrap(), &r), &x);
        assert!(max_rel_err(&gx, &fd) < TOL, "upsample {mode:?}");
    }
}

#[test]
fn rearrangement_adjoints_are_inverse_maps() {
    // Permutation adjoint: backward of s2d is d2s of the gradient, bit-exact.
    let mut rng = Rng::new(0x2D);
    let x = randn(shape(2, 3, 6, 6), &mut rng, 1.0);
    let y = space_to_depth(&x, 2).unwrap();
    let r = randn(y.shape(), &mut rng, 1.0);
    let gx = depth_to_space(&r, 2).unwrap();
    let fd = fd_grad(&mut |xp| weighted_loss(&space_to_depth(xp, 2).unwrap(), &r), &x);
    assert!(max_rel_err(&gx, &fd) < TOL);

    let y = space_to_batch(&x, 3).unwrap();
    let r = randn(y.shape(), &mut rng, 1.0);
    let gx = batch_to_space(&r, 3).unwrap();
    let fd = fd_grad(&mut |xp| weighted_loss(&space_to_batch(xp, 3).unwrap(), &r), &x);
    assert!(max_rel_err(&gx, &fd) < TOL);
}

#[test]
fn softmax_cross_entropy_grad() {
    let mut rng = Rng::new(0xCE);
    let logits = randn(shape(3, 5, 1, 1), &mut rng, 2.0);
    let labels = [2usize, 0, 4];
    for smoothing in [0.0, 0.1] {
        let (_, saved) = softmax_cross_entropy(&logits, &labels, smoothing).unwrap();
        let g = softmax_cross_entropy_backward(&saved, &labels, smoothing);
        let fd = fd_grad(
            &mut |lp| softmax_cross_entropy(lp, &labels, smoothing).unwrap().0,
            &logits,
        );
        assert!(max_rel_err(&g, &fd) < TOL, "smoothing {smoothing}");
    }
}
