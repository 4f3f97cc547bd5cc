//! Constructive checkers for the two exact operator-level identities:
//! folding a space-to-depth plus 1x1 convolution into a single strided
//! convolution, and the equivalence between dilated depthwise convolutions
//! and a space-to-batch replica ensemble on stride-free trunks.

use crate::arch::{ArchSpec, LayerKind};
use crate::error::{Error, Result};
use crate::net::{ForwardOptions, Network};
use crate::ops::{conv2d, space_to_batch, space_to_depth, BnMode, ConvParams, Padding};
use crate::tensor::{Rng, Scalar, Shape4, Tensor, TensorF};

pub const S2D_FOLD_TOLERANCE: f64 = 1e-5;
pub const DILATION_BATCH_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct EquivReport {
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
    pub shapes_checked: Vec<Shape4>,
    pub tolerance: f64,
    pub passed: bool,
    /// Flattened per-element absolute differences, for CSV export.
    pub diffs: Vec<f64>,
}

impl EquivReport {
    fn from_pair<F: Scalar>(a: &TensorF<F>, b: &TensorF<F>, tolerance: f64) -> Result<Self> {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "equivalence paths disagree on shape: {} vs {}",
                a.shape(),
                b.shape()
            )));
        }
        let diffs: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
            .collect();
        let max = diffs.iter().copied().fold(0.0, f64::max);
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        Ok(EquivReport {
            max_abs_diff: max,
            mean_abs_diff: mean,
            shapes_checked: vec![a.shape()],
            tolerance,
            passed: max <= tolerance,
            diffs,
        })
    }

    pub fn summary(&self) -> String {
        format!(
            "{} max_abs_diff={:.3e} mean_abs_diff={:.3e} tol={:.0e} shapes={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_abs_diff,
            self.mean_abs_diff,
            self.tolerance,
            self.shapes_checked
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        )
    }
}

/// Rearranges 1x1 weights over space-to-depth channels into an equivalent
/// k x k stride-k kernel: W'[o, ci, cy, cx] = W[o, (cy*k + cx)*c_in + ci].
pub fn fold_s2d_conv<F: Scalar>(k: usize, weights_1x1: &TensorF<F>) -> Result<TensorF<F>> {
    let s = weights_1x1.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::shape(format!(
            "fold expects 1x1 weights (out, c_in*k^2, 1, 1), got {s}"
        )));
    }
    if s.c % (k * k) != 0 {
        return Err(Error::Divisibility(format!(
            "1x1 weight input channels {} not divisible by k^2 = {}",
            s.c,
            k * k
        )));
    }
    let c_in = s.c / (k * k);
    let mut out = TensorF::zeros(Shape4::new(s.n, c_in, k, k)?);
    for o in 0..s.n {
        for cy in 0..k {
            for cx in 0..k {
                for ci in 0..c_in {
                    let v = weights_1x1.at(o, (cy * k + cx) * c_in + ci, 0, 0);
                    out.set(o, ci, cy, cx, v);
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of `fold_s2d_conv`.
pub fn unfold_s2d_conv<F: Scalar>(folded: &TensorF<F>) -> Result<TensorF<F>> {
    let s = folded.shape();
    let k = s.h;
    if s.h != s.w {
        return Err(Error::shape("folded kernel must be square".to_string()));
    }
    let mut out = TensorF::zeros(Shape4::new(s.n, s.c * k * k, 1, 1)?);
    for o in 0..s.n {
        for cy in 0..k {
            for cx in 0..k {
                for ci in 0..s.c {
                    let v = folded.at(o, ci, cy, cx);
                    out.set(o, (cy * k + cx) * s.c + ci, 0, 0, v);
                }
            }
        }
    }
    Ok(out)
}

/// Runs both routes on random data: conv1x1(space_to_depth(x, k)) against
/// conv(x, folded weights, stride = k).
pub fn check_s2d_fold(
    input: Shape4,
    out_ch: usize,
    k: usize,
    seed: u64,
) -> Result<EquivReport> {
    let mut rng = Rng::new(seed).split(1);
    let x = Tensor::rand_normal(input, &mut rng, 1.0);
    let w1x1 = Tensor::rand_normal(Shape4::new(out_ch, input.c * k * k, 1, 1)?, &mut rng, 0.5);

    let rearranged = space_to_depth(&x, k)?;
    let p1 = ConvParams::dense(input.c * k * k, out_ch, 1, 1);
    let path_a = conv2d(&rearranged, &w1x1, None, &p1)?;

    let folded = fold_s2d_conv(k, &w1x1)?;
    let p2 = ConvParams {
        padding: Padding::Valid,
        ..ConvParams::dense(input.c, out_ch, k, k)
    };
    let mut p2 = p2;
    p2.stride = k;
    let path_b = conv2d(&x, &folded, None, &p2)?;

    let mut report = EquivReport::from_pair(&path_a, &path_b, S2D_FOLD_TOLERANCE)?;
    report.shapes_checked = vec![input, path_a.shape()];
    Ok(report)
}

/// Dilated trunk on the full input against the undilated trunk on the rate^2
/// polyphase replicas with averaged logits. Exact only for stride-free,
/// SE-free, adapter-free trunks in BN inference mode: squeeze-excite pools
/// globally (per-replica means differ from the full-image mean) and input
/// adapters re-mix the polyphase components, so both are refused.
pub fn check_dilation_batch_equiv(
    arch: &ArchSpec,
    seed: u64,
    rate: usize,
    x: &Tensor,
) -> Result<EquivReport> {
    if rate == 0 {
        return Err(Error::Config("dilation rate must be >= 1".to_string()));
    }
    for layer in &arch.layers {
        match &layer.kind {
            LayerKind::Mv3SeBlock {
                stride, se_enabled, ..
            } => {
                if *stride != 1 {
                    return Err(Error::Config(format!(
                        "layer {}: dilation/batch equivalence requires a stride-free trunk",
                        layer.id
                    )));
                }
                if *se_enabled {
                    return Err(Error::Config(format!(
                        "layer {}: squeeze-excite pools over the whole image, so per-replica \
                         gates differ from the full-resolution gate; disable SE for this check",
                        layer.id
                    )));
                }
            }
            LayerKind::S2d { .. } | LayerKind::UpsampleInput { .. } => {
                return Err(Error::Config(format!(
                    "layer {}: input adapters re-mix polyphase components; feed the trunk natively",
                    layer.id
                )));
            }
            _ => {}
        }
    }
    let s = x.shape();
    if s.h % rate != 0 || s.w % rate != 0 {
        return Err(Error::Divisibility(format!(
            "input {}x{} not divisible by rate {rate}",
            s.h, s.w
        )));
    }

    let mut net: Network<f32> = Network::init(arch, seed)?;
    perturb_bn_state(&mut net, seed);

    let opts_a = ForwardOptions {
        mode: BnMode::Eval,
        dilation_override: Some(rate),
        ..Default::default()
    };
    let logits_full = net.forward(x, &opts_a)?.output;

    let replicas = space_to_batch(x, rate)?;
    let logits_replicas = net.forward_logits(&replicas, BnMode::Eval)?;
    let logits_avg = Network::average_replica_logits(&logits_replicas, rate * rate)?;

    let mut report = EquivReport::from_pair(&logits_full, &logits_avg, DILATION_BATCH_TOLERANCE)?;
    report.shapes_checked = vec![s, logits_full.shape()];
    Ok(report)
}

/// Running statistics start at (0, 1) after init; nudge them (and the BN
/// affine) so inference-mode normalization is not a near-identity when the
/// equivalence runs.
fn perturb_bn_state(net: &mut Network<f32>, seed: u64) {
    let mut rng = Rng::new(seed).split(0x5747);
    for entry in net.params.iter_mut() {
        let name = entry.name.as_str();
        if name.ends_with(".running_mean") {
            for v in entry.tensor.data_mut() {
                *v = (rng.next_normal() * 0.05) as f32;
            }
        } else if name.ends_with(".running_var") {
            for v in entry.tensor.data_mut() {
                *v = (1.0 + rng.next_normal().abs() * 0.2) as f32;
            }
        } else if name.ends_with(".bn.gamma") {
            for v in entry.tensor.data_mut() {
                *v = (1.0 + rng.next_normal() * 0.1) as f32;
            }
        } else if name.ends_with(".bn.beta") {
            for v in entry.tensor.data_mut() {
                *v = (rng.next_normal() * 0.1) as f32;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parallel input pipelines
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineOrder {
    /// Contiguous-tile replicas: the image splits into r x r patches, each
    /// then space-to-depth packed.
    S2bThenS2d,
    /// Shifted-grid replicas: space-to-depth first, then the polyphase
    /// split, so each replica samples a shifted grid of k x k blocks.
    S2dThenS2b,
}

/// Input adapter producing r^2 trunk-ready replicas of shape
/// (n*r^2, c*k^2, H/(r*k), W/(r*k)).
#[derive(Debug, Clone, Copy)]
pub struct ParallelPipeline {
    pub order: PipelineOrder,
    pub replicas_per_side: usize,
    pub s2d_block: usize,
}

pub fn build_parallel_pipeline(
    order: PipelineOrder,
    replicas_per_side: usize,
    s2d_block: usize,
) -> Result<ParallelPipeline> {
    if replicas_per_side == 0 || s2d_block == 0 {
        return Err(Error::Config(
            "replica count and block size must be >= 1".to_string(),
        ));
    }
    Ok(ParallelPipeline {
        order,
        replicas_per_side,
        s2d_block,
    })
}

impl ParallelPipeline {
    pub fn replica_count(&self) -> usize {
        self.replicas_per_side * self.replicas_per_side
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let step = self.replicas_per_side * self.s2d_block;
        if s.h % step != 0 || s.w % step != 0 {
            return Err(Error::Divisibility(format!(
                "input {}x{} not divisible by r*k = {}",
                s.h, s.w, step
            )));
        }
        match self.order {
            PipelineOrder::S2dThenS2b => {
                let packed = space_to_depth(x, self.s2d_block)?;
                space_to_batch(&packed, self.replicas_per_side)
            }
            PipelineOrder::S2bThenS2d => {
                let tiles = tiles_to_batch(x, self.replicas_per_side)?;
                space_to_depth(&tiles, self.s2d_block)
            }
        }
    }

    /// Runs the adapter plus a shared-weight trunk and averages the replica
    /// logits in fixed replica order.
    pub fn run(&self, net: &mut Network<f32>, x: &Tensor) -> Result<Tensor> {
        let replicas = self.apply(x)?;
        let logits = net.forward_logits(&replicas, BnMode::Eval)?;
        Network::average_replica_logits(&logits, self.replica_count())
    }
}

/// (n, c, H, W) -> (n*r^2, c, H/r, W/r): replica ty*r + tx is the contiguous
/// tile with its top-left corner at (ty*H/r, tx*W/r).
pub fn tiles_to_batch<F: Scalar>(x: &TensorF<F>, r: usize) -> Result<TensorF<F>> {
    if r == 1 {
        return Ok(x.clone());
    }
    let s = x.shape();
    if s.h % r != 0 || s.w % r != 0 {
        return Err(Error::Divisibility(format!(
            "tiles_to_batch: {}x{} not divisible by {r}",
            s.h, s.w
        )));
    }
    let (th, tw) = (s.h / r, s.w / r);
    let mut out = TensorF::zeros(Shape4::new(s.n * r * r, s.c, th, tw)?);
    for n in 0..s.n {
        for ty in 0..r {
            for tx in 0..r {
                let ob = n * r * r + ty * r + tx;
                for c in 0..s.c {
                    for y in 0..th {
                        for x_ in 0..tw {
                            let v = x.at(n, c, ty * th + y, tx * tw + x_);
                            out.set(ob, c, y, x_, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Brute-force disjoint-cover check: every input pixel must appear in
/// exactly one replica at exactly one position.
pub fn pipeline_covers_pixels(pipeline: &ParallelPipeline, h: usize, w: usize) -> Result<bool> {
    let shape = Shape4::new(1, 1, h, w)?;
    let data: Vec<f32> = (0..h * w).map(|i| i as f32).collect();
    let x = Tensor::from_vec(shape, data)?;
    let y = pipeline.apply(&x)?;
    let mut seen = vec![0usize; h * w];
    for &v in y.data() {
        let id = v as usize;
        if (v - id as f32) != 0.0 || id >= h * w {
            return Ok(false);
        }
        seen[id] += 1;
    }
    Ok(seen.iter().all(|&count| count == 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::build_isometric;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, c, h, w).unwrap()
    }

    /// SE-free, adapter-free isometric trunk at native resolution.
    fn toy_trunk(res: usize, depth: usize, classes: usize) -> ArchSpec {
        let mut arch = build_isometric(res, res, 0.25, depth, classes).unwrap();
        for layer in &mut arch.layers {
            if let LayerKind::Mv3SeBlock { se_enabled, .. } = &mut layer.kind {
                *se_enabled = false;
            }
        }
        arch
    }

    #[test]
    fn fold_k1_is_identity() {
        let mut rng = Rng::new(1);
        let w = Tensor::rand_normal(shape(5, 3, 1, 1), &mut rng, 1.0);
        let folded = fold_s2d_conv(1, &w).unwrap();
        assert_eq!(folded.data(), w.data());
    }

    #[test]
    fn fold_roundtrip_bit_exact() {
        let mut rng = Rng::new(2);
        for k in [2usize, 3, 4] {
            let w = Tensor::rand_normal(shape(8, 3 * k * k, 1, 1), &mut rng, 1.0);
            let back = unfold_s2d_conv(&fold_s2d_conv(k, &w).unwrap()).unwrap();
            assert_eq!(back.data(), w.data());
        }
    }

    #[test]
    fn s2d_fold_random_case() {
        let report = check_s2d_fold(shape(2, 3, 32, 32), 8, 4, 3).unwrap();
        assert!(report.passed, "{}", report.summary());
    }

    #[test]
    fn s2d_fold_shape_law_k32() {
        // Folding the r=224 -> d=7 adapter gives a (n, out, 7, 7) strided path.
        let report = check_s2d_fold(shape(1, 3, 224, 224), 4, 32, 5).unwrap();
        assert!(report.passed, "{}", report.summary());
        assert_eq!(report.shapes_checked[1], shape(1, 4, 7, 7));
    }

    #[test]
    fn dilation_batch_rate1_exact_zero() {
        let arch = toy_trunk(8, 2, 4);
        let mut rng = Rng::new(9);
        let x = Tensor::rand_normal(shape(2, 3, 8, 8), &mut rng, 1.0);
        let report = check_dilation_batch_equiv(&arch, 11, 1, &x).unwrap();
        assert_eq!(report.max_abs_diff, 0.0);
    }

    #[test]
    fn dilation_batch_rate2_toy_net() {
        let arch = toy_trunk(12, 4, 5);
        let mut rng = Rng::new(21);
        let x = Tensor::rand_normal(shape(2, 3, 12, 12), &mut rng, 1.0);
        let report = check_dilation_batch_equiv(&arch, 13, 2, &x).unwrap();
        assert!(report.passed, "{}", report.summary());
    }

    #[test]
    fn dilation_batch_refuses_se() {
        let arch = build_isometric(8, 8, 0.25, 2, 4).unwrap();
        let mut rng = Rng::new(9);
        let x = Tensor::rand_normal(shape(1, 3, 8, 8), &mut rng, 1.0);
        let err = check_dilation_batch_equiv(&arch, 1, 2, &x).unwrap_err();
        assert!(err.to_string().contains("squeeze-excite"));
    }

    #[test]
    fn pipelines_cover_pixels_exactly_once() {
        for order in [PipelineOrder::S2bThenS2d, PipelineOrder::S2dThenS2b] {
            let p = build_parallel_pipeline(order, 4, 2).unwrap();
            assert!(pipeline_covers_pixels(&p, 16, 16).unwrap());
            assert!(pipeline_covers_pixels(&p, 24, 16).unwrap());
        }
    }

    #[test]
    fn pipeline_shapes_and_replica_counts() {
        let p = build_parallel_pipeline(PipelineOrder::S2dThenS2b, 4, 4).unwrap();
        let x = Tensor::zeros(shape(1, 3, 224, 224));
        let y = p.apply(&x).unwrap();
        assert_eq!(y.shape(), shape(16, 48, 14, 14));
        assert_eq!(p.replica_count(), 16);
    }

    #[test]
    fn pipeline_r1_is_plain() {
        let p = build_parallel_pipeline(PipelineOrder::S2bThenS2d, 1, 2).unwrap();
        let mut rng = Rng::new(4);
        let x = Tensor::rand_normal(shape(1, 3, 8, 8), &mut rng, 1.0);
        let y = p.apply(&x).unwrap();
        assert_eq!(y.data(), space_to_depth(&x, 2).unwrap().data());
    }

    #[test]
    fn pipeline_orders_differ() {
        let mut rng = Rng::new(7);
        let x = Tensor::rand_normal(shape(1, 1, 8, 8), &mut rng, 1.0);
        let a = build_parallel_pipeline(PipelineOrder::S2bThenS2d, 2, 2)
            .unwrap()
            .apply(&x)
            .unwrap();
        let b = build_parallel_pipeline(PipelineOrder::S2dThenS2b, 2, 2)
            .unwrap()
            .apply(&x)
            .unwrap();
        assert_eq!(a.shape(), b.shape());
        assert_ne!(a.data(), b.data());
    }
}
