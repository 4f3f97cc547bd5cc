//! Static per-layer accounting: shapes, parameters, MAdds, activation
//! footprint, and receptive fields, plus the impulse-response oracle that
//! cross-checks the analytic receptive-field recurrence on a live network.
//!
//! Conventions: MAdds count only the multiplications in matrix products
//! (dense conv h*w*out*k^2*in/groups, depthwise h*w*c*k^2, FC in*out, SE as
//! two FCs plus the per-element gate); BN, activations, pooling, elementwise
//! adds and rearrangements cost zero. Parameters include conv weights,
//! biases, SE, FC, and four BN values per channel (gamma, beta, and the two
//! running statistics). The activation footprint of a layer is its input
//! plus output element count at batch 1; residual skips alias the block
//! input and are not double counted.

use crate::arch::{validate, ArchSpec, LayerKind, MultiplierTransform};
use crate::error::{Error, Result};
use crate::net::{ForwardOptions, Network};
use crate::tensor::{Shape4, Tensor};

#[derive(Debug, Clone)]
pub struct LayerReport {
    pub id: String,
    pub in_shape: Shape4,
    pub out_shape: Shape4,
    pub params: u64,
    pub madds: u64,
    pub activation_elems: u64,
    /// Receptive-field extent in input pixels (fractional after upsampling).
    pub rf_size: f64,
    /// Input-pixel spacing between adjacent output units.
    pub rf_jump: f64,
}

#[derive(Debug, Clone)]
pub struct ArchReport {
    pub layers: Vec<LayerReport>,
    pub total_params: u64,
    pub total_madds: u64,
    pub peak_activation_elems: u64,
    pub peak_activation_bytes: u64,
}

/// Full static analysis; requires a structurally valid architecture.
pub fn analyze(arch: &ArchSpec) -> Result<ArchReport> {
    let violations = validate(arch);
    if !violations.is_empty() {
        return Err(Error::arch(format!(
            "cannot analyze invalid arch: {}",
            violations[0]
        )));
    }
    let shapes = arch.infer_shapes()?;
    let rf = receptive_fields(arch)?;
    let mut layers = Vec::with_capacity(arch.layers.len());
    for ((layer, shape), rf) in arch.layers.iter().zip(&shapes).zip(&rf) {
        let (params, madds) = layer_cost(&layer.kind, shape.in_ch, shape.in_res, shape.out_res);
        let in_shape = Shape4::new(1, shape.in_ch, shape.in_res, shape.in_res)?;
        let out_shape = Shape4::new(1, shape.out_ch, shape.out_res, shape.out_res)?;
        layers.push(LayerReport {
            id: layer.id.clone(),
            in_shape,
            out_shape,
            params,
            madds,
            activation_elems: (in_shape.elems() + out_shape.elems()) as u64,
            rf_size: rf.0,
            rf_jump: rf.1,
        });
    }
    let total_params = layers.iter().map(|l| l.params).sum();
    let total_madds = layers.iter().map(|l| l.madds).sum();
    let peak_activation_elems = layers
        .iter()
        .map(|l| l.activation_elems)
        .max()
        .unwrap_or(0);
    Ok(ArchReport {
        layers,
        total_params,
        total_madds,
        peak_activation_elems,
        peak_activation_bytes: peak_activation_elems * 4,
    })
}

fn layer_cost(kind: &LayerKind, in_ch: usize, in_res: usize, out_res: usize) -> (u64, u64) {
    let (in_ch, in_res, out_res) = (in_ch as u64, in_res as u64, out_res as u64);
    match kind {
        LayerKind::S2d { .. } | LayerKind::UpsampleInput { .. } | LayerKind::AvgPool => (0, 0),
        LayerKind::Conv1x1 {
            out_ch,
            bias,
            norm_act,
        } => {
            let out_ch = *out_ch as u64;
            let mut params = in_ch * out_ch;
            if *bias {
                params += out_ch;
            }
            if *norm_act {
                params += 4 * out_ch;
            }
            (params, out_res * out_res * out_ch * in_ch)
        }
        LayerKind::Mv3SeBlock {
            bottleneck,
            expansion,
            se_reduction,
            kernel,
            se_enabled,
            ..
        } => {
            let (bott, exp, k) = (*bottleneck as u64, *expansion as u64, *kernel as u64);
            let mut params = in_ch * exp + 4 * exp; // expand + bn
            params += exp * k * k + 4 * exp; // depthwise + bn
            if *se_enabled {
                let hid = exp / *se_reduction as u64;
                params += exp * hid + hid + hid * exp + exp;
            }
            params += exp * bott + 4 * bott; // project + bn

            let mut madds = in_res * in_res * exp * in_ch; // expand at input res
            madds += out_res * out_res * exp * k * k; // depthwise
            if *se_enabled {
                let hid = exp / *se_reduction as u64;
                madds += exp * hid + hid * exp + out_res * out_res * exp;
            }
            madds += out_res * out_res * bott * exp; // project
            (params, madds)
        }
        LayerKind::Fc { out } => {
            let out = *out as u64;
            (in_ch * out + out, in_ch * out)
        }
    }
}

/// Receptive-field recurrence along the layer sequence, starting from
/// (rf, jump) = (1, 1): a conv with kernel k, stride s, dilation d makes
/// rf += (k-1)*d*jump then jump *= s; space-to-depth acts as a k x k
/// stride-k kernel; upsampling divides the jump; global pooling covers its
/// whole input.
pub fn receptive_fields(arch: &ArchSpec) -> Result<Vec<(f64, f64)>> {
    let shapes = arch.infer_shapes()?;
    let mut rf = 1.0f64;
    let mut jump = 1.0f64;
    let mut out = Vec::with_capacity(arch.layers.len());
    for (layer, shape) in arch.layers.iter().zip(&shapes) {
        match &layer.kind {
            LayerKind::S2d { block } => {
                let k = *block as f64;
                rf += (k - 1.0) * jump;
                jump *= k;
            }
            LayerKind::UpsampleInput { factor, .. } => {
                jump /= *factor as f64;
            }
            LayerKind::Conv1x1 { .. } | LayerKind::Fc { .. } => {}
            LayerKind::Mv3SeBlock {
                kernel,
                stride,
                dilation,
                ..
            } => {
                rf += (*kernel as f64 - 1.0) * *dilation as f64 * jump;
                jump *= *stride as f64;
            }
            LayerKind::AvgPool => {
                let k = shape.in_res as f64;
                rf += (k - 1.0) * jump;
                jump *= k;
            }
        }
        out.push((rf, jump));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingRatios {
    pub activation: f64,
    pub params: f64,
    pub madds: f64,
}

/// Measured ratios analyze(transformed) / analyze(base) for peak activation,
/// parameter count, and MAdds.
pub fn scaling_check(arch: &ArchSpec, transform: MultiplierTransform) -> Result<ScalingRatios> {
    let base = analyze(arch)?;
    let scaled_arch = crate::arch::apply_multiplier(arch, transform)?;
    let scaled = analyze(&scaled_arch)?;
    Ok(ScalingRatios {
        activation: scaled.peak_activation_elems as f64 / base.peak_activation_elems as f64,
        params: scaled.total_params as f64 / base.total_params as f64,
        madds: scaled.total_madds as f64 / base.total_madds as f64,
    })
}

// ---------------------------------------------------------------------------
// Receptive-field boxes: analytic interval composition and the impulse oracle
// ---------------------------------------------------------------------------

/// Inclusive 1-D index interval; spatial boxes are this interval applied to
/// both axes (architectures are square).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfInterval {
    pub lo: i64,
    pub hi: i64,
}

impl RfInterval {
    pub fn len(&self) -> i64 {
        self.hi - self.lo + 1
    }

    fn clip(self, in_len: i64) -> Option<RfInterval> {
        let lo = self.lo.max(0);
        let hi = self.hi.min(in_len - 1);
        (lo <= hi).then_some(RfInterval { lo, hi })
    }
}

fn same_pad(in_len: usize, kernel: usize, stride: usize, dilation: usize) -> usize {
    let eff = (kernel - 1) * dilation + 1;
    let out = in_len.div_ceil(stride);
    (((out - 1) * stride + eff).saturating_sub(in_len)) / 2
}

/// The output unit probed on every layer: the centre of its spatial plane.
pub fn probe_unit(out_res: usize) -> usize {
    out_res / 2
}

/// Analytic receptive-field interval of the probe unit of `layer_index`,
/// clipped to the image at every stage (zero padding carries no influence).
/// Also returns the unclipped width, which equals the rf recurrence value
/// for integer-jump architectures.
pub fn analytic_rf_box(arch: &ArchSpec, layer_index: usize) -> Result<(Option<RfInterval>, i64)> {
    let shapes = arch.infer_shapes()?;
    if layer_index >= arch.layers.len() {
        return Err(Error::arch(format!("no layer at index {layer_index}")));
    }
    let unit = probe_unit(shapes[layer_index].out_res) as i64;
    let mut clipped = Some(RfInterval { lo: unit, hi: unit });
    let mut unclipped = RfInterval { lo: unit, hi: unit };
    for i in (0..=layer_index).rev() {
        let in_res = shapes[i].in_res;
        let map = |iv: RfInterval| -> Result<RfInterval> {
            Ok(match &arch.layers[i].kind {
                LayerKind::S2d { block } => {
                    let k = *block as i64;
                    RfInterval {
                        lo: iv.lo * k,
                        hi: iv.hi * k + k - 1,
                    }
                }
                LayerKind::UpsampleInput { factor, mode } => {
                    let f = *factor as i64;
                    match mode {
                        crate::ops::UpsampleMode::ZeroFill => RfInterval {
                            lo: iv.lo.div_euclid(f) + i64::from(iv.lo.rem_euclid(f) != 0),
                            hi: iv.hi.div_euclid(f),
                        },
                        crate::ops::UpsampleMode::Nearest => RfInterval {
                            lo: iv.lo.div_euclid(f),
                            hi: iv.hi.div_euclid(f),
                        },
                        crate::ops::UpsampleMode::Bilinear => {
                            return Err(Error::arch(
                                "analytic rf box does not model bilinear taps".to_string(),
                            ))
                        }
                    }
                }
                LayerKind::Conv1x1 { .. } | LayerKind::Fc { .. } => iv,
                LayerKind::Mv3SeBlock {
                    kernel,
                    stride,
                    dilation,
                    ..
                } => {
                    let (k, s, d) = (*kernel as i64, *stride as i64, *dilation as i64);
                    let pl = same_pad(in_res, *kernel, *stride, *dilation) as i64;
                    RfInterval {
                        lo: iv.lo * s - pl,
                        hi: iv.hi * s - pl + (k - 1) * d,
                    }
                }
                LayerKind::AvgPool => RfInterval {
                    lo: 0,
                    hi: in_res as i64 - 1,
                },
            })
        };
        unclipped = map(unclipped)?;
        clipped = match clipped {
            Some(iv) => {
                let mapped = map(iv)?;
                if mapped.lo > mapped.hi {
                    None
                } else {
                    mapped.clip(in_res as i64)
                }
            }
            None => None,
        };
    }
    Ok((clipped, unclipped.len()))
}

/// Measured receptive-field boxes: feeds a single-pixel impulse at every
/// input position through a positive-weight probe network (norms and gates
/// bypassed) and records, per layer, which input pixels influence the probe
/// unit. Returns one interval per layer (the boxes are square and symmetric
/// across axes, but both axes are measured independently and must agree).
pub fn impulse_rf_all_layers(arch: &ArchSpec) -> Result<Vec<Option<RfInterval>>> {
    let shapes = arch.infer_shapes()?;
    let mut net: Network<f32> = Network::probe(arch)?;
    let opts = ForwardOptions {
        bypass_bn: true,
        bypass_se: true,
        record_layer_outputs: true,
        ..Default::default()
    };
    let res = arch.input_res;
    let n_layers = arch.layers.len();
    let mut boxes: Vec<Option<(RfInterval, RfInterval)>> = vec![None; n_layers];
    let in_shape = Shape4::new(1, arch.input_channels, res, res)?;
    for py in 0..res {
        for px in 0..res {
            let mut x = Tensor::zeros(in_shape);
            x.set(0, 0, py, px, 1.0);
            let fwd = net.forward(&x, &opts)?;
            let outs = fwd.layer_outputs.as_ref().expect("layer outputs recorded");
            for (li, out) in outs.iter().enumerate() {
                let s = out.shape();
                let (uy, ux) = (probe_unit(s.h), probe_unit(s.w));
                let hit = (0..s.c).any(|c| out.at(0, c, uy, ux) != 0.0);
                if hit {
                    let (py, px) = (py as i64, px as i64);
                    boxes[li] = Some(match boxes[li] {
                        None => (RfInterval { lo: py, hi: py }, RfInterval { lo: px, hi: px }),
                        Some((by, bx)) => (
                            RfInterval {
                                lo: by.lo.min(py),
                                hi: by.hi.max(py),
                            },
                            RfInterval {
                                lo: bx.lo.min(px),
                                hi: bx.hi.max(px),
                            },
                        ),
                    });
                }
            }
        }
    }
    let _ = shapes;
    Ok(boxes
        .into_iter()
        .map(|b| {
            b.map(|(by, bx)| {
                assert_eq!(by, bx, "impulse box must be square");
                by
            })
        })
        .collect())
}

/// Measured box for one layer by id.
pub fn impulse_rf_oracle(arch: &ArchSpec, layer_id: &str) -> Result<Option<RfInterval>> {
    let index = arch
        .layer_index(layer_id)
        .ok_or_else(|| Error::arch(format!("no layer named {layer_id}")))?;
    Ok(impulse_rf_all_layers(arch)?.into_iter().nth(index).unwrap())
}

// ---------------------------------------------------------------------------
// Report export
// ---------------------------------------------------------------------------

fn fmt_shape(s: Shape4) -> String {
    format!("{}x{}x{}", s.h, s.w, s.c)
}

/// One row per layer, RFC-4180 quoting handled by the csv writer.
pub fn report_to_csv(report: &ArchReport) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record([
        "id",
        "in_shape",
        "out_shape",
        "params",
        "madds",
        "activation_elems",
        "rf_size",
        "rf_jump",
    ])
    .expect("csv write");
    for l in &report.layers {
        wtr.write_record([
            l.id.clone(),
            fmt_shape(l.in_shape),
            fmt_shape(l.out_shape),
            l.params.to_string(),
            l.madds.to_string(),
            l.activation_elems.to_string(),
            format_f64(l.rf_size),
            format_f64(l.rf_jump),
        ])
        .expect("csv write");
    }
    String::from_utf8(wtr.into_inner().expect("csv flush")).expect("csv utf8")
}

fn format_f64(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Aligned plain-text table with the aggregate footer.
pub fn report_to_table(report: &ArchReport) -> String {
    let mut rows: Vec<[String; 8]> = vec![[
        "layer".into(),
        "in".into(),
        "out".into(),
        "params".into(),
        "madds".into(),
        "act_elems".into(),
        "rf".into(),
        "jump".into(),
    ]];
    for l in &report.layers {
        rows.push([
            l.id.clone(),
            fmt_shape(l.in_shape),
            fmt_shape(l.out_shape),
            l.params.to_string(),
            l.madds.to_string(),
            l.activation_elems.to_string(),
            format_f64(l.rf_size),
            format_f64(l.rf_jump),
        ]);
    }
    let mut widths = [0usize; 8];
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in &rows {
        for (i, (w, cell)) in widths.iter().zip(row).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            if i == 0 {
                out.push_str(&format!("{cell:<w$}"));
            } else {
                out.push_str(&format!("{cell:>w$}"));
            }
        }
        out.push('\n');
    }
    out.push_str(&format!(
        "total params: {}  total madds: {}  peak activation: {} elems ({} bytes)\n",
        report.total_params,
        report.total_madds,
        report.peak_activation_elems,
        report.peak_activation_bytes
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_dense_stack, build_isometric, LayerSpec};

    #[test]
    fn single_conv_madds_brute_force() {
        // 1x1 conv 64 -> 384 at 14x14. Oracle: count multiplies one output
        // element at a time.
        let mut arch = build_dense_stack(64, 1, 14).unwrap();
        if let LayerKind::Conv1x1 { out_ch, .. } = &mut arch.layers[0].kind {
            *out_ch = 384;
        }
        let report = analyze(&arch).unwrap();
        let mut counted: u64 = 0;
        for _oy in 0..14 {
            for _ox in 0..14 {
                for _oc in 0..384 {
                    counted += 64; // one multiply per input channel
                }
            }
        }
        assert_eq!(counted, 4_816_896);
        assert_eq!(report.layers[0].madds, counted);
    }

    #[test]
    fn parameter_anchor_m1_l16() {
        let arch = build_isometric(224, 14, 1.0, 16, 1000).unwrap();
        let report = analyze(&arch).unwrap();
        let p = report.total_params as f64;
        assert!(
            (p - 4.4e6).abs() <= 0.02 * 4.4e6,
            "expected ~4.4M params, got {p}"
        );
    }

    #[test]
    fn parameter_anchor_m2_l32() {
        let arch = build_isometric(224, 28, 2.0, 32, 1000).unwrap();
        let report = analyze(&arch).unwrap();
        let p = report.total_params as f64;
        assert!(
            (p - 20.0e6).abs() <= 0.05 * 20.0e6,
            "expected ~20M params, got {p}"
        );
    }

    #[test]
    fn rf_recurrence_isometric() {
        // d=14 from r=224 (k=16): rf after n blocks is 16 + 32n.
        let arch = build_isometric(224, 14, 1.0, 16, 1000).unwrap();
        let rf = receptive_fields(&arch).unwrap();
        let idx = |id: &str| arch.layer_index(id).unwrap();
        assert_eq!(rf[idx("s2d")].0, 16.0);
        assert_eq!(rf[idx("block2")].0, 80.0);
        assert_eq!(rf[idx("block7")].0, 240.0);
        // rf covers the whole 224 image within the first half of the blocks.
        assert!(rf[idx("block7")].0 >= 224.0);
    }

    #[test]
    fn rf_single_3x3_conv() {
        let arch = crate::arch::build_stride_pyramid(&[1], 8, 8, 4).unwrap();
        // First block layer is the stride-2 depthwise: rf 3, jump 2.
        let rf = receptive_fields(&arch).unwrap();
        let i = arch.layer_index("b1down").unwrap();
        assert_eq!(rf[i], (3.0, 2.0));
    }

    #[test]
    fn rf_dilated_doubles_growth() {
        let base = build_isometric(32, 8, 0.25, 4, 4).unwrap();
        let dilated =
            crate::arch::apply_multiplier(&base, MultiplierTransform::Dilate(2)).unwrap();
        let rf = receptive_fields(&dilated).unwrap();
        // k = 4 adapter: rf after n blocks = k + 4k*n.
        let k = 4.0;
        for n in 1..=4 {
            let i = dilated.layer_index(&format!("block{n}")).unwrap();
            assert_eq!(rf[i].0, k + 4.0 * k * n as f64);
        }
    }

    #[test]
    fn scaling_ratios_dense_family() {
        let arch = build_dense_stack(32, 4, 16).unwrap();
        for alpha in [0.5, 2.0] {
            let r = scaling_check(&arch, MultiplierTransform::Width(alpha)).unwrap();
            assert_eq!(r.activation, alpha);
            assert_eq!(r.params, alpha * alpha);
            assert_eq!(r.madds, alpha * alpha);

            let r = scaling_check(&arch, MultiplierTransform::Resolution(alpha)).unwrap();
            assert_eq!(r.activation, alpha * alpha);
            assert_eq!(r.params, 1.0);
            assert_eq!(r.madds, alpha * alpha);

            let r = scaling_check(&arch, MultiplierTransform::Depth(alpha)).unwrap();
            assert_eq!(r.activation, 1.0);
            assert_eq!(r.params, alpha);
            assert_eq!(r.madds, alpha);
        }
    }

    #[test]
    fn peak_activation_independent_of_depth() {
        let a = analyze(&build_isometric(14, 14, 1.0, 8, 100).unwrap()).unwrap();
        let b = analyze(&build_isometric(14, 14, 1.0, 32, 100).unwrap()).unwrap();
        assert_eq!(a.peak_activation_elems, b.peak_activation_elems);
    }

    #[test]
    fn analyze_totals_are_additive() {
        // Concatenating two dense stacks equals the sum of the parts.
        let a = build_dense_stack(16, 2, 8).unwrap();
        let b = build_dense_stack(16, 3, 8).unwrap();
        let mut combined = a.clone();
        combined.layers.extend(b.layers.iter().enumerate().map(|(i, l)| {
            let mut l = l.clone();
            l.id = format!("tail{i}");
            l
        }));
        let ra = analyze(&a).unwrap();
        let rb = analyze(&b).unwrap();
        let rc = analyze(&combined).unwrap();
        assert_eq!(rc.total_params, ra.total_params + rb.total_params);
        assert_eq!(rc.total_madds, ra.total_madds + rb.total_madds);
    }

    #[test]
    fn rf_monotone_along_layers() {
        let arch = build_isometric(224, 14, 1.0, 16, 1000).unwrap();
        let rf = receptive_fields(&arch).unwrap();
        for pair in rf.windows(2) {
            assert!(pair[1].0 >= pair[0].0);
        }
    }

    #[test]
    fn impulse_matches_analytic_small_cases() {
        // 3x3 s1 conv on a 9x9 input: 3x3 box centred on the probe unit.
        let mut arch = build_dense_stack(8, 1, 9).unwrap();
        arch.layers.push(LayerSpec::new(
            "dw",
            LayerKind::Mv3SeBlock {
                bottleneck: 8,
                expansion: 48,
                se_reduction: 4,
                kernel: 3,
                stride: 1,
                dilation: 1,
                se_enabled: false,
            },
        ));
        arch.layers.push(LayerSpec::new(
            "dw2",
            LayerKind::Mv3SeBlock {
                bottleneck: 8,
                expansion: 48,
                se_reduction: 4,
                kernel: 3,
                stride: 1,
                dilation: 1,
                se_enabled: false,
            },
        ));
        let measured = impulse_rf_all_layers(&arch).unwrap();
        let one = measured[1].unwrap();
        assert_eq!(one.len(), 3, "single 3x3: {one:?}");
        let two = measured[2].unwrap();
        assert_eq!(two.len(), 5, "stacked 3x3: {two:?}");
        for (i, m) in measured.iter().enumerate() {
            let (analytic, _) = analytic_rf_box(&arch, i).unwrap();
            assert_eq!(*m, analytic, "layer {i}");
        }
    }

    #[test]
    fn impulse_s2d_box_aligned_to_grid() {
        let mut arch = build_dense_stack(8, 1, 16).unwrap();
        arch.input_channels = 3;
        arch.layers.insert(
            0,
            LayerSpec::new("s2d", LayerKind::S2d { block: 4 }),
        );
        let measured = impulse_rf_all_layers(&arch).unwrap();
        // After S2D(4) + 1x1 conv the probe unit covers one 4x4 block.
        let b = measured[1].unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.lo % 4, 0);
        let (analytic, unclipped) = analytic_rf_box(&arch, 1).unwrap();
        assert_eq!(analytic, Some(b));
        assert_eq!(unclipped, 4);
    }

    #[test]
    fn csv_report_has_layer_rows() {
        let arch = build_isometric(16, 8, 0.25, 2, 4).unwrap();
        let report = analyze(&arch).unwrap();
        let csv_text = report_to_csv(&report);
        assert_eq!(csv_text.lines().count(), 1 + arch.layers.len());
        assert!(csv_text.starts_with("id,in_shape,out_shape"));
        let table = report_to_table(&report);
        assert!(table.contains("total params"));
    }
}
