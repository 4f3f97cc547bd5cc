//! Architecture description language: the isometric builder, width /
//! resolution / depth / dilation transforms, shape inference and validation,
//! and the block-shape correspondence between resolution-scaled and
//! width-scaled stride pyramids.

use crate::error::{Error, Result};
use crate::ops::UpsampleMode;
use serde::{Deserialize, Serialize};

/// Channel counts are rounded to the nearest multiple of 8 (ties away from
/// zero), floored at 8.
pub const CHANNEL_ROUND: usize = 8;

pub fn round_channels(value: f64) -> usize {
    let rounded = (value / CHANNEL_ROUND as f64).round() as i64 * CHANNEL_ROUND as i64;
    rounded.max(CHANNEL_ROUND as i64) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// Space-to-depth input adapter with the given block size.
    S2d { block: usize },
    /// Upsampling input adapter (factor >= 1).
    UpsampleInput { factor: usize, mode: UpsampleMode },
    /// Dense 1x1 convolution; `norm_act` adds BN + hard-swish after it.
    Conv1x1 {
        out_ch: usize,
        #[serde(default)]
        bias: bool,
        #[serde(default = "default_true")]
        norm_act: bool,
    },
    /// Inverted bottleneck with squeeze-excite: 1x1 expand (BN, hard-swish),
    /// k x k depthwise (BN, hard-swish), SE gate, 1x1 project (BN, linear),
    /// residual add when shapes allow (stride 1, in == out).
    Mv3SeBlock {
        bottleneck: usize,
        expansion: usize,
        se_reduction: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default = "default_one")]
        dilation: usize,
        #[serde(default = "default_true")]
        se_enabled: bool,
    },
    /// Global average pooling to 1x1.
    AvgPool,
    /// Fully connected layer (never touched by the width multiplier).
    Fc { out: usize },
}

fn default_true() -> bool {
    true
}
fn default_kernel() -> usize {
    3
}
fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub frozen: bool,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            id: id.into(),
            kind,
            frozen: false,
        }
    }
}

/// Full network description. `input_res`, `internal_res`, `width_mult` and
/// `layers` are the stable serialized contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_res: usize,
    pub internal_res: usize,
    pub width_mult: f64,
    pub depth: usize,
    pub num_classes: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

fn default_input_channels() -> usize {
    3
}

/// Per-layer inferred geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub in_ch: usize,
    pub in_res: usize,
    pub out_ch: usize,
    pub out_res: usize,
}

/// A single named contract violation; `validate` collects these instead of
/// failing fast.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub layer_id: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}", self.layer_id, self.message)
    }
}

impl ArchSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("arch serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("arch json: {e}")))
    }

    /// Shape inference along the layer chain. Errors on the first geometry
    /// violation; use `validate` to collect all of them.
    pub fn infer_shapes(&self) -> Result<Vec<LayerShape>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut ch = self.input_channels;
        let mut res = self.input_res;
        for layer in &self.layers {
            let (in_ch, in_res) = (ch, res);
            match &layer.kind {
                LayerKind::S2d { block } => {
                    if *block == 0 || res % block != 0 {
                        return Err(Error::Divisibility(format!(
                            "layer {}: s2d block {} does not divide resolution {}",
                            layer.id, block, res
                        )));
                    }
                    ch *= block * block;
                    res /= block;
                }
                LayerKind::UpsampleInput { factor, .. } => {
                    if *factor == 0 {
                        return Err(Error::arch(format!(
                            "layer {}: upsample factor must be >= 1",
                            layer.id
                        )));
                    }
                    res *= factor;
                }
                LayerKind::Conv1x1 { out_ch, .. } => {
                    ch = *out_ch;
                }
                LayerKind::Mv3SeBlock {
                    bottleneck,
                    expansion,
                    se_reduction,
                    kernel,
                    stride,
                    dilation,
                    se_enabled,
                } => {
                    if *kernel == 0 || *stride == 0 || *dilation == 0 {
                        return Err(Error::arch(format!(
                            "layer {}: kernel/stride/dilation must be >= 1",
                            layer.id
                        )));
                    }
                    if *se_enabled && (*se_reduction == 0 || expansion % se_reduction != 0) {
                        return Err(Error::Divisibility(format!(
                            "layer {}: expansion {} not divisible by se_reduction {}",
                            layer.id, expansion, se_reduction
                        )));
                    }
                    let _ = bottleneck;
                    ch = *bottleneck;
                    res = res.div_ceil(*stride);
                }
                LayerKind::AvgPool => {
                    res = 1;
                }
                LayerKind::Fc { out } => {
                    if res != 1 {
                        return Err(Error::arch(format!(
                            "layer {}: fully connected requires pooled 1x1 input, has {res}x{res}",
                            layer.id
                        )));
                    }
                    ch = *out;
                }
            }
            shapes.push(LayerShape {
                in_ch,
                in_res,
                out_ch: ch,
                out_res: res,
            });
        }
        Ok(shapes)
    }

    /// Channel count entering the classifier head (input of the pool layer).
    pub fn head_channels(&self) -> Result<usize> {
        let shapes = self.infer_shapes()?;
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            if matches!(layer.kind, LayerKind::AvgPool) {
                return Ok(shape.in_ch);
            }
        }
        Err(Error::arch("architecture has no pooling head".to_string()))
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }
}

/// Runs every structural check and returns the violations as data; empty
/// means the architecture is executable. Pure conv stacks without a
/// classifier head are valid analysis subjects; the trainer additionally
/// requires a head.
pub fn validate(arch: &ArchSpec) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for layer in &arch.layers {
        if !seen.insert(layer.id.as_str()) {
            violations.push(Violation {
                layer_id: layer.id.clone(),
                message: "duplicate layer id".to_string(),
            });
        }
    }
    if arch.layers.is_empty() {
        violations.push(Violation {
            layer_id: "<arch>".to_string(),
            message: "architecture has no layers".to_string(),
        });
        return violations;
    }
    if arch.input_res == 0 || arch.input_channels == 0 {
        violations.push(Violation {
            layer_id: "<arch>".to_string(),
            message: "input resolution and channels must be >= 1".to_string(),
        });
        return violations;
    }

    // Walk layers one at a time so every divisibility break is named.
    let mut ch = arch.input_channels;
    let mut res = arch.input_res;
    let mut pooled = false;
    let mut fc_seen = false;
    for layer in &arch.layers {
        let probe = ArchSpec {
            input_res: res,
            internal_res: res,
            width_mult: 1.0,
            depth: 1,
            num_classes: arch.num_classes,
            input_channels: ch,
            layers: vec![layer.clone()],
        };
        match probe.infer_shapes() {
            Ok(shapes) => {
                ch = shapes[0].out_ch;
                res = shapes[0].out_res;
            }
            Err(e) => {
                violations.push(Violation {
                    layer_id: layer.id.clone(),
                    message: e.to_string(),
                });
                return violations;
            }
        }
        match layer.kind {
            LayerKind::AvgPool => pooled = true,
            LayerKind::Fc { .. } => {
                if !pooled {
                    violations.push(Violation {
                        layer_id: layer.id.clone(),
                        message: "fully connected layer before global pooling".to_string(),
                    });
                }
                fc_seen = true;
            }
            _ => {
                if fc_seen || pooled {
                    violations.push(Violation {
                        layer_id: layer.id.clone(),
                        message: "convolutional layer after the classifier head".to_string(),
                    });
                }
            }
        }
    }
    if fc_seen && arch.num_classes != 0 {
        if let Some(LayerKind::Fc { out }) = arch.layers.last().map(|l| &l.kind) {
            if *out != arch.num_classes {
                violations.push(Violation {
                    layer_id: arch.layers.last().unwrap().id.clone(),
                    message: format!(
                        "final layer emits {} classes, arch declares {}",
                        out, arch.num_classes
                    ),
                });
            }
        }
    }
    violations
}

/// The isometric stack: an input adapter (space-to-depth when the image is
/// larger than the internal resolution, bilinear upsampling when smaller), a
/// 1x1 stem to 64m channels, `depth` identical MV3_SE(64m, 384m, 4) blocks, a
/// 1x1 head to 768m, global pool, FC(1280), FC(num_classes). The multiplier
/// `m` never touches the fully connected layers.
pub fn build_isometric(
    input_res: usize,
    internal_res: usize,
    width_mult: f64,
    depth: usize,
    num_classes: usize,
) -> Result<ArchSpec> {
    if input_res == 0 || internal_res == 0 {
        return Err(Error::arch("resolutions must be >= 1".to_string()));
    }
    if width_mult <= 0.0 {
        return Err(Error::arch("width multiplier must be positive".to_string()));
    }
    if depth == 0 {
        return Err(Error::arch("depth must be >= 1".to_string()));
    }
    if input_res % internal_res != 0 && internal_res % input_res != 0 {
        return Err(Error::Divisibility(format!(
            "input resolution {input_res} and internal resolution {internal_res} \
             have no integer adapter ratio"
        )));
    }

    let bottleneck = round_channels(64.0 * width_mult);
    let expansion = 6 * bottleneck;
    let head = round_channels(768.0 * width_mult);

    let mut layers = Vec::new();
    if input_res > internal_res {
        layers.push(LayerSpec::new(
            "s2d",
            LayerKind::S2d {
                block: input_res / internal_res,
            },
        ));
    } else if input_res < internal_res {
        layers.push(LayerSpec::new(
            "up",
            LayerKind::UpsampleInput {
                factor: internal_res / input_res,
                mode: UpsampleMode::Bilinear,
            },
        ));
    }
    layers.push(LayerSpec::new(
        "stem",
        LayerKind::Conv1x1 {
            out_ch: bottleneck,
            bias: false,
            norm_act: true,
        },
    ));
    for i in 1..=depth {
        layers.push(LayerSpec::new(
            format!("block{i}"),
            LayerKind::Mv3SeBlock {
                bottleneck,
                expansion,
                se_reduction: 4,
                kernel: 3,
                stride: 1,
                dilation: 1,
                se_enabled: true,
            },
        ));
    }
    layers.push(LayerSpec::new(
        "head",
        LayerKind::Conv1x1 {
            out_ch: head,
            bias: false,
            norm_act: true,
        },
    ));
    layers.push(LayerSpec::new("pool", LayerKind::AvgPool));
    layers.push(LayerSpec::new("fc1", LayerKind::Fc { out: 1280 }));
    layers.push(LayerSpec::new("fc2", LayerKind::Fc { out: num_classes }));

    Ok(ArchSpec {
        input_res,
        internal_res,
        width_mult,
        depth,
        num_classes,
        input_channels: 3,
        layers,
    })
}

/// Headless stack of `depth` identical dense 1x1 convolutions (no bias, no
/// norm) over `channels`-channel feature maps: the scaling-law family on
/// which every Table-1 ratio is exact.
pub fn build_dense_stack(channels: usize, depth: usize, res: usize) -> Result<ArchSpec> {
    if channels % CHANNEL_ROUND != 0 {
        return Err(Error::arch(format!(
            "dense stack channels must be a multiple of {CHANNEL_ROUND} so width scaling stays exact"
        )));
    }
    if depth == 0 || res == 0 {
        return Err(Error::arch("dense stack needs depth and res >= 1".to_string()));
    }
    let layers = (1..=depth)
        .map(|i| {
            LayerSpec::new(
                format!("conv{i}"),
                LayerKind::Conv1x1 {
                    out_ch: channels,
                    bias: false,
                    norm_act: false,
                },
            )
        })
        .collect();
    Ok(ArchSpec {
        input_res: res,
        internal_res: res,
        width_mult: 1.0,
        depth,
        num_classes: 0,
        input_channels: channels,
        layers,
    })
}

/// Stride pyramid following the progressive-downsampling recurrence
/// r_i = r_{i-1}/s_i, c_i = s_i * c_{i-1}: `block_layers[p]` counts the
/// layers of resolution block p, the last of which strides by 2 and doubles
/// the channel count. Topped with the usual pool + FC head.
pub fn build_stride_pyramid(
    block_layers: &[usize],
    input_res: usize,
    base_channels: usize,
    num_classes: usize,
) -> Result<ArchSpec> {
    if block_layers.is_empty() || block_layers.iter().any(|&b| b == 0) {
        return Err(Error::arch("each resolution block needs >= 1 layer".to_string()));
    }
    if input_res % (1 << block_layers.len()) != 0 {
        return Err(Error::Divisibility(format!(
            "input resolution {} not divisible by 2^{}",
            input_res,
            block_layers.len()
        )));
    }
    let mut layers = vec![LayerSpec::new(
        "stem",
        LayerKind::Conv1x1 {
            out_ch: base_channels,
            bias: false,
            norm_act: true,
        },
    )];
    let mut ch = base_channels;
    for (p, &count) in block_layers.iter().enumerate() {
        for j in 1..count {
            layers.push(LayerSpec::new(format!("b{}l{}", p + 1, j), mv3(ch, ch, 1)));
        }
        // Block-closing layer: stride 2, channels double.
        layers.push(LayerSpec::new(format!("b{}down", p + 1), mv3(ch, ch * 2, 2)));
        ch *= 2;
    }
    layers.push(LayerSpec::new("pool", LayerKind::AvgPool));
    layers.push(LayerSpec::new("fc", LayerKind::Fc { out: num_classes }));
    Ok(ArchSpec {
        input_res,
        internal_res: input_res >> block_layers.len(),
        width_mult: 1.0,
        depth: block_layers.iter().sum(),
        num_classes,
        input_channels: 3,
        layers,
    })
}

fn mv3(in_ch: usize, out_ch: usize, stride: usize) -> LayerKind {
    LayerKind::Mv3SeBlock {
        bottleneck: out_ch,
        expansion: 6 * in_ch,
        se_reduction: 4,
        kernel: 3,
        stride,
        dilation: 1,
        se_enabled: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MultiplierTransform {
    /// Scale every non-FC channel count by the factor, rounding to the
    /// channel multiple. Feature-map inputs (input_channels a multiple of 8)
    /// scale too; image inputs (1 or 3 channels) stay fixed.
    Width(f64),
    /// Scale input and internal resolutions; factors must land on integers.
    Resolution(f64),
    /// Scale every repeated-block run (length >= 2) by the factor, rounding
    /// half-up.
    Depth(f64),
    /// Receptive-field transform: stride-1 blocks get the dilation rate,
    /// stride-2 blocks get a 5x5 kernel.
    Dilate(usize),
}

pub fn apply_multiplier(arch: &ArchSpec, transform: MultiplierTransform) -> Result<ArchSpec> {
    match transform {
        MultiplierTransform::Width(alpha) => apply_width(arch, alpha),
        MultiplierTransform::Resolution(alpha) => apply_resolution(arch, alpha),
        MultiplierTransform::Depth(alpha) => apply_depth(arch, alpha),
        MultiplierTransform::Dilate(rate) => apply_dilate(arch, rate),
    }
}

fn apply_width(arch: &ArchSpec, alpha: f64) -> Result<ArchSpec> {
    if alpha <= 0.0 {
        return Err(Error::arch("width factor must be positive".to_string()));
    }
    let mut out = arch.clone();
    out.width_mult = arch.width_mult * alpha;
    if arch.input_channels % CHANNEL_ROUND == 0 {
        out.input_channels = round_channels(arch.input_channels as f64 * alpha);
    }
    for layer in &mut out.layers {
        match &mut layer.kind {
            LayerKind::Conv1x1 { out_ch, .. } => {
                *out_ch = round_channels(*out_ch as f64 * alpha);
            }
            LayerKind::Mv3SeBlock {
                bottleneck,
                expansion,
                ..
            } => {
                *bottleneck = round_channels(*bottleneck as f64 * alpha);
                *expansion = round_channels(*expansion as f64 * alpha);
            }
            _ => {}
        }
    }
    Ok(out)
}

fn apply_resolution(arch: &ArchSpec, alpha: f64) -> Result<ArchSpec> {
    if alpha <= 0.0 {
        return Err(Error::arch("resolution factor must be positive".to_string()));
    }
    let scale = |v: usize| -> Result<usize> {
        let scaled = v as f64 * alpha;
        let rounded = scaled.round();
        if (scaled - rounded).abs() > 1e-9 || rounded < 1.0 {
            return Err(Error::arch(format!(
                "resolution {v} * {alpha} does not land on a positive integer"
            )));
        }
        Ok(rounded as usize)
    };
    let mut out = arch.clone();
    out.input_res = scale(arch.input_res)?;
    out.internal_res = scale(arch.internal_res)?;
    Ok(out)
}

fn apply_depth(arch: &ArchSpec, alpha: f64) -> Result<ArchSpec> {
    if alpha <= 0.0 {
        return Err(Error::arch("depth factor must be positive".to_string()));
    }
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut i = 0;
    while i < arch.layers.len() {
        let mut j = i + 1;
        while j < arch.layers.len() && arch.layers[j].kind == arch.layers[i].kind {
            j += 1;
        }
        let run = j - i;
        let repeatable = matches!(
            arch.layers[i].kind,
            LayerKind::Mv3SeBlock { .. } | LayerKind::Conv1x1 { .. }
        );
        if run >= 2 && repeatable {
            let new_len = ((run as f64 * alpha) + 0.5).floor().max(1.0) as usize;
            for r in 1..=new_len {
                let mut layer = arch.layers[i].clone();
                layer.id = format!("{}{}", strip_run_suffix(&arch.layers[i].id), r);
                layers.push(layer);
            }
        } else {
            layers.extend(arch.layers[i..j].iter().cloned());
        }
        i = j;
    }
    let mut out = arch.clone();
    out.layers = layers;
    let blocks = out
        .layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Mv3SeBlock { .. }))
        .count();
    out.depth = if blocks > 0 {
        blocks
    } else {
        out.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv1x1 { .. }))
            .count()
    };
    Ok(out)
}

fn strip_run_suffix(id: &str) -> &str {
    id.trim_end_matches(|c: char| c.is_ascii_digit())
}

fn apply_dilate(arch: &ArchSpec, rate: usize) -> Result<ArchSpec> {
    if rate == 0 {
        return Err(Error::arch("dilation rate must be >= 1".to_string()));
    }
    let mut out = arch.clone();
    for layer in &mut out.layers {
        if let LayerKind::Mv3SeBlock {
            kernel,
            stride,
            dilation,
            ..
        } = &mut layer.kind
        {
            if *stride == 1 {
                *dilation = rate;
            } else {
                *kernel = 5;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Resolution-block correspondence
// ---------------------------------------------------------------------------

/// One resolution block of a stride pyramid: the run of body layers whose
/// inputs share a spatial resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub resolution: usize,
    pub channels: usize,
    pub layers: usize,
}

#[derive(Debug, Clone)]
pub struct CorrespondenceReport {
    pub alpha: f64,
    /// True when the arch has no downsampling: the shared span of the
    /// correspondence disappears and nothing aligns.
    pub degenerate: bool,
    pub resolution_blocks: Vec<BlockShape>,
    pub width_blocks: Vec<BlockShape>,
    /// Pairs (p, p+1): block p of the resolution-scaled arch matched block
    /// p+1 of the width-scaled arch (0-based indices).
    pub aligned: Vec<(usize, usize)>,
    pub all_aligned_match: bool,
    /// Boundary blocks with no partner: the width-scaled arch's first block
    /// and the resolution-scaled arch's last block.
    pub unmatched_width_first: Option<BlockShape>,
    pub unmatched_resolution_last: Option<BlockShape>,
}

/// Groups body layers (convolutions and blocks; adapters and the head are
/// skipped) into resolution blocks by their input resolution. A block's
/// channel count is the width flowing into its last layer.
pub fn resolution_blocks(arch: &ArchSpec) -> Result<Vec<BlockShape>> {
    let shapes = arch.infer_shapes()?;
    let mut blocks: Vec<BlockShape> = Vec::new();
    for (layer, shape) in arch.layers.iter().zip(&shapes) {
        let body = matches!(
            layer.kind,
            LayerKind::Conv1x1 { .. } | LayerKind::Mv3SeBlock { .. }
        );
        if !body {
            continue;
        }
        match blocks.last_mut() {
            Some(b) if b.resolution == shape.in_res => {
                b.layers += 1;
                b.channels = shape.in_ch;
            }
            _ => blocks.push(BlockShape {
                resolution: shape.in_res,
                channels: shape.in_ch,
                layers: 1,
            }),
        }
    }
    Ok(blocks)
}

/// Verifies the identity between resolution scaling and width scaling on a
/// stride pyramid: block p of the resolution-scaled arch has the same
/// (resolution, channels) as block p+1 of the width-scaled arch, leaving one
/// unmatched block at each boundary. Isometric architectures degenerate: no
/// stride-2 layers, nothing to align.
pub fn eq1_correspondence(arch: &ArchSpec, alpha: f64) -> Result<CorrespondenceReport> {
    let has_downsampling = arch
        .layers
        .iter()
        .any(|l| matches!(l.kind, LayerKind::Mv3SeBlock { stride, .. } if stride >= 2));
    let scaled_res = apply_multiplier(arch, MultiplierTransform::Resolution(alpha))?;
    let scaled_width = apply_multiplier(arch, MultiplierTransform::Width(alpha))?;
    let res_blocks = resolution_blocks(&scaled_res)?;
    let width_blocks = resolution_blocks(&scaled_width)?;

    if !has_downsampling || res_blocks.len() < 2 {
        return Ok(CorrespondenceReport {
            alpha,
            degenerate: true,
            resolution_blocks: res_blocks,
            width_blocks,
            aligned: Vec::new(),
            all_aligned_match: true,
            unmatched_width_first: None,
            unmatched_resolution_last: None,
        });
    }

    let mut aligned = Vec::new();
    let mut all_match = true;
    let pairs = res_blocks.len().min(width_blocks.len()) - 1;
    for p in 0..pairs {
        let a = res_blocks[p];
        let b = width_blocks[p + 1];
        if a.resolution == b.resolution && a.channels == b.channels {
            aligned.push((p, p + 1));
        } else {
            all_match = false;
        }
    }
    Ok(CorrespondenceReport {
        alpha,
        degenerate: false,
        unmatched_width_first: width_blocks.first().copied(),
        unmatched_resolution_last: res_blocks.last().copied(),
        resolution_blocks: res_blocks,
        width_blocks,
        aligned,
        all_aligned_match: all_match,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_channels_basics() {
        assert_eq!(round_channels(64.0), 64);
        assert_eq!(round_channels(19.2), 16);
        assert_eq!(round_channels(3.0), 8);
        assert_eq!(round_channels(0.5), 8);
        assert_eq!(round_channels(20.0), 24); // ties away from zero
    }

    #[test]
    fn isometric_table_shapes() {
        let arch = build_isometric(224, 14, 1.0, 16, 1000).unwrap();
        let shapes = arch.infer_shapes().unwrap();
        let by_id = |id: &str| shapes[arch.layer_index(id).unwrap()];
        // S2D out 14x14x768
        assert_eq!((by_id("s2d").out_ch, by_id("s2d").out_res), (768, 14));
        // stem and blocks at 14x14x64
        assert_eq!((by_id("stem").out_ch, by_id("stem").out_res), (64, 14));
        for i in 1..=16 {
            let b = by_id(&format!("block{i}"));
            assert_eq!((b.out_ch, b.out_res), (64, 14));
        }
        // head conv 14x14x768, pooled 1x1x768, FC 1280, FC 1000
        assert_eq!((by_id("head").out_ch, by_id("head").out_res), (768, 14));
        assert_eq!((by_id("pool").out_ch, by_id("pool").out_res), (768, 1));
        assert_eq!(by_id("fc1").out_ch, 1280);
        assert_eq!(by_id("fc2").out_ch, 1000);
        assert!(validate(&arch).is_empty());
    }

    #[test]
    fn isometric_rejects_bad_ratio() {
        assert!(build_isometric(220, 14, 1.0, 8, 10).is_err());
    }

    #[test]
    fn upsample_adapter_when_internal_larger() {
        let arch = build_isometric(14, 28, 1.0, 8, 10).unwrap();
        assert!(matches!(
            arch.layers[0].kind,
            LayerKind::UpsampleInput { factor: 2, .. }
        ));
        assert!(validate(&arch).is_empty());
    }

    #[test]
    fn shapes_invariant_to_input_res_given_internal() {
        // Only the adapter changes with the input resolution, so every
        // output shape from the stem onward is identical.
        let shapes_of = |r: usize| {
            let arch = build_isometric(r, 14, 1.0, 8, 100).unwrap();
            let shapes = arch.infer_shapes().unwrap();
            let start = arch.layer_index("stem").unwrap();
            shapes[start..]
                .iter()
                .map(|s| (s.out_ch, s.out_res))
                .collect::<Vec<_>>()
        };
        let a = shapes_of(56);
        let b = shapes_of(112);
        let c = shapes_of(224);
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn width_scale_matches_builder() {
        let base = build_isometric(224, 14, 1.0, 16, 1000).unwrap();
        for (alpha, m) in [(2.0, 2.0), (0.5, 0.5)] {
            let scaled = apply_multiplier(&base, MultiplierTransform::Width(alpha)).unwrap();
            let rebuilt = build_isometric(224, 14, m, 16, 1000).unwrap();
            assert_eq!(scaled.layers, rebuilt.layers);
        }
    }

    #[test]
    fn width_scale_roundtrip() {
        let base = build_isometric(224, 14, 1.0, 16, 1000).unwrap();
        let there = apply_multiplier(&base, MultiplierTransform::Width(2.0)).unwrap();
        let back = apply_multiplier(&there, MultiplierTransform::Width(0.5)).unwrap();
        assert_eq!(base.layers, back.layers);
        assert_eq!(base.input_channels, back.input_channels);
    }

    #[test]
    fn width_identity() {
        let base = build_isometric(224, 14, 1.0, 8, 10).unwrap();
        let same = apply_multiplier(&base, MultiplierTransform::Width(1.0)).unwrap();
        assert_eq!(base.layers, same.layers);
    }

    #[test]
    fn resolution_scale_halves_both() {
        let base = build_isometric(224, 14, 1.0, 8, 10).unwrap();
        let scaled = apply_multiplier(&base, MultiplierTransform::Resolution(0.5)).unwrap();
        assert_eq!(scaled.input_res, 112);
        assert_eq!(scaled.internal_res, 7);
        assert!(apply_multiplier(&base, MultiplierTransform::Resolution(0.3)).is_err());
    }

    #[test]
    fn depth_scale_rounds_half_up() {
        let base = build_isometric(224, 14, 1.0, 8, 10).unwrap();
        let deeper = apply_multiplier(&base, MultiplierTransform::Depth(2.0)).unwrap();
        assert_eq!(deeper.depth, 16);
        let shallower = apply_multiplier(&base, MultiplierTransform::Depth(0.3)).unwrap();
        assert_eq!(shallower.depth, 2); // 8 * 0.3 = 2.4 rounds half-up to 2
        // Stem and head conv are single layers: untouched.
        assert_eq!(
            deeper
                .layers
                .iter()
                .filter(|l| matches!(l.kind, LayerKind::Conv1x1 { .. }))
                .count(),
            2
        );
        assert!(validate(&deeper).is_empty());
    }

    #[test]
    fn dilate_transform() {
        let base = build_stride_pyramid(&[2, 2], 32, 16, 10).unwrap();
        let dilated = apply_multiplier(&base, MultiplierTransform::Dilate(2)).unwrap();
        for layer in &dilated.layers {
            if let LayerKind::Mv3SeBlock {
                stride,
                dilation,
                kernel,
                ..
            } = layer.kind
            {
                if stride == 1 {
                    assert_eq!((dilation, kernel), (2, 3));
                } else {
                    assert_eq!((dilation, kernel), (1, 5));
                }
            }
        }
    }

    #[test]
    fn validate_names_divisibility_breaks() {
        let mut arch = build_isometric(224, 14, 1.0, 8, 10).unwrap();
        arch.input_res = 220;
        let violations = validate(&arch);
        assert!(!violations.is_empty());
        assert!(violations[0].message.contains("s2d"));
    }

    #[test]
    fn validate_names_head_order_break() {
        let mut arch = build_isometric(224, 14, 1.0, 8, 10).unwrap();
        let stem = arch.layers.remove(1);
        let pool_at = arch.layer_index("pool").unwrap();
        arch.layers.insert(pool_at + 1, stem);
        let violations = validate(&arch);
        assert!(violations
            .iter()
            .any(|v| v.message.contains("after the classifier")));
    }

    #[test]
    fn json_roundtrip_stable_fields() {
        let arch = build_isometric(224, 14, 1.0, 8, 100).unwrap();
        let json = arch.to_json();
        for field in ["input_res", "internal_res", "width_mult", "layers", "kind"] {
            assert!(json.contains(field), "missing field {field}");
        }
        let back = ArchSpec::from_json(&json).unwrap();
        assert_eq!(arch, back);
    }

    #[test]
    fn eq1_three_block_pyramid() {
        // b = [2,2,2], r1 = 32, c1 = 16, per the downsampling recurrence.
        let arch = build_stride_pyramid(&[2, 2, 2], 32, 16, 10).unwrap();
        let report = eq1_correspondence(&arch, 0.5).unwrap();
        assert!(!report.degenerate);
        // A_r block 1 is (16, 16); A_c block 2 is (16, 16).
        assert_eq!(report.resolution_blocks[0].resolution, 16);
        assert_eq!(report.resolution_blocks[0].channels, 16);
        assert_eq!(report.width_blocks[1].resolution, 16);
        assert_eq!(report.width_blocks[1].channels, 16);
        assert_eq!(report.aligned.len(), 2);
        assert!(report.all_aligned_match);
        let first = report.unmatched_width_first.unwrap();
        assert_eq!((first.resolution, first.channels), (32, 8));
    }

    #[test]
    fn eq1_five_block_pyramid() {
        let arch = build_stride_pyramid(&[2, 3, 2, 3, 2], 64, 16, 10).unwrap();
        let report = eq1_correspondence(&arch, 0.5).unwrap();
        assert_eq!(report.aligned.len(), 4);
        assert!(report.all_aligned_match);
        assert!(report.unmatched_width_first.is_some());
        assert!(report.unmatched_resolution_last.is_some());
    }

    #[test]
    fn eq1_isometric_degenerates() {
        let arch = build_isometric(224, 14, 1.0, 8, 10).unwrap();
        let report = eq1_correspondence(&arch, 0.5).unwrap();
        assert!(report.degenerate);
        assert!(report.aligned.is_empty());
    }

    #[test]
    fn dense_stack_is_valid_and_headless() {
        let arch = build_dense_stack(32, 4, 16).unwrap();
        assert!(validate(&arch).is_empty());
        assert!(arch.head_channels().is_err());
    }
}
