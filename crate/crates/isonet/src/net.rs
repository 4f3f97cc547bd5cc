//! Network executor: compiles an `ArchSpec` into parameter tensors plus a
//! node list, and runs forward / reverse passes over it.
//!
//! The executor is generic over the scalar type. Training runs at `f32`;
//! gradient checking casts the whole network to `f64` so finite differences
//! stay tight.

use crate::arch::{ArchSpec, LayerKind, LayerShape};
use crate::error::{Error, Result};
use crate::ops::{
    batch_norm, batch_norm_backward, conv2d, conv2d_backward, depth_to_space, fully_connected,
    fully_connected_backward, global_avg_pool, global_avg_pool_backward, hard_swish,
    hard_swish_backward, space_to_depth, squeeze_excite, squeeze_excite_backward, upsample,
    upsample_backward, BnMode, BnSaved, BnStats, ConvParams, SeSaved, SqueezeExciteParams,
    UpsampleMode,
};
use crate::tensor::{Rng, Scalar, Shape4, TensorF};
use std::collections::HashMap;

/// Stream id carved out of the run seed for weight initialization; stable so
/// checkpoints reproduce.
pub const STREAM_INIT: u64 = 0x10;

/// One named parameter tensor. Running statistics are state: persisted and
/// restored, but never touched by optimizers.
#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub name: String,
    pub layer_id: String,
    pub tensor: TensorF<F>,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push(&mut self, name: String, layer_id: &str, tensor: TensorF<F>, trainable: bool) -> usize {
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            layer_id: layer_id.to_string(),
            tensor,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> &TensorF<F> {
        &self.entries[id].tensor
    }

    pub fn get_mut(&mut self, id: usize) -> &mut TensorF<F> {
        &mut self.entries[id].tensor
    }

    pub fn entry(&self, id: usize) -> &ParamEntry<F> {
        &self.entries[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry<F>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamEntry<F>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<F>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<F>> {
        self.entries.iter_mut()
    }
}

/// Per-parameter gradients, aligned with the store.
#[derive(Debug)]
pub struct GradStore<F> {
    grads: Vec<Option<TensorF<F>>>,
}

impl<F: Scalar> GradStore<F> {
    fn new(len: usize) -> Self {
        GradStore {
            grads: (0..len).map(|_| None).collect(),
        }
    }

    fn add(&mut self, id: usize, g: TensorF<F>) {
        match &mut self.grads[id] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    pub fn get(&self, id: usize) -> Option<&TensorF<F>> {
        self.grads[id].as_ref()
    }
}

#[derive(Debug, Clone, Copy)]
struct BnIds {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Act {
    None,
    HardSwish,
}

#[derive(Debug, Clone)]
struct ConvUnit {
    params: ConvParams,
    w: usize,
    b: Option<usize>,
    bn: Option<BnIds>,
    act: Act,
}

#[derive(Debug, Clone)]
struct SeUnit {
    params: SqueezeExciteParams,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
enum Node {
    S2d {
        block: usize,
    },
    Upsample {
        factor: usize,
        mode: UpsampleMode,
    },
    Conv(ConvUnit),
    Mv3 {
        expand: ConvUnit,
        dw: ConvUnit,
        se: Option<SeUnit>,
        project: ConvUnit,
        residual: bool,
    },
    AvgPool,
    Fc {
        w: usize,
        b: usize,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: BnMode,
    pub record_tape: bool,
    pub record_layer_outputs: bool,
    /// Replace the depthwise dilation of stride-1 blocks for this pass.
    pub dilation_override: Option<usize>,
    /// Force every squeeze-excite gate to 1.
    pub bypass_se: bool,
    /// Skip batch normalization entirely (probe mode).
    pub bypass_bn: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            mode: BnMode::Eval,
            record_tape: false,
            record_layer_outputs: false,
            dilation_override: None,
            bypass_se: false,
            bypass_bn: false,
        }
    }
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            mode: BnMode::Train,
            record_tape: true,
            ..Default::default()
        }
    }
}

#[derive(Debug)]
struct ConvUnitTape<F> {
    x: TensorF<F>,
    /// Effective parameters for this pass (dilation overrides included).
    params: ConvParams,
    conv_out: Option<TensorF<F>>,
    bn_saved: Option<BnSaved<F>>,
    pre_act: Option<TensorF<F>>,
}

#[derive(Debug)]
enum NodeTape<F> {
    Rearrange,
    Upsample {
        in_shape: Shape4,
    },
    Conv(ConvUnitTape<F>),
    Mv3 {
        expand: ConvUnitTape<F>,
        dw: ConvUnitTape<F>,
        se: Option<(TensorF<F>, SeSaved<F>)>,
        project: ConvUnitTape<F>,
        residual: bool,
    },
    AvgPool {
        in_shape: Shape4,
    },
    Fc {
        x: TensorF<F>,
    },
}

pub struct Tape<F> {
    nodes: Vec<NodeTape<F>>,
}

pub struct Forward<F> {
    pub output: TensorF<F>,
    pub tape: Option<Tape<F>>,
    /// Output of every arch layer, recorded when requested.
    pub layer_outputs: Option<Vec<TensorF<F>>>,
}

/// Compiled, runnable network: parameters plus the node program.
pub struct Network<F> {
    pub arch: ArchSpec,
    pub params: ParamStore<F>,
    nodes: Vec<Node>,
    #[allow(dead_code)]
    shapes: Vec<LayerShape>,
    /// Layers whose parameters and running statistics must not change.
    frozen_layers: std::collections::HashSet<String>,
}

impl<F: Scalar> Network<F> {
    /// Random initialization: truncated normal (2 sigma) with stddev
    /// sqrt(2/fan_in) for convolution and squeeze-excite weights, 0.01 for
    /// fully connected layers; BN gamma = 1, beta = 0, running stats (0, 1).
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self> {
        let mut net = Self::compile(arch)?;
        let base = Rng::new(seed).split(STREAM_INIT);
        let fc_layers: std::collections::HashSet<String> = arch
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Fc { .. }))
            .map(|l| l.id.clone())
            .collect();
        for (i, entry) in net.params.entries.iter_mut().enumerate() {
            let mut rng = base.split(i as u64);
            let t = &mut entry.tensor;
            let name = entry.name.as_str();
            if name.ends_with(".gamma") || name.ends_with(".running_var") {
                *t = TensorF::full(t.shape(), F::one());
            } else if name.ends_with(".beta")
                || name.ends_with(".running_mean")
                || name.ends_with(".b")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
            {
                *t = TensorF::zeros(t.shape());
            } else {
                // Weight tensors: (out, in, kh, kw) with fan_in = in*kh*kw.
                let s = t.shape();
                let stddev = if fc_layers.contains(&entry.layer_id) {
                    0.01
                } else {
                    (2.0 / (s.c * s.h * s.w) as f64).sqrt()
                };
                for v in t.data_mut() {
                    *v = F::from_f64(rng.next_truncated_normal(2.0) * stddev);
                }
            }
        }
        Ok(net)
    }

    /// Probe network: all weights positive (mean filters), biases zero.
    /// Combined with `bypass_bn` and `bypass_se`, a single nonzero input
    /// pixel propagates to exactly its influence region.
    pub fn probe(arch: &ArchSpec) -> Result<Self> {
        let mut net = Self::compile(arch)?;
        for entry in net.params.entries.iter_mut() {
            let name = entry.name.as_str();
            let t = &mut entry.tensor;
            if name.ends_with(".gamma") || name.ends_with(".running_var") {
                *t = TensorF::full(t.shape(), F::one());
            } else if name.ends_with(".beta")
                || name.ends_with(".running_mean")
                || name.ends_with(".b")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
            {
                *t = TensorF::zeros(t.shape());
            } else {
                let s = t.shape();
                let fan_in = (s.c * s.h * s.w) as f64;
                *t = TensorF::full(s, F::from_f64(1.0 / fan_in));
            }
        }
        Ok(net)
    }

    fn compile(arch: &ArchSpec) -> Result<Self> {
        let violations = crate::arch::validate(arch);
        if !violations.is_empty() {
            return Err(Error::arch(format!(
                "architecture invalid: {}",
                violations
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("; ")
            )));
        }
        let shapes = arch.infer_shapes()?;
        let mut params = ParamStore::new();
        let mut nodes = Vec::with_capacity(arch.layers.len());
        for (layer, shape) in arch.layers.iter().zip(&shapes) {
            let id = layer.id.as_str();
            let node = match &layer.kind {
                LayerKind::S2d { block } => Node::S2d { block: *block },
                LayerKind::UpsampleInput { factor, mode } => Node::Upsample {
                    factor: *factor,
                    mode: *mode,
                },
                LayerKind::Conv1x1 {
                    out_ch,
                    bias,
                    norm_act,
                } => Node::Conv(make_conv_unit(
                    &mut params,
                    id,
                    "",
                    ConvParams::dense(shape.in_ch, *out_ch, 1, 1),
                    *bias,
                    *norm_act,
                    if *norm_act { Act::HardSwish } else { Act::None },
                )?),
                LayerKind::Mv3SeBlock {
                    bottleneck,
                    expansion,
                    se_reduction,
                    kernel,
                    stride,
                    dilation,
                    se_enabled,
                } => {
                    let expand = make_conv_unit(
                        &mut params,
                        id,
                        "expand.",
                        ConvParams::dense(shape.in_ch, *expansion, 1, 1),
                        false,
                        true,
                        Act::HardSwish,
                    )?;
                    let dw = make_conv_unit(
                        &mut params,
                        id,
                        "dw.",
                        ConvParams::depthwise(*expansion, *kernel, *stride, *dilation),
                        false,
                        true,
                        Act::HardSwish,
                    )?;
                    let se = if *se_enabled {
                        let p = SqueezeExciteParams {
                            channels: *expansion,
                            reduction: *se_reduction,
                        };
                        p.validate()?;
                        let hid = p.hidden();
                        Some(SeUnit {
                            params: p,
                            w1: params.push(
                                format!("{id}.se.w1"),
                                id,
                                TensorF::zeros(Shape4::new(hid, *expansion, 1, 1)?),
                                true,
                            ),
                            b1: params.push(
                                format!("{id}.se.b1"),
                                id,
                                TensorF::zeros(Shape4::new(1, hid, 1, 1)?),
                                true,
                            ),
                            w2: params.push(
                                format!("{id}.se.w2"),
                                id,
                                TensorF::zeros(Shape4::new(*expansion, hid, 1, 1)?),
                                true,
                            ),
                            b2: params.push(
                                format!("{id}.se.b2"),
                                id,
                                TensorF::zeros(Shape4::new(1, *expansion, 1, 1)?),
                                true,
                            ),
                        })
                    } else {
                        None
                    };
                    let project = make_conv_unit(
                        &mut params,
                        id,
                        "project.",
                        ConvParams::dense(*expansion, *bottleneck, 1, 1),
                        false,
                        true,
                        Act::None,
                    )?;
                    Node::Mv3 {
                        expand,
                        dw,
                        se,
                        project,
                        residual: *stride == 1 && shape.in_ch == *bottleneck,
                    }
                }
                LayerKind::AvgPool => Node::AvgPool,
                LayerKind::Fc { out } => Node::Fc {
                    w: params.push(
                        format!("{id}.w"),
                        id,
                        TensorF::zeros(Shape4::new(*out, shape.in_ch, 1, 1)?),
                        true,
                    ),
                    b: params.push(
                        format!("{id}.b"),
                        id,
                        TensorF::zeros(Shape4::new(1, *out, 1, 1)?),
                        true,
                    ),
                },
            };
            nodes.push(node);
        }
        let frozen_layers = arch
            .layers
            .iter()
            .filter(|l| l.frozen)
            .map(|l| l.id.clone())
            .collect();
        Ok(Network {
            arch: arch.clone(),
            params,
            nodes,
            shapes,
            frozen_layers,
        })
    }

    /// Freeze additional layers by id: their parameters and running
    /// statistics stay bit-identical through training.
    pub fn freeze_layers<I: IntoIterator<Item = String>>(&mut self, ids: I) {
        self.frozen_layers.extend(ids);
    }

    pub fn is_frozen(&self, layer_id: &str) -> bool {
        self.frozen_layers.contains(layer_id)
    }

    /// Cast every parameter to another scalar type (64-bit gradient checks).
    pub fn cast<G: Scalar>(&self) -> Network<G> {
        Network {
            arch: self.arch.clone(),
            params: ParamStore {
                entries: self
                    .params
                    .entries
                    .iter()
                    .map(|e| ParamEntry {
                        name: e.name.clone(),
                        layer_id: e.layer_id.clone(),
                        tensor: e.tensor.cast::<G>(),
                        trainable: e.trainable,
                    })
                    .collect(),
                index: self.params.index.clone(),
            },
            nodes: self.nodes.clone(),
            shapes: self.shapes.clone(),
            frozen_layers: self.frozen_layers.clone(),
        }
    }

    pub fn forward(&mut self, x: &TensorF<F>, opts: &ForwardOptions) -> Result<Forward<F>> {
        if x.shape().c != self.arch.input_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {}",
                self.arch.input_channels,
                x.shape().c
            )));
        }
        let mut tape = opts.record_tape.then(|| Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
        });
        let mut layer_outputs = opts
            .record_layer_outputs
            .then(|| Vec::with_capacity(self.nodes.len()));
        let mut cur = x.clone();
        for i in 0..self.nodes.len() {
            let node = self.nodes[i].clone();
            let frozen = self.frozen_layers.contains(&self.arch.layers[i].id);
            let (out, node_tape) = self.forward_node(&node, cur, opts, frozen)?;
            if let (Some(t), Some(nt)) = (&mut tape, node_tape) {
                t.nodes.push(nt);
            }
            if let Some(outs) = &mut layer_outputs {
                outs.push(out.clone());
            }
            cur = out;
        }
        Ok(Forward {
            output: cur,
            tape,
            layer_outputs,
        })
    }

    pub fn forward_logits(&mut self, x: &TensorF<F>, mode: BnMode) -> Result<TensorF<F>> {
        let opts = ForwardOptions {
            mode,
            ..Default::default()
        };
        Ok(self.forward(x, &opts)?.output)
    }

    fn forward_node(
        &mut self,
        node: &Node,
        x: TensorF<F>,
        opts: &ForwardOptions,
        frozen: bool,
    ) -> Result<(TensorF<F>, Option<NodeTape<F>>)> {
        let record = opts.record_tape;
        match node {
            Node::S2d { block } => Ok((
                space_to_depth(&x, *block)?,
                record.then_some(NodeTape::Rearrange),
            )),
            Node::Upsample { factor, mode } => {
                let in_shape = x.shape();
                Ok((
                    upsample(&x, *factor, *mode)?,
                    record.then_some(NodeTape::Upsample { in_shape }),
                ))
            }
            Node::Conv(unit) => {
                let (y, t) = self.conv_unit_forward(unit, x, opts, false, frozen)?;
                Ok((y, t.map(NodeTape::Conv)))
            }
            Node::Mv3 {
                expand,
                dw,
                se,
                project,
                residual,
            } => {
                let x0 = x;
                let (e, expand_t) = self.conv_unit_forward(expand, x0.clone(), opts, false, frozen)?;
                let (d, dw_t) = self.conv_unit_forward(dw, e, opts, true, frozen)?;
                let (s_out, se_t) = match se {
                    Some(unit) if !opts.bypass_se => {
                        let (y, saved) = squeeze_excite(
                            &d,
                            self.params.get(unit.w1),
                            self.params.get(unit.b1),
                            self.params.get(unit.w2),
                            self.params.get(unit.b2),
                            &unit.params,
                        )?;
                        (y, record.then_some((d, saved)))
                    }
                    _ => (d, None),
                };
                let (p, project_t) = self.conv_unit_forward(project, s_out, opts, false, frozen)?;
                let y = if *residual {
                    let mut y = p;
                    for (o, &v) in y.data_mut().iter_mut().zip(x0.data()) {
                        *o = *o + v;
                    }
                    y
                } else {
                    p
                };
                let tape = record.then(|| NodeTape::Mv3 {
                    expand: expand_t.expect("tape recorded"),
                    dw: dw_t.expect("tape recorded"),
                    se: se_t,
                    project: project_t.expect("tape recorded"),
                    residual: *residual,
                });
                Ok((y, tape))
            }
            Node::AvgPool => {
                let in_shape = x.shape();
                Ok((
                    global_avg_pool(&x),
                    record.then_some(NodeTape::AvgPool { in_shape }),
                ))
            }
            Node::Fc { w, b } => {
                let y = fully_connected(&x, self.params.get(*w), self.params.get(*b))?;
                Ok((y, record.then_some(NodeTape::Fc { x })))
            }
        }
    }

    fn conv_unit_forward(
        &mut self,
        unit: &ConvUnit,
        x: TensorF<F>,
        opts: &ForwardOptions,
        allow_dilation_override: bool,
        frozen: bool,
    ) -> Result<(TensorF<F>, Option<ConvUnitTape<F>>)> {
        let record = opts.record_tape;
        let mut p = unit.params;
        if allow_dilation_override && p.stride == 1 {
            if let Some(rate) = opts.dilation_override {
                p.dilation = rate;
            }
        }
        let bias = unit.b.map(|b| self.params.get(b).clone());
        let conv_out = conv2d(&x, self.params.get(unit.w), bias.as_ref(), &p)?;
        let has_bn = unit.bn.is_some() && !opts.bypass_bn;
        let (bn_out, bn_saved, conv_saved) = if has_bn {
            let bn = unit.bn.as_ref().unwrap();
            let gamma = self.params.get(bn.gamma).clone();
            let beta = self.params.get(bn.beta).clone();
            let mut stats = BnStats {
                mean: self.params.get(bn.running_mean).clone(),
                var: self.params.get(bn.running_var).clone(),
            };
            let (y, saved) = batch_norm(&conv_out, &gamma, &beta, &mut stats, opts.mode)?;
            if opts.mode == BnMode::Train && !frozen {
                *self.params.get_mut(bn.running_mean) = stats.mean;
                *self.params.get_mut(bn.running_var) = stats.var;
            }
            (y, Some(saved), record.then_some(conv_out))
        } else {
            (conv_out, None, None)
        };
        let (out, pre_act_saved) = match unit.act {
            Act::HardSwish => {
                let y = hard_swish(&bn_out);
                (y, record.then_some(bn_out))
            }
            Act::None => (bn_out, None),
        };
        let tape = record.then(|| ConvUnitTape {
            x,
            params: p,
            conv_out: conv_saved,
            bn_saved,
            pre_act: pre_act_saved,
        });
        Ok((out, tape))
    }

    /// Reverse pass over a recorded tape; returns per-parameter gradients.
    pub fn backward(&self, tape: &Tape<F>, grad_out: TensorF<F>) -> Result<GradStore<F>> {
        let mut grads = GradStore::new(self.params.len());
        let mut g = grad_out;
        for (node, node_tape) in self.nodes.iter().zip(tape.nodes.iter()).rev() {
            g = self.backward_node(node, node_tape, g, &mut grads)?;
        }
        Ok(grads)
    }

    fn backward_node(
        &self,
        node: &Node,
        tape: &NodeTape<F>,
        g: TensorF<F>,
        grads: &mut GradStore<F>,
    ) -> Result<TensorF<F>> {
        match (node, tape) {
            (Node::S2d { block }, NodeTape::Rearrange) => depth_to_space(&g, *block),
            (Node::Upsample { factor, mode }, NodeTape::Upsample { in_shape }) => {
                upsample_backward(*in_shape, *factor, *mode, &g)
            }
            (Node::Conv(unit), NodeTape::Conv(t)) => self.conv_unit_backward(unit, t, g, grads),
            (
                Node::Mv3 {
                    expand,
                    dw,
                    se,
                    project,
                    ..
                },
                NodeTape::Mv3 {
                    expand: expand_t,
                    dw: dw_t,
                    se: se_t,
                    project: project_t,
                    residual,
                },
            ) => {
                let g_res = residual.then(|| g.clone());
                let g_proj = self.conv_unit_backward(project, project_t, g, grads)?;
                let g_dw_out = match (se, se_t) {
                    (Some(unit), Some((se_x, saved))) => {
                        let se_grads = squeeze_excite_backward(
                            se_x,
                            self.params.get(unit.w1),
                            self.params.get(unit.w2),
                            &unit.params,
                            saved,
                            &g_proj,
                        )?;
                        grads.add(unit.w1, se_grads.w1);
                        grads.add(unit.b1, se_grads.b1);
                        grads.add(unit.w2, se_grads.w2);
                        grads.add(unit.b2, se_grads.b2);
                        se_grads.input
                    }
                    _ => g_proj,
                };
                let g_e = self.conv_unit_backward(dw, dw_t, g_dw_out, grads)?;
                let mut g_x0 = self.conv_unit_backward(expand, expand_t, g_e, grads)?;
                if let Some(gr) = g_res {
                    for (a, &b) in g_x0.data_mut().iter_mut().zip(gr.data()) {
                        *a = *a + b;
                    }
                }
                Ok(g_x0)
            }
            (Node::AvgPool, NodeTape::AvgPool { in_shape }) => {
                Ok(global_avg_pool_backward(*in_shape, &g))
            }
            (Node::Fc { w, b }, NodeTape::Fc { x }) => {
                let fc_grads = fully_connected_backward(x, self.params.get(*w), &g)?;
                grads.add(*w, fc_grads.weights);
                grads.add(*b, fc_grads.bias);
                Ok(fc_grads.input)
            }
            _ => Err(Error::arch("tape does not match network".to_string())),
        }
    }

    fn conv_unit_backward(
        &self,
        unit: &ConvUnit,
        tape: &ConvUnitTape<F>,
        g: TensorF<F>,
        grads: &mut GradStore<F>,
    ) -> Result<TensorF<F>> {
        let g = match (unit.act, &tape.pre_act) {
            (Act::HardSwish, Some(pre)) => hard_swish_backward(pre, &g),
            _ => g,
        };
        let g = match (&unit.bn, &tape.bn_saved) {
            (Some(bn), Some(saved)) => {
                let bn_grads = batch_norm_backward(
                    tape.conv_out.as_ref().expect("conv output saved with bn"),
                    self.params.get(bn.gamma),
                    saved,
                    &g,
                )?;
                grads.add(bn.gamma, bn_grads.gamma);
                grads.add(bn.beta, bn_grads.beta);
                bn_grads.input
            }
            _ => g,
        };
        let conv_grads =
            conv2d_backward(&tape.x, self.params.get(unit.w), &tape.params, &g, unit.b.is_some())?;
        grads.add(unit.w, conv_grads.weights);
        if let (Some(b), Some(gb)) = (unit.b, conv_grads.bias) {
            grads.add(b, gb);
        }
        Ok(conv_grads.input)
    }

    /// Average logits over the `replicas` polyphase copies produced by
    /// space_to_batch: (n*replicas, classes, 1, 1) -> (n, classes, 1, 1).
    /// Replica order is fixed by the batch layout.
    pub fn average_replica_logits(logits: &TensorF<F>, replicas: usize) -> Result<TensorF<F>> {
        let s = logits.shape();
        if s.n % replicas != 0 {
            return Err(Error::Divisibility(format!(
                "batch {} not divisible by replica count {}",
                s.n, replicas
            )));
        }
        let n_out = s.n / replicas;
        let mut out = TensorF::zeros(Shape4::new(n_out, s.c, 1, 1)?);
        let inv = F::one() / F::from_f64(replicas as f64);
        for n in 0..n_out {
            for c in 0..s.c {
                let mut acc = F::zero();
                for r in 0..replicas {
                    acc = acc + logits.at(n * replicas + r, c, 0, 0);
                }
                out.set(n, c, 0, 0, acc * inv);
            }
        }
        Ok(out)
    }
}

fn make_conv_unit<F: Scalar>(
    params: &mut ParamStore<F>,
    layer_id: &str,
    prefix: &str,
    p: ConvParams,
    bias: bool,
    norm: bool,
    act: Act,
) -> Result<ConvUnit> {
    p.validate()?;
    let w = params.push(
        format!("{layer_id}.{prefix}w"),
        layer_id,
        TensorF::<F>::zeros(p.weight_shape()?),
        true,
    );
    let b = bias
        .then(|| {
            Shape4::new(1, p.out_ch, 1, 1).map(|s| {
                params.push(
                    format!("{layer_id}.{prefix}b"),
                    layer_id,
                    TensorF::<F>::zeros(s),
                    true,
                )
            })
        })
        .transpose()?;
    let bn = if norm {
        let shape = Shape4::new(1, p.out_ch, 1, 1)?;
        Some(BnIds {
            gamma: params.push(
                format!("{layer_id}.{prefix}bn.gamma"),
                layer_id,
                TensorF::<F>::zeros(shape),
                true,
            ),
            beta: params.push(
                format!("{layer_id}.{prefix}bn.beta"),
                layer_id,
                TensorF::<F>::zeros(shape),
                true,
            ),
            running_mean: params.push(
                format!("{layer_id}.{prefix}bn.running_mean"),
                layer_id,
                TensorF::<F>::zeros(shape),
                false,
            ),
            running_var: params.push(
                format!("{layer_id}.{prefix}bn.running_var"),
                layer_id,
                TensorF::<F>::zeros(shape),
                false,
            ),
        })
    } else {
        None
    };
    Ok(ConvUnit {
        params: p,
        w,
        b,
        bn,
        act,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::build_isometric;

    #[test]
    fn init_is_deterministic() {
        let arch = build_isometric(16, 8, 0.25, 2, 4).unwrap();
        let a: Network<f32> = Network::init(&arch, 7).unwrap();
        let b: Network<f32> = Network::init(&arch, 7).unwrap();
        for (x, y) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.tensor.data(), y.tensor.data());
        }
        let c: Network<f32> = Network::init(&arch, 8).unwrap();
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|(x, y)| x.tensor.data() != y.tensor.data());
        assert!(differs);
    }

    #[test]
    fn forward_shapes_and_finite() {
        let arch = build_isometric(16, 8, 0.25, 2, 4).unwrap();
        let mut net: Network<f32> = Network::init(&arch, 1).unwrap();
        let x = TensorF::rand_normal(Shape4::new(2, 3, 16, 16).unwrap(), &mut Rng::new(3), 1.0);
        let y = net.forward_logits(&x, BnMode::Eval).unwrap();
        assert_eq!(y.shape(), Shape4::new(2, 4, 1, 1).unwrap());
        assert!(y.is_finite());
    }

    #[test]
    fn forward_is_deterministic() {
        let arch = build_isometric(16, 8, 0.25, 2, 4).unwrap();
        let mut net: Network<f32> = Network::init(&arch, 1).unwrap();
        let x = TensorF::rand_normal(Shape4::new(2, 3, 16, 16).unwrap(), &mut Rng::new(3), 1.0);
        let y1 = net.forward_logits(&x, BnMode::Eval).unwrap();
        let y2 = net.forward_logits(&x, BnMode::Eval).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let arch = build_isometric(8, 8, 0.25, 1, 2).unwrap();
        let mut net: Network<f32> = Network::init(&arch, 1).unwrap();
        let before = net
            .params
            .by_name("stem.bn.running_mean")
            .unwrap()
            .tensor
            .clone();
        let x = TensorF::rand_normal(Shape4::new(2, 3, 8, 8).unwrap(), &mut Rng::new(3), 1.0);
        let opts = ForwardOptions {
            mode: BnMode::Train,
            ..Default::default()
        };
        net.forward(&x, &opts).unwrap();
        let after = &net.params.by_name("stem.bn.running_mean").unwrap().tensor;
        assert_ne!(before.data(), after.data());
    }

    #[test]
    fn backward_produces_grads_for_all_trainable() {
        let arch = build_isometric(8, 8, 0.25, 1, 2).unwrap();
        let mut net: Network<f32> = Network::init(&arch, 1).unwrap();
        let x = TensorF::rand_normal(Shape4::new(2, 3, 8, 8).unwrap(), &mut Rng::new(3), 1.0);
        let fwd = net.forward(&x, &ForwardOptions::train()).unwrap();
        let gout = TensorF::full(fwd.output.shape(), 1.0);
        let grads = net.backward(fwd.tape.as_ref().unwrap(), gout).unwrap();
        for (i, entry) in net.params.iter().enumerate() {
            if entry.trainable {
                assert!(grads.get(i).is_some(), "missing grad for {}", entry.name);
            }
        }
    }

    #[test]
    fn replica_logit_average() {
        let logits = TensorF::<f32>::from_vec(
            Shape4::new(4, 2, 1, 1).unwrap(),
            vec![1.0, 0.0, 3.0, 2.0, 10.0, 20.0, 20.0, 0.0],
        )
        .unwrap();
        let avg = Network::<f32>::average_replica_logits(&logits, 2).unwrap();
        assert_eq!(avg.data(), &[2.0, 1.0, 15.0, 10.0]);
    }
}
