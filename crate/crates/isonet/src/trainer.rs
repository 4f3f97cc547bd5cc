//! Desk-scale supervised training: optimizers, schedules, layer freezing,
//! evaluation, 64-bit gradient checking, and first-layer filter dumps.
//!
//! Everything is deterministic given the seed: shuffling draws from a
//! dedicated counter stream, reductions run in fixed order, and repeated
//! runs produce bit-identical logs and checkpoints.

use crate::arch::{ArchSpec, LayerKind, LayerSpec};
use crate::data::{
    adapt_input, write_checkpoint, Checkpoint, DatasetHandle, InputAdapter,
};
use crate::equivalence::fold_s2d_conv;
use crate::error::{Error, Result};
use crate::net::{ForwardOptions, Network};
use crate::ops::{
    softmax_cross_entropy, softmax_cross_entropy_backward, BnMode,
};
use crate::tensor::{Rng, Scalar, Shape4, Tensor, TensorF};
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Stream ids carved out of the run seed.
pub const STREAM_SHUFFLE: u64 = 0x30;
pub const STREAM_GRADCHECK: u64 = 0x40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    SgdMomentum {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    RmsProp {
        lr: f64,
        decay: f64,
        momentum: f64,
        eps: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub lr_schedule: LrSchedule,
    /// Layer ids whose parameters (and running stats) stay fixed.
    pub freeze: Vec<String>,
    pub input_adapter: InputAdapter,
    pub label_smoothing: f64,
    /// Where to dump state if the loss diverges ("<path>.diverged").
    pub divergence_dump: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 5,
            batch_size: 64,
            optimizer: Optimizer::SgdMomentum {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 1e-5,
            },
            lr_schedule: LrSchedule::Cosine,
            freeze: Vec::new(),
            input_adapter: InputAdapter::Native,
            label_smoothing: 0.1,
            divergence_dump: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    /// CSV of the deterministic columns. Wall time stays out of the file so
    /// identical seeds yield identical bytes; it is reported on stdout.
    pub fn to_csv(&self) -> String {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["epoch", "train_loss", "train_acc", "eval_acc", "lr"])
            .expect("csv write");
        for e in &self.epochs {
            wtr.write_record([
                e.epoch.to_string(),
                format!("{}", e.train_loss),
                format!("{}", e.train_acc),
                format!("{}", e.eval_acc),
                format!("{}", e.lr),
            ])
            .expect("csv write");
        }
        String::from_utf8(wtr.into_inner().expect("csv flush")).expect("utf8")
    }
}

fn schedule_lr(base: f64, schedule: LrSchedule, epoch: usize, total: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
        }
    }
}

struct OptState {
    momentum: Vec<Option<Tensor>>,
    mean_square: Vec<Option<Tensor>>,
}

/// Deterministic training loop. Returns the checkpoint of the best eval
/// epoch (ties keep the earlier epoch) plus the per-epoch log.
pub fn train(
    arch: &ArchSpec,
    cfg: &TrainConfig,
    train_data: &DatasetHandle,
    eval_data: &DatasetHandle,
) -> Result<(Checkpoint, TrainLog)> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch size must be >= 1".to_string()));
    }
    if train_data.num_classes > arch.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, head emits {}",
            train_data.num_classes, arch.num_classes
        )));
    }
    let mut net: Network<f32> = Network::init(arch, cfg.seed)?;
    for id in &cfg.freeze {
        if arch.layer_index(id).is_none() {
            return Err(Error::Config(format!("freeze target {id} is not a layer")));
        }
    }
    net.freeze_layers(cfg.freeze.iter().cloned());
    let frozen: HashSet<&str> = cfg.freeze.iter().map(|s| s.as_str()).collect();
    let arch_frozen: HashSet<&str> = arch
        .layers
        .iter()
        .filter(|l| l.frozen)
        .map(|l| l.id.as_str())
        .collect();

    let mut opt = OptState {
        momentum: (0..net.params.len()).map(|_| None).collect(),
        mean_square: (0..net.params.len()).map(|_| None).collect(),
    };
    let shuffle_base = Rng::new(cfg.seed).split(STREAM_SHUFFLE);

    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Checkpoint)> = None;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = schedule_lr(base_lr(&cfg.optimizer), cfg.lr_schedule, epoch, cfg.epochs);

        let mut indices: Vec<usize> = (0..train_data.len()).collect();
        let mut shuffle_rng = shuffle_base.split(epoch as u64);
        shuffle_rng.shuffle(&mut indices);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        let mut correct = 0usize;
        for batch_idx in indices.chunks(cfg.batch_size) {
            let (x_raw, labels) = train_data.batch(batch_idx)?;
            let x = adapt_input(&x_raw, cfg.input_adapter, arch)?;
            let fwd = net.forward(&x, &ForwardOptions::train())?;
            let (loss, saved) =
                softmax_cross_entropy(&fwd.output, &labels, cfg.label_smoothing)?;
            if !loss.is_finite() {
                if let Some(dump) = &cfg.divergence_dump {
                    let path = dump.with_extension("diverged");
                    write_checkpoint(&path, &checkpoint_from_network(&net))?;
                }
                return Err(Error::Diverged(format!(
                    "loss became non-finite at epoch {epoch}"
                )));
            }
            loss_sum += loss as f64 * labels.len() as f64;
            seen += labels.len();
            correct += count_correct(&fwd.output, &labels);

            let g_logits = softmax_cross_entropy_backward(&saved, &labels, cfg.label_smoothing);
            let grads = net.backward(fwd.tape.as_ref().expect("tape recorded"), g_logits)?;

            for i in 0..net.params.len() {
                let entry = net.params.entry(i);
                if !entry.trainable
                    || frozen.contains(entry.layer_id.as_str())
                    || arch_frozen.contains(entry.layer_id.as_str())
                {
                    continue;
                }
                let Some(grad) = grads.get(i) else { continue };
                apply_update(&cfg.optimizer, lr, i, grad.clone(), &mut opt, &mut net);
            }
        }

        let eval_acc = evaluate_network(&mut net, eval_data, cfg)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            eval_acc,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        let improved = match &best {
            None => true,
            Some((acc, _, _)) => eval_acc > *acc,
        };
        if improved {
            best = Some((eval_acc, epoch, checkpoint_from_network(&net)));
        }
        log.epochs.push(stats);
    }

    let (_, _, ckpt) = best.expect("at least one epoch ran");
    Ok((ckpt, log))
}

fn base_lr(opt: &Optimizer) -> f64 {
    match opt {
        Optimizer::SgdMomentum { lr, .. } | Optimizer::RmsProp { lr, .. } => *lr,
    }
}

fn apply_update(
    optimizer: &Optimizer,
    lr: f64,
    id: usize,
    mut grad: Tensor,
    opt: &mut OptState,
    net: &mut Network<f32>,
) {
    match optimizer {
        Optimizer::SgdMomentum {
            momentum,
            weight_decay,
            ..
        } => {
            let wd = *weight_decay as f32;
            let m = *momentum as f32;
            let lr = lr as f32;
            let w = net.params.get(id).clone();
            if wd != 0.0 {
                for (g, &wv) in grad.data_mut().iter_mut().zip(w.data()) {
                    *g += wd * wv;
                }
            }
            let vel = opt.momentum[id].get_or_insert_with(|| Tensor::zeros(w.shape()));
            let target = net.params.get_mut(id);
            for ((v, g), t) in vel
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(target.data_mut())
            {
                *v = m * *v + *g;
                *t -= lr * *v;
            }
        }
        Optimizer::RmsProp {
            decay,
            momentum,
            eps,
            ..
        } => {
            let d = *decay as f32;
            let m = *momentum as f32;
            let eps = *eps as f32;
            let lr = lr as f32;
            let shape = grad.shape();
            let ms = opt.mean_square[id].get_or_insert_with(|| Tensor::zeros(shape));
            let vel = opt.momentum[id].get_or_insert_with(|| Tensor::zeros(shape));
            let target = net.params.get_mut(id);
            for (((s, v), g), t) in ms
                .data_mut()
                .iter_mut()
                .zip(vel.data_mut())
                .zip(grad.data())
                .zip(target.data_mut())
            {
                *s = d * *s + (1.0 - d) * *g * *g;
                *v = m * *v + lr * *g / (s.sqrt() + eps);
                *t -= *v;
            }
        }
    }
}

fn count_correct<F: Scalar>(logits: &TensorF<F>, labels: &[usize]) -> usize {
    let s = logits.shape();
    let mut correct = 0;
    for (n, &label) in labels.iter().enumerate() {
        let row = &logits.data()[n * s.c..(n + 1) * s.c];
        let mut arg = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[arg] {
                arg = j;
            }
        }
        if arg == label {
            correct += 1;
        }
    }
    correct
}

fn evaluate_network(
    net: &mut Network<f32>,
    data: &DatasetHandle,
    cfg: &TrainConfig,
) -> Result<f64> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(cfg.batch_size.max(1)) {
        let (x_raw, labels) = data.batch(chunk)?;
        let x = adapt_input(&x_raw, cfg.input_adapter, &net.arch.clone())?;
        let logits = net.forward_logits(&x, BnMode::Eval)?;
        correct += count_correct(&logits, &labels);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Top-1 accuracy of a checkpoint restored into the architecture.
pub fn evaluate(
    ckpt: &Checkpoint,
    arch: &ArchSpec,
    data: &DatasetHandle,
    adapter: InputAdapter,
) -> Result<f64> {
    let mut net: Network<f32> = Network::init(arch, 0)?;
    apply_checkpoint(&mut net, ckpt)?;
    let cfg = TrainConfig {
        input_adapter: adapter,
        batch_size: 64,
        ..Default::default()
    };
    evaluate_network(&mut net, data, &cfg)
}

/// Snapshot of every parameter (running statistics included), rank-4 dims,
/// in the store's creation order.
pub fn checkpoint_from_network(net: &Network<f32>) -> Checkpoint {
    let mut ckpt = Checkpoint::default();
    for entry in net.params.iter() {
        let s = entry.tensor.shape();
        ckpt.push(
            entry.name.clone(),
            vec![s.n as u32, s.c as u32, s.h as u32, s.w as u32],
            entry.tensor.data().to_vec(),
        )
        .expect("unique parameter names");
    }
    ckpt
}

/// Strict restore: every parameter must be present with matching shape, and
/// the checkpoint must not carry extras.
pub fn apply_checkpoint(net: &mut Network<f32>, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.entries.len() != net.params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} entries, network has {} parameters",
            ckpt.entries.len(),
            net.params.len()
        )));
    }
    for e in &ckpt.entries {
        let entry = net
            .params
            .by_name_mut(&e.name)
            .ok_or_else(|| Error::Format(format!("checkpoint entry {} unknown", e.name)))?;
        let s = entry.tensor.shape();
        let dims = [s.n as u32, s.c as u32, s.h as u32, s.w as u32];
        if e.dims != dims {
            return Err(Error::Format(format!(
                "checkpoint entry {}: dims {:?} do not match parameter {:?}",
                e.name, e.dims, dims
            )));
        }
        entry.tensor = Tensor::from_vec(s, e.data.clone())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

/// Small isometric arch with a narrow head, sized so checking every
/// parameter stays fast.
pub fn grad_check_arch(blocks: usize, channels: usize, res: usize, classes: usize) -> ArchSpec {
    let mut layers = vec![LayerSpec::new(
        "stem",
        LayerKind::Conv1x1 {
            out_ch: channels,
            bias: false,
            norm_act: true,
        },
    )];
    for i in 1..=blocks {
        layers.push(LayerSpec::new(
            format!("block{i}"),
            LayerKind::Mv3SeBlock {
                bottleneck: channels,
                expansion: 6 * channels,
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
            out_ch: channels * 2,
            bias: false,
            norm_act: true,
        },
    ));
    layers.push(LayerSpec::new("pool", LayerKind::AvgPool));
    layers.push(LayerSpec::new("fc1", LayerKind::Fc { out: channels }));
    layers.push(LayerSpec::new("fc2", LayerKind::Fc { out: classes }));
    ArchSpec {
        input_res: res,
        internal_res: res,
        width_mult: channels as f64 / 64.0,
        depth: blocks,
        num_classes: classes,
        input_channels: 3,
        layers,
    }
}

/// Compares analytic gradients of the batch loss against 64-bit central
/// differences (h = 1e-3) for every trainable parameter; returns the
/// maximum relative error.
///
/// The piecewise-linear activations have kinks at their breakpoints; a
/// difference step that straddles one produces an O(h) artifact that says
/// nothing about the analytic gradient. Elements where the h and h/2
/// estimates disagree are crossing a kink and are excluded.
pub fn grad_check(arch: &ArchSpec, seed: u64) -> Result<f64> {
    const H: f64 = 1e-3;
    let net32: Network<f32> = Network::init(arch, seed)?;
    let base: Network<f64> = net32.cast();

    let mut rng = Rng::new(seed).split(STREAM_GRADCHECK);
    let in_shape = Shape4::new(2, arch.input_channels, arch.input_res, arch.input_res)?;
    let x = TensorF::<f64>::rand_normal(in_shape, &mut rng, 1.0);
    let labels: Vec<usize> = (0..2)
        .map(|_| rng.next_below(arch.num_classes as u64) as usize)
        .collect();
    let smoothing = 0.1;

    let mut net = base.cast::<f64>();
    let fwd = net.forward(&x, &ForwardOptions::train())?;
    let (_, saved) = softmax_cross_entropy(&fwd.output, &labels, smoothing)?;
    let g_logits = softmax_cross_entropy_backward(&saved, &labels, smoothing);
    let grads = net.backward(fwd.tape.as_ref().unwrap(), g_logits)?;

    // Loss as a function of one perturbed parameter. The parameter is
    // restored after each evaluation; train-mode BN statistics drift is
    // irrelevant because train mode normalizes with batch statistics.
    let fd_opts = ForwardOptions {
        mode: BnMode::Train,
        ..Default::default()
    };
    let mut loss_with = |param: usize, elem: usize, delta: f64| -> Result<f64> {
        let old = net.params.get(param).data()[elem];
        net.params.get_mut(param).data_mut()[elem] = old + delta;
        let out = net.forward(&x, &fd_opts)?.output;
        net.params.get_mut(param).data_mut()[elem] = old;
        Ok(softmax_cross_entropy(&out, &labels, smoothing)?.0)
    };

    let mut max_rel = 0.0f64;
    for i in 0..base.params.len() {
        if !base.params.entry(i).trainable {
            continue;
        }
        let analytic = grads
            .get(i)
            .ok_or_else(|| Error::arch(format!("no grad for {}", base.params.entry(i).name)))?
            .clone();
        for e in 0..analytic.data().len() {
            let fd_full = (loss_with(i, e, H)? - loss_with(i, e, -H)?) / (2.0 * H);
            let fd_half = (loss_with(i, e, H / 2.0)? - loss_with(i, e, -H / 2.0)?) / H;
            // Richardson extrapolation cancels the O(h^2) truncation term.
            let numeric = (4.0 * fd_half - fd_full) / 3.0;
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            // An unconverged difference quotient is straddling a breakpoint
            // kink and cannot adjudicate the analytic value.
            if (fd_full - fd_half).abs() > 1e-5 * denom {
                continue;
            }
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

// ---------------------------------------------------------------------------
// First-layer filter dump
// ---------------------------------------------------------------------------

/// Writes the first trainable layer's filters as per-filter min-max
/// normalized P6 PPM images. With a space-to-depth adapter the 1x1 weights
/// fold back to k x k spatial filters; otherwise they are 1x1 images.
/// Returns the written paths; an optional montage grid goes last.
pub fn dump_first_layer_filters(
    ckpt: &Checkpoint,
    arch: &ArchSpec,
    dir: &Path,
    montage: bool,
) -> Result<Vec<PathBuf>> {
    let (conv_id, s2d_block) = first_conv_and_block(arch)?;
    let entry = ckpt
        .entry(&format!("{conv_id}.w"))
        .ok_or_else(|| Error::Format(format!("checkpoint is missing {conv_id}.w")))?;
    if entry.dims.len() != 4 {
        return Err(Error::Format("stem weights must be rank 4".to_string()));
    }
    let (out_ch, in_ch) = (entry.dims[0] as usize, entry.dims[1] as usize);
    let weights = Tensor::from_vec(
        Shape4::new(out_ch, in_ch, entry.dims[2] as usize, entry.dims[3] as usize)?,
        entry.data.clone(),
    )?;
    let folded = match s2d_block {
        Some(k) => fold_s2d_conv(k, &weights)?,
        None => weights,
    };
    let fs = folded.shape();
    if fs.c != 3 && fs.c != 1 {
        return Err(Error::Config(format!(
            "filters have {} channels; only 1- or 3-channel inputs render as images",
            fs.c
        )));
    }
    std::fs::create_dir_all(dir)?;
    let k = fs.h;
    let mut paths = Vec::new();
    let mut tiles: Vec<Vec<u8>> = Vec::new();
    for o in 0..fs.n {
        let mut lo = f32::MAX;
        let mut hi = f32::MIN;
        for c in 0..fs.c {
            for y in 0..k {
                for x in 0..k {
                    let v = folded.at(o, c, y, x);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        let span = hi - lo;
        let mut rgb = Vec::with_capacity(k * k * 3);
        for y in 0..k {
            for x in 0..k {
                for c in 0..3 {
                    let v = folded.at(o, c.min(fs.c - 1), y, x);
                    // Constant filters map to mid-gray.
                    let norm = if span == 0.0 { 0.5 } else { (v - lo) / span };
                    rgb.push((norm * 255.0).round() as u8);
                }
            }
        }
        let path = dir.join(format!("filter_{o:03}.ppm"));
        crate::data::write_ppm(&path, k, k, &rgb)?;
        paths.push(path);
        if montage {
            tiles.push(rgb);
        }
    }
    if montage {
        let cols = (fs.n as f64).sqrt().ceil() as usize;
        let rows = fs.n.div_ceil(cols);
        let cell = k + 1;
        let (mw, mh) = (cols * cell + 1, rows * cell + 1);
        let mut rgb = vec![0u8; mw * mh * 3];
        for (o, tile) in tiles.iter().enumerate() {
            let (ty, tx) = (o / cols, o % cols);
            for y in 0..k {
                for x in 0..k {
                    let src = (y * k + x) * 3;
                    let dst = ((ty * cell + 1 + y) * mw + tx * cell + 1 + x) * 3;
                    rgb[dst..dst + 3].copy_from_slice(&tile[src..src + 3]);
                }
            }
        }
        let path = dir.join("montage.ppm");
        crate::data::write_ppm(&path, mw, mh, &rgb)?;
        paths.push(path);
    }
    Ok(paths)
}

fn first_conv_and_block(arch: &ArchSpec) -> Result<(String, Option<usize>)> {
    let mut block = None;
    for layer in &arch.layers {
        match &layer.kind {
            LayerKind::S2d { block: k } => block = Some(*k),
            LayerKind::UpsampleInput { .. } => block = None,
            LayerKind::Conv1x1 { .. } => return Ok((layer.id.clone(), block)),
            _ => {
                return Err(Error::Config(
                    "first trainable layer is not a 1x1 convolution".to_string(),
                ))
            }
        }
    }
    Err(Error::Config("architecture has no convolution".to_string()))
}
