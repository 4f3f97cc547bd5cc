//! `isonet`: build, transform, analyze, train, and verify isometric
//! convolutional networks from the command line.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

use isonet::analyzer::{analyze, report_to_csv, report_to_table, scaling_check};
use isonet::arch::{
    apply_multiplier, build_dense_stack, build_isometric, build_stride_pyramid,
    eq1_correspondence, validate, ArchSpec, LayerKind, MultiplierTransform,
};
use isonet::data::{
    load_cifar_binary, load_idx, read_checkpoint, synth_shapes, write_atomic, write_checkpoint,
    DatasetHandle, InputAdapter, Split,
};
use isonet::equivalence::{
    build_parallel_pipeline, check_dilation_batch_equiv, check_s2d_fold, pipeline_covers_pixels,
    PipelineOrder, S2D_FOLD_TOLERANCE,
};
use isonet::ops::UpsampleMode;
use isonet::tensor::{Rng, Shape4, Tensor};
use isonet::trainer::{
    dump_first_layer_filters, evaluate, grad_check, grad_check_arch, train, LrSchedule, Optimizer,
    TrainConfig,
};

#[derive(Parser)]
#[command(name = "isonet", version, about = "Isometric network toolkit")]
struct Cli {
    /// Seed for all randomness in the invoked command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Suppress informational output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Construct an architecture description and write it as JSON.
    BuildArch(BuildArchArgs),
    /// Static analysis: shapes, params, MAdds, activations, receptive fields.
    Analyze(AnalyzeArgs),
    /// Apply a width / resolution / depth / dilation transform.
    Transform(TransformArgs),
    /// Report the resolution-vs-width block correspondence of a pyramid.
    CompareShapes(CompareShapesArgs),
    /// Train on a dataset and write the best checkpoint plus a CSV log.
    Train(TrainArgs),
    /// Evaluate a checkpoint: top-1 accuracy on an eval split.
    Eval(EvalArgs),
    /// Check analytic gradients against 64-bit central differences.
    Gradcheck(GradcheckArgs),
    /// Run an operator equivalence check.
    EquivCheck(EquivCheckArgs),
    /// Analyze (optionally train) a grid of multipliers and resolutions.
    Sweep(SweepArgs),
    /// Write first-layer filters as PPM images.
    DumpFilters(DumpFiltersArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Isometric,
    Dense1x1,
    Pyramid,
}

#[derive(Args)]
struct BuildArchArgs {
    #[arg(long, value_enum, default_value_t = Preset::Isometric)]
    preset: Preset,
    /// Input image resolution r.
    #[arg(long, default_value_t = 224)]
    input: usize,
    /// Internal resolution d.
    #[arg(long, default_value_t = 14)]
    res: usize,
    /// Width multiplier m.
    #[arg(long, default_value_t = 1.0)]
    mult: f64,
    /// Block count l (dense1x1: stack depth; pyramid: comma list of block sizes).
    #[arg(long, default_value = "16")]
    layers: String,
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    /// Channel width for the dense1x1 / pyramid presets.
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    arch: PathBuf,
    /// Also write the per-layer report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TransformArgs {
    #[arg(long)]
    arch: PathBuf,
    #[arg(long)]
    width_mult: Option<f64>,
    #[arg(long)]
    res_mult: Option<f64>,
    #[arg(long)]
    depth_mult: Option<f64>,
    #[arg(long)]
    dilate: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Print the measured scaling ratios against the base arch.
    #[arg(long)]
    ratios: bool,
}

#[derive(Args)]
struct CompareShapesArgs {
    #[arg(long)]
    arch: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
}

#[derive(Args, Clone)]
struct DatasetArgs {
    /// synth | idx | cifar
    #[arg(long, default_value = "synth")]
    dataset: String,
    /// synth: class count.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// synth: training samples.
    #[arg(long, default_value_t = 1024)]
    samples: usize,
    /// synth: eval samples.
    #[arg(long, default_value_t = 256)]
    eval_samples: usize,
    /// synth: rendered resolution.
    #[arg(long, default_value_t = 56)]
    data_res: usize,
    /// idx: image/label file pairs.
    #[arg(long)]
    train_images: Option<PathBuf>,
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long)]
    eval_images: Option<PathBuf>,
    #[arg(long)]
    eval_labels: Option<PathBuf>,
    /// cifar: batch file or directory per split.
    #[arg(long)]
    train_path: Option<PathBuf>,
    #[arg(long)]
    eval_path: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    arch: PathBuf,
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// sgd | rmsprop
    #[arg(long, default_value = "sgd")]
    optimizer: String,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    /// constant | cosine
    #[arg(long, default_value = "cosine")]
    schedule: String,
    #[arg(long, default_value_t = 0.1)]
    label_smoothing: f64,
    /// Comma-separated layer ids to freeze.
    #[arg(long, default_value = "")]
    freeze: String,
    /// native | skip-stride | s2d:K | upsample:MODE:F
    #[arg(long, default_value = "native")]
    adapter: String,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV path.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    arch: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long, default_value = "native")]
    adapter: String,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 6)]
    res: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
}

#[derive(Args)]
struct EquivCheckArgs {
    /// s2d-fold | dilation-batch | parallel-cover
    #[arg(long)]
    mode: String,
    /// Block size for s2d-fold / parallel-cover.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Dilation rate / replicas per side.
    #[arg(long, default_value_t = 2)]
    rate: usize,
    /// Random cases for s2d-fold.
    #[arg(long, default_value_t = 5)]
    cases: usize,
    /// Write per-element absolute differences as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated width multipliers.
    #[arg(long, default_value = "0.5,1,2")]
    mults: String,
    /// Comma-separated internal resolutions.
    #[arg(long, default_value = "7,14,28")]
    resolutions: String,
    #[arg(long, default_value_t = 224)]
    input: usize,
    #[arg(long, default_value_t = 16)]
    layers: usize,
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also run a desk-scale training per grid point (synthetic data).
    #[arg(long)]
    train: bool,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, default_value_t = 128)]
    eval_samples: usize,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Args)]
struct DumpFiltersArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    arch: PathBuf,
    /// Output directory for the PPM files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    montage: bool,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let quiet = cli.quiet;
    let seed = cli.seed;
    match cli.command {
        Command::BuildArch(args) => cmd_build_arch(args, quiet),
        Command::Analyze(args) => cmd_analyze(args, quiet),
        Command::Transform(args) => cmd_transform(args, quiet),
        Command::CompareShapes(args) => cmd_compare_shapes(args),
        Command::Train(args) => cmd_train(args, seed, quiet),
        Command::Eval(args) => cmd_eval(args, seed),
        Command::Gradcheck(args) => cmd_gradcheck(args, seed),
        Command::EquivCheck(args) => cmd_equiv_check(args, seed, quiet),
        Command::Sweep(args) => cmd_sweep(args, seed, quiet),
        Command::DumpFilters(args) => cmd_dump_filters(args, quiet),
    }
}

fn load_arch(path: &Path) -> Result<ArchSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading arch {}", path.display()))?;
    let arch = ArchSpec::from_json(&text)?;
    let violations = validate(&arch);
    if !violations.is_empty() {
        bail!(
            "arch {} is invalid:\n  {}",
            path.display(),
            violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("\n  ")
        );
    }
    Ok(arch)
}

fn cmd_build_arch(args: BuildArchArgs, quiet: bool) -> Result<()> {
    let arch = match args.preset {
        Preset::Isometric => {
            let layers: usize = args.layers.parse().context("--layers")?;
            build_isometric(args.input, args.res, args.mult, layers, args.classes)?
        }
        Preset::Dense1x1 => {
            let layers: usize = args.layers.parse().context("--layers")?;
            build_dense_stack(args.channels, layers, args.res)?
        }
        Preset::Pyramid => {
            let blocks = parse_list::<usize>(&args.layers)?;
            build_stride_pyramid(&blocks, args.input, args.channels, args.classes)?
        }
    };
    write_atomic(&args.out, arch.to_json().as_bytes())?;
    if !quiet {
        println!(
            "wrote {} ({} layers, input {}x{}, internal {}x{})",
            args.out.display(),
            arch.layers.len(),
            arch.input_res,
            arch.input_res,
            arch.internal_res,
            arch.internal_res
        );
    }
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs, quiet: bool) -> Result<()> {
    let arch = load_arch(&args.arch)?;
    let report = analyze(&arch)?;
    if let Some(csv_path) = &args.csv {
        write_atomic(csv_path, report_to_csv(&report).as_bytes())?;
        if !quiet {
            println!("wrote {}", csv_path.display());
        }
    }
    print!("{}", report_to_table(&report));
    println!(
        "params = {:.2}M, madds = {:.2}M per inference",
        report.total_params as f64 / 1e6,
        report.total_madds as f64 / 1e6
    );
    Ok(())
}

fn cmd_transform(args: TransformArgs, quiet: bool) -> Result<()> {
    let arch = load_arch(&args.arch)?;
    let chosen: Vec<MultiplierTransform> = [
        args.width_mult.map(MultiplierTransform::Width),
        args.res_mult.map(MultiplierTransform::Resolution),
        args.depth_mult.map(MultiplierTransform::Depth),
        args.dilate.map(MultiplierTransform::Dilate),
    ]
    .into_iter()
    .flatten()
    .collect();
    if chosen.len() != 1 {
        bail!("pass exactly one of --width-mult, --res-mult, --depth-mult, --dilate");
    }
    let transformed = apply_multiplier(&arch, chosen[0])?;
    write_atomic(&args.out, transformed.to_json().as_bytes())?;
    if args.ratios {
        let ratios = scaling_check(&arch, chosen[0])?;
        println!(
            "ratios vs base: activation {:.4}, params {:.4}, madds {:.4}",
            ratios.activation, ratios.params, ratios.madds
        );
    }
    if !quiet {
        println!("wrote {}", args.out.display());
    }
    Ok(())
}

fn cmd_compare_shapes(args: CompareShapesArgs) -> Result<()> {
    let arch = load_arch(&args.arch)?;
    let report = eq1_correspondence(&arch, args.alpha)?;
    if report.degenerate {
        println!("correspondence degenerates: no downsampling blocks, the shared span is empty");
        return Ok(());
    }
    println!("resolution-scaled blocks (res, ch, layers):");
    for (i, b) in report.resolution_blocks.iter().enumerate() {
        println!("  block {}: ({}, {}, {})", i + 1, b.resolution, b.channels, b.layers);
    }
    println!("width-scaled blocks (res, ch, layers):");
    for (i, b) in report.width_blocks.iter().enumerate() {
        println!("  block {}: ({}, {}, {})", i + 1, b.resolution, b.channels, b.layers);
    }
    for (p, q) in &report.aligned {
        let a = report.resolution_blocks[*p];
        println!(
            "  aligned: res-scaled block {} == width-scaled block {} at ({}, {})",
            p + 1,
            q + 1,
            a.resolution,
            a.channels
        );
    }
    println!(
        "aligned {} of {} blocks; boundary blocks unmatched: width-scaled first {:?}, \
         resolution-scaled last {:?}",
        report.aligned.len(),
        report.resolution_blocks.len(),
        report
            .unmatched_width_first
            .map(|b| (b.resolution, b.channels)),
        report
            .unmatched_resolution_last
            .map(|b| (b.resolution, b.channels)),
    );
    if !report.all_aligned_match {
        bail!("interior blocks failed to align");
    }
    Ok(())
}

fn parse_adapter(text: &str) -> Result<InputAdapter> {
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        ["native"] => Ok(InputAdapter::Native),
        ["skip-stride"] => Ok(InputAdapter::SkipStride),
        ["s2d", k] => Ok(InputAdapter::S2d {
            block: k.parse().context("s2d block")?,
        }),
        ["upsample", mode, f] => {
            let mode = match *mode {
                "bilinear" => UpsampleMode::Bilinear,
                "nearest" => UpsampleMode::Nearest,
                "zero_fill" => UpsampleMode::ZeroFill,
                other => bail!("unknown upsample mode {other}"),
            };
            Ok(InputAdapter::Upsample {
                mode,
                factor: f.parse().context("upsample factor")?,
            })
        }
        _ => bail!("unknown adapter {text} (native | skip-stride | s2d:K | upsample:MODE:F)"),
    }
}

fn load_datasets(args: &DatasetArgs, seed: u64) -> Result<(DatasetHandle, DatasetHandle)> {
    match args.dataset.as_str() {
        "synth" => Ok((
            synth_shapes(seed, args.samples, args.classes, args.data_res, Split::Train)?,
            synth_shapes(seed, args.eval_samples, args.classes, args.data_res, Split::Eval)?,
        )),
        "idx" => {
            let (ti, tl, ei, el) = (
                args.train_images
                    .as_ref()
                    .ok_or_else(|| anyhow!("--train-images required"))?,
                args.train_labels
                    .as_ref()
                    .ok_or_else(|| anyhow!("--train-labels required"))?,
                args.eval_images
                    .as_ref()
                    .ok_or_else(|| anyhow!("--eval-images required"))?,
                args.eval_labels
                    .as_ref()
                    .ok_or_else(|| anyhow!("--eval-labels required"))?,
            );
            Ok((load_idx(ti, tl, Split::Train)?, load_idx(ei, el, Split::Eval)?))
        }
        "cifar" => {
            let (tp, ep) = (
                args.train_path
                    .as_ref()
                    .ok_or_else(|| anyhow!("--train-path required"))?,
                args.eval_path
                    .as_ref()
                    .ok_or_else(|| anyhow!("--eval-path required"))?,
            );
            Ok((
                load_cifar_binary(tp, Split::Train)?,
                load_cifar_binary(ep, Split::Eval)?,
            ))
        }
        other => bail!("unknown dataset {other} (synth | idx | cifar)"),
    }
}

fn cmd_train(args: TrainArgs, seed: u64, quiet: bool) -> Result<()> {
    let arch = load_arch(&args.arch)?;
    let (train_ds, eval_ds) = load_datasets(&args.data, seed)?;
    let optimizer = match args.optimizer.as_str() {
        "sgd" => Optimizer::SgdMomentum {
            lr: args.lr,
            momentum: args.momentum,
            weight_decay: args.weight_decay,
        },
        "rmsprop" => Optimizer::RmsProp {
            lr: args.lr,
            decay: 0.9,
            momentum: args.momentum,
            eps: 1e-7,
        },
        other => bail!("unknown optimizer {other}"),
    };
    let cfg = TrainConfig {
        seed,
        epochs: args.epochs,
        batch_size: args.batch,
        optimizer,
        lr_schedule: match args.schedule.as_str() {
            "constant" => LrSchedule::Constant,
            "cosine" => LrSchedule::Cosine,
            other => bail!("unknown schedule {other}"),
        },
        freeze: args
            .freeze
            .split(',')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect(),
        input_adapter: parse_adapter(&args.adapter)?,
        label_smoothing: args.label_smoothing,
        divergence_dump: Some(args.out.clone()),
    };
    let (ckpt, log) = train(&arch, &cfg, &train_ds, &eval_ds)?;
    write_checkpoint(&args.out, &ckpt)?;
    if let Some(log_path) = &args.log {
        write_atomic(log_path, log.to_csv().as_bytes())?;
    }
    if !quiet {
        for e in &log.epochs {
            println!(
                "epoch {}: train_loss {:.4} train_acc {:.4} eval_acc {:.4} lr {:.5} ({:.1}s)",
                e.epoch, e.train_loss, e.train_acc, e.eval_acc, e.lr, e.wall_seconds
            );
        }
        let best = log.epochs.iter().map(|e| e.eval_acc).fold(f64::MIN, f64::max);
        println!("best eval accuracy {best:.4}; wrote {}", args.out.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs, seed: u64) -> Result<()> {
    let arch = load_arch(&args.arch)?;
    let (_, eval_ds) = load_datasets(&args.data, seed)?;
    let ckpt = read_checkpoint(&args.ckpt)?;
    let acc = evaluate(&ckpt, &arch, &eval_ds, parse_adapter(&args.adapter)?)?;
    println!("top1 {acc:.4}");
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs, seed: u64) -> Result<()> {
    let arch = grad_check_arch(args.blocks, args.channels, args.res, args.classes);
    let err = grad_check(&arch, seed)?;
    let pass = err < 1e-4;
    println!(
        "{} max_rel_err={err:.3e} (tol 1e-4, {} blocks, {} channels, res {})",
        if pass { "PASS" } else { "FAIL" },
        args.blocks,
        args.channels,
        args.res
    );
    if !pass {
        bail!("gradient check failed");
    }
    Ok(())
}

fn cmd_equiv_check(args: EquivCheckArgs, seed: u64, quiet: bool) -> Result<()> {
    match args.mode.as_str() {
        "s2d-fold" => {
            let mut worst: Option<isonet::equivalence::EquivReport> = None;
            let mut rng = Rng::new(seed);
            for case in 0..args.cases.max(1) {
                let c = 1 + (rng.next_below(3)) as usize;
                let m = 4 + rng.next_below(5) as usize;
                let hw = args.k * m;
                let out_ch = 4 + rng.next_below(8) as usize;
                let shape = Shape4::new(2, c, hw, hw).map_err(|e| anyhow!("{e}"))?;
                let report = check_s2d_fold(shape, out_ch, args.k, seed.wrapping_add(case as u64))?;
                if !quiet {
                    println!("case {case}: {}", report.summary());
                }
                let replace = worst
                    .as_ref()
                    .map(|w| report.max_abs_diff > w.max_abs_diff)
                    .unwrap_or(true);
                if replace {
                    worst = Some(report);
                }
            }
            let worst = worst.expect("at least one case");
            maybe_write_diff_csv(args.csv.as_deref(), &worst)?;
            println!(
                "{} max_abs_diff={:.3e}<={:.0e} over {} cases (k={})",
                if worst.passed { "PASS" } else { "FAIL" },
                worst.max_abs_diff,
                S2D_FOLD_TOLERANCE,
                args.cases,
                args.k
            );
            if !worst.passed {
                bail!("s2d-fold equivalence failed");
            }
        }
        "dilation-batch" => {
            let mut arch = build_isometric(12, 12, 0.25, 4, 5)?;
            for layer in &mut arch.layers {
                if let LayerKind::Mv3SeBlock { se_enabled, .. } = &mut layer.kind {
                    *se_enabled = false;
                }
            }
            let mut rng = Rng::new(seed).split(7);
            let x = Tensor::rand_normal(
                Shape4::new(2, 3, 12, 12).map_err(|e| anyhow!("{e}"))?,
                &mut rng,
                1.0,
            );
            let report = check_dilation_batch_equiv(&arch, seed, args.rate, &x)?;
            maybe_write_diff_csv(args.csv.as_deref(), &report)?;
            println!("{}", report.summary());
            if !report.passed {
                bail!("dilation-batch equivalence failed");
            }
        }
        "parallel-cover" => {
            for order in [PipelineOrder::S2bThenS2d, PipelineOrder::S2dThenS2b] {
                let pipeline = build_parallel_pipeline(order, args.rate, args.k)?;
                let side = args.rate * args.k * 2;
                let ok = pipeline_covers_pixels(&pipeline, side, side)?;
                println!(
                    "{} {:?}: every pixel in exactly one replica ({}x{} input, {} replicas)",
                    if ok { "PASS" } else { "FAIL" },
                    order,
                    side,
                    side,
                    pipeline.replica_count()
                );
                if !ok {
                    bail!("pixel coverage failed for {order:?}");
                }
            }
        }
        other => bail!("unknown mode {other} (s2d-fold | dilation-batch | parallel-cover)"),
    }
    Ok(())
}

fn maybe_write_diff_csv(
    path: Option<&Path>,
    report: &isonet::equivalence::EquivReport,
) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let mut out = String::from("index,abs_diff\n");
    for (i, d) in report.diffs.iter().enumerate() {
        out.push_str(&format!("{i},{d}\n"));
    }
    write_atomic(path, out.as_bytes())?;
    Ok(())
}

fn cmd_sweep(args: SweepArgs, seed: u64, quiet: bool) -> Result<()> {
    let mults = parse_list::<f64>(&args.mults)?;
    let resolutions = parse_list::<usize>(&args.resolutions)?;
    let mut out = String::new();
    out.push_str(if args.train {
        "mult,res,params,madds,peak_activation_elems,eval_acc\n"
    } else {
        "mult,res,params,madds,peak_activation_elems\n"
    });
    let mut wrote = 0usize;
    // Mult-major row order.
    for &mult in &mults {
        for &res in &resolutions {
            match sweep_point(&args, seed, mult, res) {
                Ok(row) => {
                    out.push_str(&row.join(","));
                    out.push('\n');
                    wrote += 1;
                }
                Err(e) => {
                    eprintln!("skipping grid point (mult {mult}, res {res}): {e:#}");
                }
            }
        }
    }
    if wrote == 0 {
        bail!("every grid point failed");
    }
    write_atomic(&args.out, out.as_bytes())?;
    if !quiet {
        println!("wrote {} ({} rows)", args.out.display(), wrote);
    }
    Ok(())
}

fn sweep_point(args: &SweepArgs, seed: u64, mult: f64, res: usize) -> Result<Vec<String>> {
    let arch = build_isometric(args.input, res, mult, args.layers, args.classes)?;
    let report = analyze(&arch)?;
    let mut row = vec![
        format!("{mult}"),
        res.to_string(),
        report.total_params.to_string(),
        report.total_madds.to_string(),
        report.peak_activation_elems.to_string(),
    ];
    if args.train {
        // Desk-scale directional run on synthetic shapes rendered at the
        // arch input resolution.
        let classes = args.classes.min(isonet::data::SYNTH_MAX_CLASSES);
        let arch = build_isometric(args.input, res, mult, args.layers, classes)?;
        let train_ds = synth_shapes(seed, args.samples, classes, args.input, Split::Train)?;
        let eval_ds = synth_shapes(seed, args.eval_samples, classes, args.input, Split::Eval)?;
        let cfg = TrainConfig {
            seed,
            epochs: args.epochs,
            batch_size: args.batch,
            ..Default::default()
        };
        let (_, log) = train(&arch, &cfg, &train_ds, &eval_ds)?;
        let best = log.epochs.iter().map(|e| e.eval_acc).fold(f64::MIN, f64::max);
        row.push(format!("{best}"));
    }
    Ok(row)
}

fn cmd_dump_filters(args: DumpFiltersArgs, quiet: bool) -> Result<()> {
    let arch = load_arch(&args.arch)?;
    let ckpt = read_checkpoint(&args.ckpt)?;
    let paths = dump_first_layer_filters(&ckpt, &arch, &args.out, args.montage)?;
    if !quiet {
        println!("wrote {} files under {}", paths.len(), args.out.display());
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| anyhow!("bad list element {s}: {e}"))
        })
        .collect()
}
