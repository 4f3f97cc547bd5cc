use isonet::arch::build_isometric;
use isonet::data::{synth_shapes, Split};
use isonet::trainer::{train, TrainConfig};
use std::time::Instant;

fn run(label: &str, input_res: usize, internal: usize, data_res: usize, seed: u64) -> f64 {
    let classes = 8;
    let arch = build_isometric(input_res, internal, 0.25, 8, classes).unwrap();
    let train_ds = synth_shapes(100, 1024, classes, data_res, Split::Train).unwrap();
    let eval_ds = synth_shapes(100, 256, classes, data_res, Split::Eval).unwrap();
    let cfg = TrainConfig { seed, epochs: 5, batch_size: 16, ..Default::default() };
    let t = Instant::now();
    let (_, log) = train(&arch, &cfg, &train_ds, &eval_ds).unwrap();
    let best = log.epochs.iter().map(|e| e.eval_acc).fold(f64::MIN, f64::max);
    println!("{label} seed {seed}: best eval {best:.4} in {:.1}s; losses {:?}",
        t.elapsed().as_secs_f64(),
        log.epochs.iter().map(|e| (e.train_loss*100.0).round()/100.0).collect::<Vec<_>>());
    best
}

fn main() {
    let a = run("(a) d=14 in=56 s2d", 56, 14, 56, 1);
    let b = run("(b) d=14 in=14    ", 14, 14, 14, 1);
    let c = run("(c) d=7  in=14 s2d", 14, 7, 14, 1);
    println!("ordering: a={a:.4} >= b={b:.4} >= c-2pp={:.4}", c - 0.02);
}
