use isonet::arch::build_isometric;
use isonet::data::{synth_shapes, Split};
use isonet::trainer::{train, Optimizer, TrainConfig};
use std::time::Instant;

fn run(input_res: usize, internal: usize, data_res: usize, seed: u64, lr: f64) -> f64 {
    let classes = 8;
    let arch = build_isometric(input_res, internal, 0.25, 8, classes).unwrap();
    let train_ds = synth_shapes(100, 1024, classes, data_res, Split::Train).unwrap();
    let eval_ds = synth_shapes(100, 256, classes, data_res, Split::Eval).unwrap();
    let cfg = TrainConfig { seed, epochs: 5, batch_size: 16,
        optimizer: Optimizer::SgdMomentum { lr, momentum: 0.9, weight_decay: 1e-5 },
        ..Default::default() };
    let (_, log) = train(&arch, &cfg, &train_ds, &eval_ds).unwrap();
    log.epochs.iter().map(|e| e.eval_acc).fold(f64::MIN, f64::max)
}

fn main() {
    let lr = 0.1;
    let t = Instant::now();
    let a: Vec<f64> = (1..=3).map(|s| run(56, 14, 56, s, lr)).collect();
    let b: Vec<f64> = (1..=3).map(|s| run(14, 14, 14, s, lr)).collect();
    let c: Vec<f64> = (1..=3).map(|s| run(14, 7, 14, s, lr)).collect();
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    println!("a (d14,in56): {a:?} mean {:.4}", mean(&a));
    println!("b (d14,in14): {b:?} mean {:.4}", mean(&b));
    println!("c (d7, in14): {c:?} mean {:.4}", mean(&c));
    println!("a>=b: {} ; b>=c-2pp: {}", mean(&a) >= mean(&b), mean(&b) >= mean(&c) - 0.02);
    println!("total {:.0}s", t.elapsed().as_secs_f64());
}
