use isonet::arch::build_isometric;
use isonet::data::{synth_shapes, Split};
use isonet::trainer::{train, Optimizer, TrainConfig};

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
    for lr in [0.1, 0.15, 0.2] {
        let b: Vec<f64> = (1..=2).map(|s| run(14, 14, 14, s, lr)).collect();
        println!("lr={lr} b d14-in14: {b:?}");
    }
}
