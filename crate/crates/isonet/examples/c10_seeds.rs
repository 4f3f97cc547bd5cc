use isonet::arch::build_isometric;
use isonet::data::{synth_shapes, Split};
use isonet::trainer::{train, TrainConfig};

fn run(input_res: usize, internal: usize, data_res: usize, seed: u64) -> f64 {
    let classes = 8;
    let arch = build_isometric(input_res, internal, 0.25, 8, classes).unwrap();
    let train_ds = synth_shapes(100, 1024, classes, data_res, Split::Train).unwrap();
    let eval_ds = synth_shapes(100, 256, classes, data_res, Split::Eval).unwrap();
    let cfg = TrainConfig { seed, epochs: 5, batch_size: 16, ..Default::default() };
    let (_, log) = train(&arch, &cfg, &train_ds, &eval_ds).unwrap();
    log.epochs.iter().map(|e| e.eval_acc).fold(f64::MIN, f64::max)
}

fn main() {
    for (label, ir, d, dr) in [("b d14-in14", 14usize, 14usize, 14usize), ("c d7-in14 ", 14, 7, 14)] {
        let accs: Vec<f64> = (1..=3).map(|s| run(ir, d, dr, s)).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("{label}: {accs:?} mean {mean:.4}");
    }
}
