use isonet::arch::build_isometric;
use isonet::data::{synth_shapes, Split};
use isonet::net::{ForwardOptions, Network};
use isonet::ops::BnMode;
use isonet::trainer::*;
use isonet::data::DatasetHandle;

fn acc(net: &mut Network<f32>, ds: &DatasetHandle, mode: BnMode) -> f64 {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(32) {
        let (x, labels) = ds.batch(chunk).unwrap();
        let opts = ForwardOptions { mode, ..Default::default() };
        let logits = net.forward(&x, &opts).unwrap().output;
        let s = logits.shape();
        for (n, &l) in labels.iter().enumerate() {
            let row = &logits.data()[n*s.c..(n+1)*s.c];
            let arg = row.iter().enumerate().max_by(|a,b| a.1.total_cmp(b.1)).unwrap().0;
            if arg == l { correct += 1; }
        }
    }
    correct as f64 / ds.len() as f64
}

fn main() {
    let classes = 4;
    let arch = build_isometric(14, 14, 0.25, 8, classes).unwrap();
    let train_ds = synth_shapes(100, 1024, classes, 14, Split::Train).unwrap();
    let eval_ds = synth_shapes(100, 256, classes, 14, Split::Eval).unwrap();
    let cfg = TrainConfig { seed: 1, epochs: 5, batch_size: 32, ..Default::default() };
    let (ckpt, log) = train(&arch, &cfg, &train_ds, &eval_ds).unwrap();
    println!("log last: {:?}", log.epochs.last().map(|e| (e.train_loss, e.train_acc, e.eval_acc)));
    let mut net: Network<f32> = Network::init(&arch, 1).unwrap();
    apply_checkpoint(&mut net, &ckpt).unwrap();
    println!("train split: eval-mode acc {:.4} | train-mode acc {:.4}",
        acc(&mut net, &train_ds, BnMode::Eval), acc(&mut net, &train_ds, BnMode::Train));
    println!("eval  split: eval-mode acc {:.4} | train-mode acc {:.4}",
        acc(&mut net, &eval_ds, BnMode::Eval), acc(&mut net, &eval_ds, BnMode::Train));
}
