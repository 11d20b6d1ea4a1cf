//! Scratch probe: train the desk network on the synthetic dataset and print
//! per-epoch metrics. Used to sanity-check training behaviour end to end.

use fstcn::clip::{load_dataset, ClipSpec};
use fstcn::net::{Network, NetworkConfig, PathMode};
use fstcn::synth::{generate_dataset, SynthConfig};
use fstcn::trainer::{evaluate, train, TrainConfig};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig::default();
    generate_dataset(&synth, dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    println!("classes={:?} train={} test={}", ds.classes, ds.train.len(), ds.test.len());

    let spec = ClipSpec::default();
    let mut net = Network::new(NetworkConfig::desk(ds.classes.len()), 42).unwrap();
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(15);
    let cfg = TrainConfig { epochs, seed: 42, ..TrainConfig::default() };
    let report = train(&mut net, &ds.train, &ds.test, &spec, &cfg, |m| {
        println!(
            "epoch {:2}  lr {:.4}  loss {:.4}  acc {:.3}  ({:.1}s)",
            m.epoch, m.learning_rate, m.train_loss, m.test_accuracy, m.seconds
        );
    })
    .unwrap();
    println!("final accuracy: {:.3}", report.final_accuracy);
    let scl = evaluate(&net, &ds.test, &spec, PathMode::SclOnly).unwrap();
    let tcl = evaluate(&net, &ds.test, &spec, PathMode::TclOnly).unwrap();
    println!("ablations: scl-only {scl:.3}  tcl-only {tcl:.3}");
}
