//! Trains the fast-regime transformer on one operation and prints the
//! accuracy curve, memorization step and grok step.
//!
//! cargo run --release --example train_run -- [op] [seed] [max_steps]

use grokgeom::data::{build_dataset, Operation};
use grokgeom::model::{ModelConfig, Transformer};
use grokgeom::train::{train, MetricRow, NoHook, TrainConfig};

fn main() -> grokgeom::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let op: Operation = args.first().map_or(Ok(Operation::Add), |s| s.parse())?;
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(137);
    let max_steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3000);

    let model = Transformer::new(ModelConfig::default())?;
    let data = build_dataset(op, 97, 0.5, seed)?;
    let cfg = TrainConfig {
        seed,
        max_steps,
        ..TrainConfig::fast()
    };
    println!("{op} seed {seed}: {} parameters", model.n_params());
    let mut show = |r: &MetricRow| {
        if r.step.is_multiple_of(500) || r.test_acc > 0.5 {
            println!(
                "step {:>6}  train {:.4} ({:.3})  test {:.4} ({:.3})",
                r.step, r.train_acc, r.train_loss, r.test_acc, r.test_loss
            );
        }
    };
    let out = train(&model, &cfg, &data, &mut NoHook, Some(&mut show))?;
    let rec = out.record;
    println!(
        "memorization {:?}  grok {:?}  stopped {} ({:?})",
        rec.memorization_step, rec.grok_step, rec.stopped_step, rec.status
    );
    Ok(())
}
