//! Trains a small model briefly, then reports PC1–PC3 of every attention
//! matrix trajectory together with the random-walk null z-score.
//!
//! cargo run --release --example trajectory_pca -- [steps]

use grokgeom::data::{build_dataset, Operation};
use grokgeom::model::{ModelConfig, Transformer};
use grokgeom::pca::{expanding_window_pc1, summarize};
use grokgeom::train::{train, NoHook, TrainConfig};

fn main() -> grokgeom::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let model = Transformer::new(ModelConfig {
        d_model: 64,
        d_ff: 128,
        ..ModelConfig::default()
    })?;
    let data = build_dataset(Operation::Add, 97, 0.5, 3)?;
    let cfg = TrainConfig {
        seed: 3,
        max_steps: steps,
        early_stop: false,
        ..TrainConfig::fast()
    };
    let out = train(&model, &cfg, &data, &mut NoHook, None)?;
    println!(
        "{} snapshots, test acc {:.3}",
        out.log.len(),
        out.record.metrics.last().map_or(0.0, |m| m.test_acc)
    );
    for row in summarize(&out.log, Some(200), 3)? {
        println!(
            "layer {} {}  PC1 {:5.1}%  PC2 {:4.1}%  PC3 {:4.1}%  z {:>6}",
            row.layer,
            row.matrix,
            row.pc_percent[0],
            row.pc_percent[1],
            row.pc_percent[2],
            row.z_score.map_or("-".into(), |z| format!("{z:.1}"))
        );
    }
    let key = out.log.keys()[0];
    let window = expanding_window_pc1(&out.log, key)?;
    let tail: Vec<String> = window
        .iter()
        .rev()
        .take(5)
        .map(|(s, p)| format!("{s}:{p:.1}"))
        .collect();
    println!("expanding-window PC1% of {:?} (latest first): {}", key, tail.join(" "));
    Ok(())
}
