//! Builds the modular-arithmetic datasets and prints split sizes and a few
//! examples per operation.

use grokgeom::data::{build_dataset, Operation};

fn main() -> grokgeom::Result<()> {
    let p = 97;
    for op in Operation::ALL {
        let split = build_dataset(op, p, 0.5, 137)?;
        let head: Vec<String> = split
            .train
            .iter()
            .take(3)
            .map(|e| format!("({}, {}) -> {}", e.a, e.b, e.label))
            .collect();
        println!(
            "{:<9} train {:>4} test {:>4} groks_expected {:<5} {}",
            op.tag(),
            split.train.len(),
            split.test.len(),
            op.groks_expected(),
            head.join("  ")
        );
    }
    Ok(())
}
