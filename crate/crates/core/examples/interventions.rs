//! Gradient-subspace suppression and commutator kicks as training hooks:
//! a baseline run, the same run with its gradient confined to a random
//! 16-dimensional subspace from step 100, and one with kicks.
//!
//! cargo run --release --example interventions -- [steps]

use grokgeom::data::{build_dataset, Operation};
use grokgeom::intervention::{FrozenBasis, InterventionConfig, InterventionMode, KickHook, SuppressionHook};
use grokgeom::model::{ModelConfig, Transformer};
use grokgeom::train::{train, Hook, NoHook, TrainConfig};

fn main() -> grokgeom::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let model = Transformer::new(ModelConfig::default())?;
    let data = build_dataset(Operation::Add, 97, 0.5, 5)?;
    let cfg = TrainConfig {
        seed: 5,
        max_steps: steps,
        early_stop: false,
        ..TrainConfig::fast()
    };
    let mut suppress = SuppressionHook {
        basis: FrozenBasis::random(model.n_params(), 16, 5),
        strength: 1.0,
        start_step: 100,
    };
    let kick_cfg = InterventionConfig {
        mode: InterventionMode::KickCommutator,
        kick_gain: 100.0,
        start_step: 100,
        ..InterventionConfig::default()
    };
    let mut kick = KickHook::new(kick_cfg, 5, cfg.batch_size);
    let hooks: [(&str, &mut dyn Hook); 3] = [
        ("baseline", &mut NoHook),
        ("suppressed", &mut suppress),
        ("kicked", &mut kick),
    ];
    for (name, hook) in hooks {
        let out = train(&model, &cfg, &data, hook, None)?;
        let last = out.record.metrics.last().expect("final eval");
        println!(
            "{name:<10} step {} train acc {:.3} test acc {:.3} train loss {:.3}",
            last.step, last.train_acc, last.test_acc, last.train_loss
        );
    }
    let applied = kick.events.iter().filter(|e| e.applied).count();
    println!(
        "{applied} kicks applied, lengths {:?}",
        kick.events.iter().take(3).map(|e| e.length).collect::<Vec<_>>()
    );
    Ok(())
}
