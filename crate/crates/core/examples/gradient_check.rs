//! Compares reverse-mode gradients of the full transformer loss with
//! fourth-order central differences on randomly chosen coordinates.

use grokgeom::data::{build_dataset, Operation};
use grokgeom::model::{ModelConfig, Transformer};
use rand::{Rng, SeedableRng};

fn main() -> grokgeom::Result<()> {
    let model = Transformer::new(ModelConfig::default())?;
    let data = build_dataset(Operation::Add, 97, 0.5, 1)?;
    let batch = &data.train[..64];
    let theta = model.init(1);
    let (_, grad) = model.loss_and_grad(&theta, batch)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let h = 1e-3;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let i = rng.random_range(0..theta.len());
        let at = |d: f64| {
            let mut t = theta.clone();
            t.values_mut()[i] += d;
            model.loss(&t, batch)
        };
        let fd = (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h);
        let an = grad.values()[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
        println!("coord {i:>6}  analytic {an:+.6e}  numeric {fd:+.6e}  rel {rel:.1e}");
    }
    println!("max relative error {worst:.2e} over {} parameters", theta.len());
    Ok(())
}
