#![allow(dead_code)]

use grokgeom::data::Example;
use grokgeom::model::Transformer;
use grokgeom::tensor::ParamVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst relative error between reverse-mode gradients and fourth-order
/// central differences over `n` uniformly drawn coordinates. Relative
/// errors use max(|numeric|, |analytic|, 1e-6) as the denominator.
pub fn max_fd_error(model: &Transformer, theta: &ParamVector, batch: &[Example], n: usize, seed: u64) -> f64 {
    let (_, grad) = model.loss_and_grad(theta, batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-3;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let i = rng.random_range(0..theta.len());
        let at = |d: f64| {
            let mut t = theta.clone();
            t.values_mut()[i] += d;
            model.loss(&t, batch).unwrap()
        };
        let fd = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
        let an = grad.values()[i];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    worst
}

pub const TINY_TOML: &str = r#"
op = "add"
null_trials = 100
[model]
p = 11
d_model = 8
n_heads = 2
d_ff = 16
n_layers = 1
[train]
seed = 3
max_steps = 40
batch_size = 16
eval_interval = 10
snapshot_interval = 10
probe_interval = 10
[probe]
n_samples = 3
n_align = 2
n_rand = 2
"#;
