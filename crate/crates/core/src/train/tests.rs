use rand::SeedableRng;

use super::*;
use crate::data::{build_dataset, Operation};
use crate::model::ModelConfig;

fn tiny_model() -> Transformer {
    Transformer::new(ModelConfig {
        p: 7,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        max_steps: 30,
        eval_interval: 10,
        snapshot_interval: 5,
        seed: 3,
        ..TrainConfig::fast()
    }
}

/// Scalar AdamW written independently of [`adamw_step`].
fn scalar_adamw(theta: f64, grads: &[f64], lr: f64, wd: f64, b1: f64, b2: f64, eps: f64) -> f64 {
    let (mut x, mut m, mut v) = (theta, 0.0f64, 0.0f64);
    for (k, g) in grads.iter().enumerate() {
        let t = (k + 1) as f64;
        x -= lr * wd * x;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powf(t));
        let vhat = v / (1.0 - b2.powf(t));
        x -= lr * mhat / (vhat.sqrt() + eps);
    }
    x
}

#[test]
fn adamw_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = TrainConfig {
        lr: 3e-3,
        weight_decay: 0.5,
        ..TrainConfig::fast()
    };
    let n = 6;
    let theta0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let mut theta = theta0.clone();
    let mut state = OptimizerState::new(n);
    for g in &grads {
        adamw_step(&mut state, &mut theta, g, &cfg).unwrap();
    }
    assert_eq!(state.step, 10);
    for i in 0..n {
        let gi: Vec<f64> = grads.iter().map(|g| g[i]).collect();
        let want = scalar_adamw(
            theta0[i],
            &gi,
            cfg.lr,
            cfg.weight_decay,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
        );
        assert!((theta[i] - want).abs() < 1e-12, "{} vs {want}", theta[i]);
    }
}

#[test]
fn zero_gradient_updates() {
    let mut theta = vec![1.0, -2.0, 0.5];
    let mut state = OptimizerState::new(3);
    let no_decay = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::fast()
    };
    adamw_step(&mut state, &mut theta, &[0.0; 3], &no_decay).unwrap();
    assert_eq!(theta, vec![1.0, -2.0, 0.5]);

    let cfg = TrainConfig::fast();
    let mut state = OptimizerState::new(3);
    let before = theta.clone();
    adamw_step(&mut state, &mut theta, &[0.0; 3], &cfg).unwrap();
    let k = 1.0 - cfg.lr * cfg.weight_decay;
    for (a, b) in theta.iter().zip(&before) {
        assert_eq!(*a, b * k);
    }
}

#[test]
fn non_finite_update_is_reported() {
    let mut theta = vec![1.0];
    let mut state = OptimizerState::new(1);
    let r = adamw_step(&mut state, &mut theta, &[f64::NAN], &TrainConfig::fast());
    assert!(matches!(r, Err(Error::NonFinite(_))));
}

#[test]
fn clipping_bounds_the_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for scale in [1e-3, 0.5, 3.0, 1e4] {
        let mut g: Vec<f64> = (0..100).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let before = g.clone();
        let pre = clip_global_norm(&mut g, 1.0);
        assert!(norm(&g) <= 1.0 + 1e-12);
        if pre <= 1.0 {
            assert_eq!(g, before);
        }
    }
}

#[test]
fn batches_come_from_the_train_split() {
    let ds = build_dataset(Operation::Add, 97, 0.5, 0).unwrap();
    let mut a = stream(9, Stream::Batches);
    let mut b = stream(9, Stream::Batches);
    let x = sample_batch(&ds.train, 512, &mut a);
    assert_eq!(x.len(), 512);
    assert_eq!(x, sample_batch(&ds.train, 512, &mut b));
    let train: std::collections::HashSet<_> = ds.train.iter().map(|e| (e.a, e.b)).collect();
    assert!(x.iter().all(|e| train.contains(&(e.a, e.b))));
}

#[test]
fn score_logits_examples() {
    let p = 97;
    let examples: Vec<Example> = (0..p).map(|i| Example { a: i, b: 0, label: i }).collect();
    let uniform = vec![0.0; p * p];
    let (loss, _) = score_logits(&uniform, p, &examples).unwrap();
    assert!((loss / p as f64 - (p as f64).ln()).abs() < 1e-12);

    let mut lookup = vec![0.0; p * p];
    for (i, e) in examples.iter().enumerate() {
        lookup[i * p + e.label] = 10.0;
    }
    assert_eq!(score_logits(&lookup, p, &examples).unwrap().1, p);
}

#[test]
fn random_labels_score_at_chance() {
    let ds = build_dataset(Operation::Add, 97, 0.5, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits: Vec<f64> = (0..ds.test.len() * 97).map(|_| rng.random_range(0.0..1.0)).collect();
    let (_, hits) = score_logits(&logits, 97, &ds.test).unwrap();
    let acc = hits as f64 / ds.test.len() as f64;
    assert!((acc - 1.0 / 97.0).abs() < 0.01, "{acc}");
}

#[test]
fn evaluate_matches_tape_loss() {
    let m = tiny_model();
    let theta = m.init(0);
    let ds = build_dataset(Operation::Mul, 7, 0.5, 0).unwrap();
    let (loss, acc) = evaluate(&m, &theta, &ds.test).unwrap();
    assert!((loss - m.loss(&theta, &ds.test).unwrap()).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn training_is_deterministic_and_logs() {
    let m = tiny_model();
    let ds = build_dataset(Operation::Add, 7, 0.5, 3).unwrap();
    let a = train(&m, &tiny_cfg(), &ds, &mut NoHook, None).unwrap();
    let b = train(&m, &tiny_cfg(), &ds, &mut NoHook, None).unwrap();
    assert_eq!(a.record, b.record);
    assert_eq!(a.theta.values(), b.theta.values());
    let steps: Vec<u64> = a.record.metrics.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 10, 20, 30]);
    assert_eq!(a.log.steps(), &[5, 10, 15, 20, 25, 30]);
    assert_eq!(a.record.status, RunStatus::Done);
    assert_eq!(a.record.stopped_step, 30);
}

struct Counter {
    grads: u64,
    updates: u64,
    observed: Vec<u64>,
}

impl Hook for Counter {
    fn modify_gradient(&mut self, _step: u64, _grad: &mut ParamVector) -> Result<()> {
        self.grads += 1;
        Ok(())
    }

    fn after_update(&mut self, ctx: &mut UpdateContext<'_>) -> Result<()> {
        assert!(ctx.update_norm > 0.0);
        assert!(norm(ctx.grad.values()) <= 1.0 + 1e-12);
        self.updates += 1;
        Ok(())
    }

    fn observe(&mut self, obs: &Observation<'_>) -> Result<()> {
        if obs.evaluated {
            self.observed.push(obs.step);
        }
        Ok(())
    }
}

#[test]
fn hooks_see_every_step() {
    let m = tiny_model();
    let ds = build_dataset(Operation::Add, 7, 0.5, 3).unwrap();
    let mut c = Counter {
        grads: 0,
        updates: 0,
        observed: Vec::new(),
    };
    let out = train(&m, &tiny_cfg(), &ds, &mut c, None).unwrap();
    assert_eq!((c.grads, c.updates), (30, 30));
    assert_eq!(c.observed, vec![0, 10, 20, 30]);
    let plain = train(&m, &tiny_cfg(), &ds, &mut NoHook, None).unwrap();
    assert_eq!(out.record, plain.record);
}

struct Zeroing;

impl Hook for Zeroing {
    fn modify_gradient(&mut self, _step: u64, grad: &mut ParamVector) -> Result<()> {
        grad.values_mut().iter_mut().for_each(|g| *g = 0.0);
        Ok(())
    }
}

#[test]
fn gradient_hook_controls_the_update() {
    let m = tiny_model();
    let ds = build_dataset(Operation::Add, 7, 0.5, 3).unwrap();
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..tiny_cfg()
    };
    let out = train(&m, &cfg, &ds, &mut Zeroing, None).unwrap();
    assert_eq!(out.theta.values(), m.init(cfg.seed).values());
}

#[test]
fn early_stop_after_patience() {
    let m = tiny_model();
    let ds = build_dataset(Operation::Add, 7, 0.5, 3).unwrap();
    let cfg = TrainConfig {
        stop_threshold: 0.0,
        grok_threshold: 0.0,
        max_steps: 1000,
        ..tiny_cfg()
    };
    let out = train(&m, &cfg, &ds, &mut NoHook, None).unwrap();
    assert!(out.record.early_stopped);
    assert_eq!(out.record.stopped_step, 20);
    assert_eq!(out.record.grok_step, Some(0));
}

#[test]
fn divergence_marks_failure() {
    let m = tiny_model();
    let ds = build_dataset(Operation::Add, 7, 0.5, 3).unwrap();
    let cfg = TrainConfig {
        lr: 1e300,
        weight_decay: 0.0,
        ..tiny_cfg()
    };
    let out = train(&m, &cfg, &ds, &mut NoHook, None).unwrap();
    assert_eq!(out.record.status, RunStatus::Failed);
    assert!(out.record.failure.is_some());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::fast().validate().is_ok());
    assert!(TrainConfig::slow().validate().is_ok());
    assert!(TrainConfig {
        lr: 0.0,
        ..TrainConfig::fast()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        beta2: 1.0,
        ..TrainConfig::fast()
    }
    .validate()
    .is_err());
    assert_eq!(TrainConfig::slow().regime.n_layers(), 3);
    assert_eq!("slow".parse::<Regime>().unwrap(), Regime::Slow);
}
