//! AdamW training loop with clipping, evaluation, snapshot logging,
//! grok / early-stop detection and hook points for probes and
//! interventions.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Example};
use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::model::Transformer;
use crate::pca::TrajectoryLog;
use crate::rng::{stream, Stream};
use crate::tensor::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Fast,
    Slow,
}

impl Regime {
    pub fn n_layers(self) -> usize {
        match self {
            Regime::Fast => 2,
            Regime::Slow => 3,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Fast => "fast",
            Regime::Slow => "slow",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Regime::Fast),
            "slow" => Ok(Regime::Slow),
            _ => Err(Error::InvalidConfig(format!("unknown regime `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub max_steps: u64,
    pub eval_interval: u64,
    pub snapshot_interval: u64,
    pub probe_interval: u64,
    pub seed: u64,
    pub grok_threshold: f64,
    pub stop_threshold: f64,
    pub stop_patience: usize,
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::fast()
    }
}

impl TrainConfig {
    pub fn fast() -> Self {
        Self {
            regime: Regime::Fast,
            lr: 1e-3,
            weight_decay: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            batch_size: 512,
            clip_norm: 1.0,
            max_steps: 200_000,
            eval_interval: 100,
            snapshot_interval: 100,
            probe_interval: 100,
            seed: 0,
            grok_threshold: 0.90,
            stop_threshold: 0.98,
            stop_patience: 3,
            early_stop: true,
        }
    }

    pub fn slow() -> Self {
        Self {
            regime: Regime::Slow,
            lr: 5e-5,
            weight_decay: 0.1,
            beta2: 0.999,
            eval_interval: 1000,
            probe_interval: 2000,
            ..Self::fast()
        }
    }

    pub fn for_regime(regime: Regime) -> Self {
        match regime {
            Regime::Fast => Self::fast(),
            Regime::Slow => Self::slow(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 || self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("adam_eps and clip_norm must be positive");
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.snapshot_interval == 0 || self.probe_interval == 0 {
            return bad("batch size and intervals must be positive");
        }
        if self.stop_patience == 0 {
            return bad("stop_patience must be positive");
        }
        Ok(())
    }
}

/// AdamW moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Scales `grad` in place so its global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let total = norm(grad);
    let coef = max_norm / (total + 1e-6);
    if coef < 1.0 {
        grad.iter_mut().for_each(|g| *g *= coef);
    }
    total
}

/// One AdamW update with decoupled weight decay on an already clipped
/// gradient.
pub fn adamw_step(state: &mut OptimizerState, theta: &mut [f64], grad: &[f64], cfg: &TrainConfig) -> Result<()> {
    if theta.len() != grad.len() || state.m.len() != grad.len() {
        return Err(Error::Shape(format!(
            "adamw: theta {}, grad {}, state {}",
            theta.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2_sqrt = (1.0 - cfg.beta2.powi(t)).sqrt();
    let step_size = cfg.lr / bc1;
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for i in 0..theta.len() {
        let g = grad[i];
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let denom = v.sqrt() / bc2_sqrt + cfg.adam_eps;
        theta[i] = theta[i] * decay - step_size * m / denom;
    }
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("parameters after update {}", state.step)));
    }
    Ok(())
}

/// Uniform with-replacement sample of `batch_size` training examples.
pub fn sample_batch(train: &[Example], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
    (0..batch_size)
        .map(|_| train[rng.random_range(0..train.len())])
        .collect()
}

pub const EVAL_CHUNK: usize = 1024;

/// Exact mean cross-entropy and argmax accuracy over `examples`.
pub fn evaluate(model: &Transformer, theta: &ParamVector, examples: &[Example]) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::InsufficientData("evaluate on an empty split".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let logits = model.logits(theta, chunk)?;
        let (l, c) = score_logits(logits.data(), logits.cols(), chunk)?;
        loss += l;
        correct += c;
    }
    Ok((loss / examples.len() as f64, correct as f64 / examples.len() as f64))
}

/// Summed cross-entropy and number of argmax hits for row-major logits.
pub fn score_logits(logits: &[f64], classes: usize, examples: &[Example]) -> Result<(f64, usize)> {
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, e) in logits.chunks_exact(classes).zip(examples) {
        if e.label >= classes {
            return Err(Error::TargetOutOfRange {
                target: e.label,
                classes,
            });
        }
        let mut best = 0;
        for (k, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = k;
            }
        }
        let max = row[best];
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[e.label];
        correct += usize::from(best == e.label);
    }
    Ok((loss, correct))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub metrics: Vec<MetricRow>,
    /// First evaluated step with train accuracy ≥ 0.99.
    pub memorization_step: Option<u64>,
    /// First evaluated step with test accuracy ≥ `grok_threshold`.
    pub grok_step: Option<u64>,
    pub early_stopped: bool,
    pub stopped_step: u64,
    pub status: RunStatus,
    pub failure: Option<String>,
    /// Running hash of every sampled training batch.
    pub batch_hash: u64,
}

/// Read-only view of the run handed to observing hooks after each step's
/// bookkeeping.
pub struct Observation<'a> {
    pub step: u64,
    pub theta: &'a ParamVector,
    pub model: &'a Transformer,
    pub data: &'a DatasetSplit,
    pub log: &'a TrajectoryLog,
    pub metrics: &'a [MetricRow],
    /// An evaluation happened at this step.
    pub evaluated: bool,
    pub memorization_step: Option<u64>,
    pub grok_step: Option<u64>,
    /// The run ends after this observation.
    pub last: bool,
}

/// State handed to hooks that may modify θ right after an optimizer update.
pub struct UpdateContext<'a> {
    pub step: u64,
    pub theta: &'a mut ParamVector,
    /// The clipped (and possibly modified) gradient used for the update.
    pub grad: &'a ParamVector,
    /// `‖θ_t − θ_{t−1}‖` of the update just applied.
    pub update_norm: f64,
    pub model: &'a Transformer,
    pub data: &'a DatasetSplit,
}

/// Training-loop extension points. Every method defaults to a no-op.
pub trait Hook {
    /// Called with the clipped gradient before the optimizer update of step
    /// `step` (the update that produces θ_step).
    fn modify_gradient(&mut self, _step: u64, _grad: &mut ParamVector) -> Result<()> {
        Ok(())
    }

    fn after_update(&mut self, _ctx: &mut UpdateContext<'_>) -> Result<()> {
        Ok(())
    }

    fn observe(&mut self, _obs: &Observation<'_>) -> Result<()> {
        Ok(())
    }
}

pub struct NoHook;

impl Hook for NoHook {}

impl<A: Hook, B: Hook> Hook for (A, B) {
    fn modify_gradient(&mut self, step: u64, grad: &mut ParamVector) -> Result<()> {
        self.0.modify_gradient(step, grad)?;
        self.1.modify_gradient(step, grad)
    }

    fn after_update(&mut self, ctx: &mut UpdateContext<'_>) -> Result<()> {
        self.0.after_update(ctx)?;
        self.1.after_update(ctx)
    }

    fn observe(&mut self, obs: &Observation<'_>) -> Result<()> {
        self.0.observe(obs)?;
        self.1.observe(obs)
    }
}

impl<H: Hook + ?Sized> Hook for &mut H {
    fn modify_gradient(&mut self, step: u64, grad: &mut ParamVector) -> Result<()> {
        (**self).modify_gradient(step, grad)
    }

    fn after_update(&mut self, ctx: &mut UpdateContext<'_>) -> Result<()> {
        (**self).after_update(ctx)
    }

    fn observe(&mut self, obs: &Observation<'_>) -> Result<()> {
        (**self).observe(obs)
    }
}

pub struct TrainOutput {
    pub record: RunRecord,
    pub theta: ParamVector,
    pub log: TrajectoryLog,
}

/// Training progress callback, called after every evaluation.
pub type Progress<'a> = &'a mut dyn FnMut(&MetricRow);

fn fold_batch_hash(mut h: u64, batch: &[Example]) -> u64 {
    for e in batch {
        for x in [e.a as u64, e.b as u64] {
            h ^= x;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Trains from the seeded initialization. Divergence ends the run with
/// status `Failed`; errors raised by hooks abort it.
pub fn train(
    model: &Transformer,
    cfg: &TrainConfig,
    data: &DatasetSplit,
    hook: &mut dyn Hook,
    progress: Option<Progress<'_>>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::InsufficientData(
            "train and test splits must be non-empty".into(),
        ));
    }
    let mut progress = progress;
    let mut theta = model.init(cfg.seed);
    let mut opt = OptimizerState::new(theta.len());
    let mut rng = stream(cfg.seed, Stream::Batches);
    let mut log = TrajectoryLog::new(&model.attention_views(), 0, &theta);
    let mut record = RunRecord {
        config: cfg.clone(),
        metrics: Vec::new(),
        memorization_step: None,
        grok_step: None,
        early_stopped: false,
        stopped_step: 0,
        status: RunStatus::Running,
        failure: None,
        batch_hash: 0xcbf2_9ce4_8422_2325,
    };
    let mut streak = 0usize;
    let mut prev = theta.values().to_vec();

    let mut step = 0u64;
    loop {
        if step > 0 {
            let batch = sample_batch(&data.train, cfg.batch_size, &mut rng);
            record.batch_hash = fold_batch_hash(record.batch_hash, &batch);
            let (_, mut grad) = match model.loss_and_grad(&theta, &batch) {
                Ok(v) => v,
                Err(Error::NonFinite(msg)) => {
                    record.status = RunStatus::Failed;
                    record.failure = Some(format!("diverged at step {step}: {msg}"));
                    record.stopped_step = step - 1;
                    break;
                }
                Err(e) => return Err(e),
            };
            clip_global_norm(grad.values_mut(), cfg.clip_norm);
            hook.modify_gradient(step, &mut grad)?;
            prev.copy_from_slice(theta.values());
            if let Err(e) = adamw_step(&mut opt, theta.values_mut(), grad.values(), cfg) {
                record.status = RunStatus::Failed;
                record.failure = Some(format!("diverged at step {step}: {e}"));
                record.stopped_step = step;
                break;
            }
            let update_norm = theta
                .values()
                .iter()
                .zip(&prev)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            hook.after_update(&mut UpdateContext {
                step,
                theta: &mut theta,
                grad: &grad,
                update_norm,
                model,
                data,
            })?;
        }

        if step > 0 && step.is_multiple_of(cfg.snapshot_interval) {
            log.record(step, &theta)?;
        }
        let mut evaluated = false;
        let mut stop = step >= cfg.max_steps;
        if step.is_multiple_of(cfg.eval_interval) || stop {
            let (train_loss, train_acc) = evaluate(model, &theta, &data.train)?;
            let (test_loss, test_acc) = evaluate(model, &theta, &data.test)?;
            let row = MetricRow {
                step,
                train_loss,
                train_acc,
                test_loss,
                test_acc,
            };
            record.metrics.push(row);
            if let Some(cb) = progress.as_mut() {
                cb(&row);
            }
            evaluated = true;
            if record.memorization_step.is_none() && train_acc >= 0.99 {
                record.memorization_step = Some(step);
            }
            if record.grok_step.is_none() && test_acc >= cfg.grok_threshold {
                record.grok_step = Some(step);
            }
            if !(train_loss.is_finite() && test_loss.is_finite()) {
                record.status = RunStatus::Failed;
                record.failure = Some(format!("non-finite evaluation loss at step {step}"));
                record.stopped_step = step;
                break;
            }
            streak = if test_acc >= cfg.stop_threshold { streak + 1 } else { 0 };
            if cfg.early_stop && streak >= cfg.stop_patience {
                record.early_stopped = true;
                stop = true;
            }
        }
        hook.observe(&Observation {
            step,
            theta: &theta,
            model,
            data,
            log: &log,
            metrics: &record.metrics,
            evaluated,
            memorization_step: record.memorization_step,
            grok_step: record.grok_step,
            last: stop,
        })?;
        if stop {
            record.stopped_step = step;
            record.status = RunStatus::Done;
            break;
        }
        step += 1;
    }
    Ok(TrainOutput { record, theta, log })
}

#[cfg(test)]
mod tests;
