//! Commutator-defect probe, execution-basis projections, random-subspace
//! control and trajectory–curvature alignment.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::OnsetRule;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, orthonormalize};
use crate::model::{AttnMatrix, Transformer};
use crate::pca::{deltas_matrix, pca, TrajectoryLog};
use crate::rng::{substream, Stream};
use crate::tensor::ParamVector;
use crate::train::{sample_batch, Hook, Observation};

/// One commutator measurement `δ = θ_AB − θ_BA`.
#[derive(Clone, Debug, PartialEq)]
pub struct CommutatorSample {
    pub delta: Vec<f64>,
    /// `‖δ‖ / (‖η g_A‖ · ‖η g_B‖)`; zero when the sample is invalid.
    pub defect: f64,
    pub probe_eta: f64,
    pub step_norm_a: f64,
    pub step_norm_b: f64,
    /// False when either gradient at θ vanishes.
    pub valid: bool,
}

impl CommutatorSample {
    pub fn delta_norm(&self) -> f64 {
        norm(&self.delta)
    }
}

/// Applies two plain gradient steps in both orders from `theta` and
/// returns their difference. Gradients are re-evaluated at the
/// intermediate points.
pub fn commutator_sample<A, B>(theta: &[f64], mut grad_a: A, mut grad_b: B, eta: f64) -> Result<CommutatorSample>
where
    A: FnMut(&[f64]) -> Result<Vec<f64>>,
    B: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let ga = grad_a(theta)?;
    let gb = grad_b(theta)?;
    let step = |from: &[f64], g: &[f64]| -> Vec<f64> { from.iter().zip(g).map(|(t, g)| t - eta * g).collect() };
    let theta_a = step(theta, &ga);
    let theta_b = step(theta, &gb);
    let gb_at_a = grad_b(&theta_a)?;
    let ga_at_b = grad_a(&theta_b)?;
    let theta_ab = step(&theta_a, &gb_at_a);
    let theta_ba = step(&theta_b, &ga_at_b);
    let delta: Vec<f64> = theta_ab.iter().zip(&theta_ba).map(|(x, y)| x - y).collect();
    let step_norm_a = eta * norm(&ga);
    let step_norm_b = eta * norm(&gb);
    let valid = step_norm_a > 0.0 && step_norm_b > 0.0 && delta.iter().all(|v| v.is_finite());
    let defect = if valid {
        norm(&delta) / (step_norm_a * step_norm_b)
    } else {
        0.0
    };
    Ok(CommutatorSample {
        delta,
        defect,
        probe_eta: eta,
        step_norm_a,
        step_norm_b,
        valid,
    })
}

/// Commutator of the model's cross-entropy gradients on batches `a` and `b`.
pub fn model_commutator(
    model: &Transformer,
    theta: &ParamVector,
    a: &[Example],
    b: &[Example],
    eta: f64,
) -> Result<CommutatorSample> {
    let layout = theta.layout().clone();
    let grad = |batch: &[Example], at: &[f64]| -> Result<Vec<f64>> {
        let point = ParamVector::from_values(layout.clone(), at.to_vec())?;
        Ok(model.loss_and_grad(&point, batch)?.1.into_values())
    };
    commutator_sample(theta.values(), |x| grad(a, x), |x| grad(b, x), eta)
}

/// Median of a non-empty list (mean of the two middle values for even
/// length).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefectMeasurement {
    /// Median over valid samples; `None` if there are none.
    pub median: Option<f64>,
    pub samples: Vec<CommutatorSample>,
    pub n_valid: usize,
    /// More than half of the samples were invalid.
    pub flagged: bool,
}

/// `n_samples` commutators on pairs of fresh independent training batches
/// drawn from `rng`, and the median defect of the valid ones.
pub fn defect_median(
    model: &Transformer,
    theta: &ParamVector,
    train: &[Example],
    n_samples: usize,
    batch_size: usize,
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DefectMeasurement> {
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let a = sample_batch(train, batch_size, rng);
        let b = sample_batch(train, batch_size, rng);
        samples.push(model_commutator(model, theta, &a, &b, eta)?);
    }
    Ok(summarize_samples(samples))
}

pub fn summarize_samples(samples: Vec<CommutatorSample>) -> DefectMeasurement {
    let valid: Vec<f64> = samples.iter().filter(|s| s.valid).map(|s| s.defect).collect();
    let n_valid = valid.len();
    DefectMeasurement {
        median: (n_valid > 0).then(|| median(&valid)),
        flagged: 2 * n_valid < samples.len() || n_valid == 0,
        n_valid,
        samples,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisColumnSource {
    pub layer: usize,
    pub matrix: AttnMatrix,
    pub pc: usize,
}

/// Orthonormal columns in parameter space spanning the top trajectory
/// PCA directions of every attention matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionBasis {
    pub columns: Vec<Vec<f64>>,
    /// Source of each kept column.
    pub provenance: Vec<BasisColumnSource>,
    /// Number of columns requested before orthonormalization.
    pub requested: usize,
}

impl ExecutionBasis {
    pub fn k(&self) -> usize {
        self.columns.len()
    }

    pub fn dim(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    /// Orthonormalizes arbitrary columns (e.g. a random control basis).
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Self {
        let requested = columns.len();
        let (columns, _) = orthonormalize(columns, 1e-10);
        Self {
            columns,
            provenance: Vec::new(),
            requested,
        }
    }

    /// `Bᵀv`.
    pub fn coefficients(&self, v: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|c| dot(c, v)).collect()
    }

    /// `BBᵀv`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (c, k) in self.columns.iter().zip(self.coefficients(v)) {
            axpy(k, c, &mut out);
        }
        out
    }

    /// Short content hash used to tag artifacts produced with this basis.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for c in &self.columns {
            for v in c {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Embeds the top `n_pcs` trajectory PCA directions of each logged matrix
/// at its parameter offset and orthonormalizes the stack. Dependent
/// columns are dropped.
pub fn build_execution_basis(log: &TrajectoryLog, n_params: usize, n_pcs: usize) -> Result<ExecutionBasis> {
    if log.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "execution basis needs ≥ 3 snapshots, log has {}",
            log.len()
        )));
    }
    let mut raw = Vec::new();
    let mut sources = Vec::new();
    for m in log.matrices() {
        let res = pca(&deltas_matrix(&m.initial, &m.snapshots)?, n_pcs)?;
        for (pc, comp) in res.components.into_iter().enumerate() {
            let mut col = vec![0.0; n_params];
            col[m.view.range()].copy_from_slice(&comp);
            raw.push(col);
            sources.push(BasisColumnSource {
                layer: m.view.layer,
                matrix: m.view.matrix,
                pc,
            });
        }
    }
    let requested = log.matrices().len() * n_pcs;
    let (columns, kept) = orthonormalize(raw, 1e-10);
    Ok(ExecutionBasis {
        columns,
        provenance: kept.into_iter().map(|i| sources[i]).collect(),
        requested,
    })
}

/// A `k`-column orthonormal basis from the QR of a Gaussian matrix.
pub fn random_basis(dim: usize, k: usize, rng: &mut ChaCha8Rng) -> ExecutionBasis {
    let cols = (0..k)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    ExecutionBasis::from_columns(cols)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub par_norm: f64,
    pub perp_norm: f64,
    pub delta_norm: f64,
    /// `‖δ_⊥‖ / ‖δ‖`.
    pub rho: f64,
    /// `‖δ_∥‖ / ‖δ‖`.
    pub proj_fraction: f64,
}

/// `δ_∥ = BBᵀδ`, `δ_⊥ = δ − δ_∥` and their norms relative to `‖δ‖`.
pub fn project_decompose(delta: &[f64], basis: &ExecutionBasis) -> Result<(Vec<f64>, Vec<f64>, Decomposition)> {
    let delta_norm = norm(delta);
    if delta_norm == 0.0 || !delta_norm.is_finite() {
        return Err(Error::InsufficientData(
            "projection of a zero commutator is undefined".into(),
        ));
    }
    let par = basis.project(delta);
    let perp: Vec<f64> = delta.iter().zip(&par).map(|(d, p)| d - p).collect();
    let par_norm = norm(&par);
    let perp_norm = norm(&perp);
    Ok((
        par,
        perp,
        Decomposition {
            par_norm,
            perp_norm,
            delta_norm,
            rho: perp_norm / delta_norm,
            proj_fraction: par_norm / delta_norm,
        },
    ))
}

/// Projection fraction `‖BBᵀδ‖/‖δ‖` without materializing `δ_∥`.
pub fn projection_fraction(delta: &[f64], basis: &ExecutionBasis) -> f64 {
    norm(&basis.coefficients(delta)) / norm(delta)
}

/// Mean projection fraction of `delta` over `bases`.
pub fn random_basis_control(delta: &[f64], bases: &[ExecutionBasis]) -> f64 {
    bases.iter().map(|b| projection_fraction(delta, b)).sum::<f64>() / bases.len() as f64
}

/// Mean absolute cosine between the last update `step` and each valid
/// commutator. `None` when the step or every commutator is zero.
pub fn trajectory_alignment(step: &[f64], samples: &[CommutatorSample]) -> Option<f64> {
    let sn = norm(step);
    if sn == 0.0 {
        return None;
    }
    let cos: Vec<f64> = samples
        .iter()
        .filter_map(|s| {
            let dn = s.delta_norm();
            (s.valid && dn > 0.0).then(|| dot(step, &s.delta).abs() / (sn * dn))
        })
        .collect();
    (!cos.is_empty()).then(|| cos.iter().sum::<f64>() / cos.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub enabled: bool,
    pub eta: f64,
    pub n_samples: usize,
    pub n_align: usize,
    pub n_rand: usize,
    pub pcs_per_matrix: usize,
    /// Probe batch size; 0 means the training batch size.
    pub batch_size: usize,
    /// Measure alignment at every probe, not only at the strategic
    /// checkpoints.
    pub align_every_probe: bool,
    pub onset_baseline_n: usize,
    pub onset_mult: f64,
    pub onset_floor: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            eta: 1e-3,
            n_samples: 9,
            n_align: 12,
            n_rand: 5,
            pcs_per_matrix: 2,
            batch_size: 0,
            align_every_probe: false,
            onset_baseline_n: 3,
            onset_mult: 10.0,
            onset_floor: 20.0,
        }
    }
}

/// One row of `defect.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectRecord {
    pub step: u64,
    pub d_med: Option<f64>,
    pub rho: Option<f64>,
    pub exec_frac: Option<f64>,
    pub rand_frac: Option<f64>,
    pub exec_rand_ratio: Option<f64>,
    pub alignment: Option<f64>,
    pub n_valid_samples: usize,
    pub basis_k: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoint {
    Memorization,
    Onset,
    Grok,
    PostGrok,
}

/// Trainer hook that measures the defect series while training runs.
///
/// The execution basis at each probe is built from the snapshots logged
/// so far (expanding window), so every quantity uses only the past.
pub struct ProbeHook {
    pub cfg: ProbeConfig,
    pub seed: u64,
    pub probe_interval: u64,
    pub train_batch_size: usize,
    pub records: Vec<DefectRecord>,
    pub checkpoints: Vec<(Checkpoint, u64)>,
    pub onset_step: Option<u64>,
    prev_theta: Option<Vec<f64>>,
}

/// Defect, invariance and random-basis control at one point: `n_samples`
/// commutators from the probe substream keyed by `step`, projected onto the
/// execution basis of `log` when it holds at least three snapshots.
#[allow(clippy::too_many_arguments)]
pub fn probe_point(
    model: &Transformer,
    theta: &ParamVector,
    log: &TrajectoryLog,
    train: &[Example],
    cfg: &ProbeConfig,
    seed: u64,
    step: u64,
    batch_size: usize,
) -> Result<DefectRecord> {
    let mut rng = substream(seed, Stream::Probe, step);
    let m = defect_median(model, theta, train, cfg.n_samples, batch_size, cfg.eta, &mut rng)?;
    let mut rec = DefectRecord {
        step,
        d_med: if m.flagged { None } else { m.median },
        rho: None,
        exec_frac: None,
        rand_frac: None,
        exec_rand_ratio: None,
        alignment: None,
        n_valid_samples: m.n_valid,
        basis_k: None,
    };
    let deltas: Vec<&[f64]> = m
        .samples
        .iter()
        .filter(|s| s.valid && s.delta_norm() > 0.0)
        .map(|s| s.delta.as_slice())
        .collect();
    if log.len() >= 3 && !deltas.is_empty() {
        let basis = build_execution_basis(log, theta.len(), cfg.pcs_per_matrix)?;
        let mut rng = substream(seed, Stream::Probe, step | RAND_KEY);
        let rand: Vec<ExecutionBasis> = (0..cfg.n_rand)
            .map(|_| random_basis(theta.len(), basis.k(), &mut rng))
            .collect();
        let (mut rho, mut exec, mut rnd) = (0.0, 0.0, 0.0);
        for d in &deltas {
            let (_, _, dec) = project_decompose(d, &basis)?;
            rho += dec.rho;
            exec += dec.proj_fraction;
            rnd += random_basis_control(d, &rand);
        }
        let n = deltas.len() as f64;
        rec.rho = Some(rho / n);
        rec.exec_frac = Some(exec / n);
        rec.rand_frac = Some(rnd / n);
        rec.exec_rand_ratio = (rnd > 0.0).then(|| exec / rnd);
        rec.basis_k = Some(basis.k());
    }
    Ok(rec)
}

const ALIGN_KEY: u64 = 1 << 40;
const RAND_KEY: u64 = 2 << 40;

impl ProbeHook {
    pub fn new(cfg: ProbeConfig, seed: u64, probe_interval: u64, train_batch_size: usize) -> Self {
        Self {
            cfg,
            seed,
            probe_interval,
            train_batch_size,
            records: Vec::new(),
            checkpoints: Vec::new(),
            onset_step: None,
            prev_theta: None,
        }
    }

    fn batch_size(&self) -> usize {
        if self.cfg.batch_size == 0 {
            self.train_batch_size
        } else {
            self.cfg.batch_size
        }
    }

    fn has(&self, c: Checkpoint) -> bool {
        self.checkpoints.iter().any(|(k, _)| *k == c)
    }

    fn measure(&mut self, obs: &Observation<'_>, align: bool) -> Result<DefectRecord> {
        let mut rec = probe_point(
            obs.model,
            obs.theta,
            obs.log,
            &obs.data.train,
            &self.cfg,
            self.seed,
            obs.step,
            self.batch_size(),
        )?;
        if align {
            rec.alignment = self.alignment(obs)?;
        }
        Ok(rec)
    }

    fn alignment(&self, obs: &Observation<'_>) -> Result<Option<f64>> {
        let Some(prev) = &self.prev_theta else {
            return Ok(None);
        };
        let step: Vec<f64> = obs.theta.values().iter().zip(prev).map(|(a, b)| a - b).collect();
        let mut rng = substream(self.seed, Stream::Probe, obs.step | ALIGN_KEY);
        let bs = self.batch_size();
        let mut samples = Vec::with_capacity(self.cfg.n_align);
        for _ in 0..self.cfg.n_align {
            let a = sample_batch(&obs.data.train, bs, &mut rng);
            let b = sample_batch(&obs.data.train, bs, &mut rng);
            samples.push(model_commutator(obs.model, obs.theta, &a, &b, self.cfg.eta)?);
        }
        Ok(trajectory_alignment(&step, &samples))
    }

    fn onset_now(&self) -> bool {
        let series = self.series();
        let rule = OnsetRule {
            baseline_n: self.cfg.onset_baseline_n,
            mult: self.cfg.onset_mult,
            floor: self.cfg.onset_floor,
        };
        matches!(rule.detect(&series), Ok(Some(_)))
    }

    /// `(step, D_med)` for every probe with a valid median.
    pub fn series(&self) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.d_med.map(|d| (r.step, d)))
            .collect()
    }
}

impl Hook for ProbeHook {
    fn observe(&mut self, obs: &Observation<'_>) -> Result<()> {
        if !self.cfg.enabled {
            return Ok(());
        }
        let mut due = Vec::new();
        if obs.memorization_step == Some(obs.step) && !self.has(Checkpoint::Memorization) {
            due.push(Checkpoint::Memorization);
        }
        if obs.grok_step == Some(obs.step) && !self.has(Checkpoint::Grok) {
            due.push(Checkpoint::Grok);
        }
        if obs.last && obs.grok_step.is_some() && !self.has(Checkpoint::PostGrok) {
            due.push(Checkpoint::PostGrok);
        }
        let scheduled = obs.step.is_multiple_of(self.probe_interval);
        if scheduled || !due.is_empty() {
            let align = self.cfg.align_every_probe || !due.is_empty();
            let rec = self.measure(obs, align)?;
            self.records.push(rec);
            if self.onset_step.is_none() && self.onset_now() {
                self.onset_step = Some(obs.step);
                due.push(Checkpoint::Onset);
                let needs_align = self.records.last().is_some_and(|r| r.alignment.is_none());
                if needs_align {
                    let a = self.alignment(obs)?;
                    if let Some(last) = self.records.last_mut() {
                        last.alignment = a;
                    }
                }
            }
            for c in due {
                self.checkpoints.push((c, obs.step));
            }
        }
        self.prev_theta = Some(obs.theta.values().to_vec());
        Ok(())
    }
}
