//! Trajectory PCA of attention weights.
//!
//! For one attention matrix with initial value W₀ and snapshots W₁…W_T the
//! trajectory matrix has rows `vec(W_t − W₀)` with columns mean-centered.
//! Its SVD is obtained from the `T×T` Gram matrix, which is exact and
//! cheap because `T ≪ d²`.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{f64s_to_le, le_to_f64s, write_atomic, write_json};
use crate::linalg::{norm, symmetric_eigen};
use crate::model::{AttentionView, AttnMatrix};
use crate::rng::{stream, Stream};
use crate::tensor::kernels::{matmul_nt, matmul_tn};
use crate::tensor::ParamVector;

pub type MatrixKey = (usize, AttnMatrix);

/// Per-matrix snapshot history.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixTrajectory {
    pub view: AttentionView,
    pub initial: Vec<f64>,
    pub snapshots: Vec<Vec<f64>>,
}

/// Time-ordered attention-weight snapshots for every logged matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryLog {
    initial_step: u64,
    steps: Vec<u64>,
    matrices: Vec<MatrixTrajectory>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotManifest {
    views: Vec<AttentionView>,
    initial_step: u64,
    steps: Vec<u64>,
}

fn snapshot_file(step: u64) -> String {
    format!("step_{step:08}.bin")
}

impl TrajectoryLog {
    /// Starts a log with `theta` as the initial weights W₀.
    pub fn new(views: &[AttentionView], step: u64, theta: &ParamVector) -> Self {
        let matrices = views
            .iter()
            .map(|v| MatrixTrajectory {
                view: *v,
                initial: v.read(theta).to_vec(),
                snapshots: Vec::new(),
            })
            .collect();
        Self {
            initial_step: step,
            steps: Vec::new(),
            matrices,
        }
    }

    pub fn record(&mut self, step: u64, theta: &ParamVector) -> Result<()> {
        if step <= self.steps.last().copied().unwrap_or(self.initial_step) {
            return Err(Error::InvalidConfig(format!("snapshot step {step} is not increasing")));
        }
        for m in &mut self.matrices {
            m.snapshots.push(m.view.read(theta).to_vec());
        }
        self.steps.push(step);
        Ok(())
    }

    /// Number of snapshots after W₀.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    pub fn initial_step(&self) -> u64 {
        self.initial_step
    }

    pub fn matrices(&self) -> &[MatrixTrajectory] {
        &self.matrices
    }

    pub fn keys(&self) -> Vec<MatrixKey> {
        self.matrices.iter().map(|m| m.view.key()).collect()
    }

    pub fn get(&self, key: MatrixKey) -> Option<&MatrixTrajectory> {
        self.matrices.iter().find(|m| m.view.key() == key)
    }

    pub fn n_layers(&self) -> usize {
        self.matrices.iter().map(|m| m.view.layer + 1).max().unwrap_or(0)
    }

    /// The log restricted to its first `n` snapshots.
    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            initial_step: self.initial_step,
            steps: self.steps[..n].to_vec(),
            matrices: self
                .matrices
                .iter()
                .map(|m| MatrixTrajectory {
                    view: m.view,
                    initial: m.initial.clone(),
                    snapshots: m.snapshots[..n].to_vec(),
                })
                .collect(),
        }
    }

    /// Writes one raw little-endian file per checkpoint (W₀ included) plus
    /// `manifest.json` listing views and steps.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let write_step = |step: u64, pick: &dyn Fn(&MatrixTrajectory) -> &[f64]| -> Result<()> {
            let path = dir.join(snapshot_file(step));
            if path.exists() {
                return Ok(());
            }
            let mut all = Vec::new();
            for m in &self.matrices {
                all.extend_from_slice(pick(m));
            }
            write_atomic(&path, &f64s_to_le(&all))
        };
        write_step(self.initial_step, &|m| &m.initial)?;
        for (i, &s) in self.steps.iter().enumerate() {
            write_step(s, &|m| &m.snapshots[i])?;
        }
        self.write_manifest(dir)
    }

    fn write_manifest(&self, dir: &Path) -> Result<()> {
        let manifest = SnapshotManifest {
            views: self.matrices.iter().map(|m| m.view).collect(),
            initial_step: self.initial_step,
            steps: self.steps.clone(),
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let manifest: SnapshotManifest = crate::io::read_json(&dir.join("manifest.json"))?;
        let read_step = |step: u64| -> Result<Vec<f64>> {
            let path = dir.join(snapshot_file(step));
            let bytes = fs::read(&path).map_err(|e| Error::MissingArtifact {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            le_to_f64s(&bytes)
        };
        let split = |flat: Vec<f64>| -> Result<Vec<Vec<f64>>> {
            let mut out = Vec::with_capacity(manifest.views.len());
            let mut cursor = 0;
            for v in &manifest.views {
                let end = cursor + v.len();
                if end > flat.len() {
                    return Err(Error::Shape("snapshot file shorter than manifest".into()));
                }
                out.push(flat[cursor..end].to_vec());
                cursor = end;
            }
            Ok(out)
        };
        let initial = split(read_step(manifest.initial_step)?)?;
        let mut matrices: Vec<MatrixTrajectory> = manifest
            .views
            .iter()
            .zip(initial)
            .map(|(v, w0)| MatrixTrajectory {
                view: *v,
                initial: w0,
                snapshots: Vec::with_capacity(manifest.steps.len()),
            })
            .collect();
        for &s in &manifest.steps {
            for (m, w) in matrices.iter_mut().zip(split(read_step(s)?)?) {
                m.snapshots.push(w);
            }
        }
        Ok(Self {
            initial_step: manifest.initial_step,
            steps: manifest.steps,
            matrices,
        })
    }
}

/// Row-major centered trajectory matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Rows `vec(W_t − W₀)` for every snapshot, then column-centered.
pub fn trajectory_matrix(log: &TrajectoryLog, key: MatrixKey) -> Result<TrajectoryMatrix> {
    let m = log
        .get(key)
        .ok_or_else(|| Error::InvalidConfig(format!("no trajectory for layer {} {}", key.0, key.1)))?;
    deltas_matrix(&m.initial, &m.snapshots)
}

pub(crate) fn deltas_matrix(initial: &[f64], snapshots: &[Vec<f64>]) -> Result<TrajectoryMatrix> {
    let rows = snapshots.len();
    if rows < 2 {
        return Err(Error::InsufficientData(format!(
            "trajectory needs at least 2 snapshots, has {rows}"
        )));
    }
    let cols = initial.len();
    let mut data = Vec::with_capacity(rows * cols);
    for s in snapshots {
        data.extend(s.iter().zip(initial).map(|(w, w0)| w - w0));
    }
    center_columns(&mut data, rows, cols);
    Ok(TrajectoryMatrix { rows, cols, data })
}

pub(crate) fn center_columns(data: &mut [f64], rows: usize, cols: usize) {
    let mut mean = vec![0.0; cols];
    for r in data.chunks_exact(cols) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    for r in data.chunks_exact_mut(cols) {
        for (v, m) in r.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    /// All singular values of X, descending.
    pub singular_values: Vec<f64>,
    /// `σ_k² / Σσ_i²`; all zero for a degenerate (zero) trajectory.
    pub explained: Vec<f64>,
    /// Top right singular vectors, unit length, each of length `cols`.
    pub components: Vec<Vec<f64>>,
    pub n_snapshots: usize,
    /// Set when X is identically zero.
    pub degenerate: bool,
}

impl PcaResult {
    /// `100·σ₁²/Σσ_i²` (0 for a degenerate trajectory).
    pub fn pc1_percent(&self) -> f64 {
        100.0 * self.explained.first().copied().unwrap_or(0.0)
    }

    pub fn percent(&self, k: usize) -> f64 {
        100.0 * self.explained.get(k).copied().unwrap_or(0.0)
    }
}

/// SVD of `x` via the eigendecomposition of `X Xᵀ`. Returns up to
/// `n_components` right singular vectors with nonzero singular value.
pub fn pca(x: &TrajectoryMatrix, n_components: usize) -> Result<PcaResult> {
    if x.rows == 0 || x.cols == 0 {
        return Err(Error::InsufficientData("empty trajectory matrix".into()));
    }
    let t = x.rows;
    let mut gram = vec![0.0; t * t];
    matmul_nt(&x.data, &x.data, &mut gram, t, x.cols, t, false);
    // exact symmetry for the eigensolver
    for i in 0..t {
        for j in 0..i {
            let s = 0.5 * (gram[i * t + j] + gram[j * t + i]);
            gram[i * t + j] = s;
            gram[j * t + i] = s;
        }
    }
    let (mut eigvals, eigvecs) = symmetric_eigen(&gram, t);
    // eigenvalues within round-off of zero carry no direction
    let floor = eigvals.first().copied().unwrap_or(0.0).max(0.0) * 4.0 * t as f64 * f64::EPSILON;
    for l in eigvals.iter_mut() {
        if *l <= floor {
            *l = 0.0;
        }
    }
    let singular_values: Vec<f64> = eigvals.iter().map(|&l| l.sqrt()).collect();
    let total: f64 = eigvals.iter().sum();
    let degenerate = total == 0.0 || !total.is_finite();
    let explained = if degenerate {
        vec![0.0; t]
    } else {
        eigvals.iter().map(|l| l / total).collect()
    };

    let mut components = Vec::new();
    for (k, u) in eigvecs.iter().enumerate().take(n_components.min(t)) {
        if degenerate || eigvals[k] == 0.0 {
            break;
        }
        let mut v = vec![0.0; x.cols];
        matmul_tn(u, &x.data, &mut v, 1, t, x.cols, false);
        let n = norm(&v);
        v.iter_mut().for_each(|c| *c /= n);
        components.push(v);
    }
    Ok(PcaResult {
        singular_values,
        explained,
        components,
        n_snapshots: t,
        degenerate,
    })
}

/// PC1% of a trajectory given as initial weights and snapshot list.
pub(crate) fn pc1_of(initial: &[f64], snapshots: &[Vec<f64>]) -> Result<f64> {
    let x = deltas_matrix(initial, snapshots)?;
    Ok(pca(&x, 1)?.pc1_percent())
}

/// PC1% on prefixes of length 3, 4, …, T.
pub fn expanding_window_pc1(log: &TrajectoryLog, key: MatrixKey) -> Result<Vec<(u64, f64)>> {
    let m = log
        .get(key)
        .ok_or_else(|| Error::InvalidConfig(format!("no trajectory for layer {} {}", key.0, key.1)))?;
    if m.snapshots.len() < 3 {
        return Err(Error::InsufficientData(
            "expanding window needs at least 3 snapshots".into(),
        ));
    }
    (3..=m.snapshots.len())
        .map(|n| Ok((log.steps()[n - 1], pc1_of(&m.initial, &m.snapshots[..n])?)))
        .collect()
}

/// Per-step displacement norms `‖W_t − W_{t−1}‖` (W₀ included as the start).
pub fn step_norms(m: &MatrixTrajectory) -> Vec<f64> {
    let mut prev = &m.initial;
    let mut out = Vec::with_capacity(m.snapshots.len());
    for s in &m.snapshots {
        out.push(s.iter().zip(prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        prev = s;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullModel {
    pub mean: f64,
    pub std: f64,
    pub z_score: f64,
    pub observed: f64,
    pub n_trials: usize,
    /// Zero spread in the null distribution; z is then not meaningful.
    pub degenerate: bool,
}

/// PC1% distribution of isotropic Gaussian random walks in `dim`
/// dimensions whose step lengths equal `step_norms`, and the z-score of
/// `observed` against it.
pub fn random_walk_null(
    dim: usize,
    step_norms: &[f64],
    n_trials: usize,
    observed: f64,
    seed: u64,
) -> Result<NullModel> {
    if n_trials < 100 {
        return Err(Error::InvalidConfig(format!(
            "null model needs ≥ 100 trials, got {n_trials}"
        )));
    }
    if step_norms.len() < 2 || dim == 0 {
        return Err(Error::InsufficientData("null model needs ≥ 2 steps".into()));
    }
    let mut rng = stream(seed, Stream::Null);
    let t = step_norms.len();
    let mut samples = Vec::with_capacity(n_trials);
    let mut pos = vec![0.0; dim];
    let mut step = vec![0.0; dim];
    let mut x = vec![0.0; t * dim];
    for _ in 0..n_trials {
        pos.iter_mut().for_each(|v| *v = 0.0);
        for (r, &len) in step_norms.iter().enumerate() {
            for s in step.iter_mut() {
                *s = StandardNormal.sample(&mut rng);
            }
            let n = norm(&step);
            let k = if n > 0.0 { len / n } else { 0.0 };
            for (p, s) in pos.iter_mut().zip(&step) {
                *p += k * s;
            }
            x[r * dim..(r + 1) * dim].copy_from_slice(&pos);
        }
        let mut data = x.clone();
        center_columns(&mut data, t, dim);
        let res = pca(
            &TrajectoryMatrix {
                rows: t,
                cols: dim,
                data,
            },
            1,
        )?;
        samples.push(res.pc1_percent());
    }
    let mean = samples.iter().sum::<f64>() / n_trials as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n_trials - 1) as f64;
    let std = var.sqrt();
    let degenerate = std == 0.0;
    let z_score = if degenerate { 0.0 } else { (observed - mean) / std };
    Ok(NullModel {
        mean,
        std,
        z_score,
        observed,
        n_trials,
        degenerate,
    })
}

/// One row of `pca_summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaSummaryRow {
    pub layer: usize,
    pub matrix: AttnMatrix,
    pub pc_percent: [f64; 5],
    pub z_score: Option<f64>,
}

/// PC1–PC5 percentages (and optionally the null-model z-score) for every
/// matrix in the log.
pub fn summarize(log: &TrajectoryLog, null_trials: Option<usize>, seed: u64) -> Result<Vec<PcaSummaryRow>> {
    let mut rows = Vec::new();
    for m in log.matrices() {
        let x = deltas_matrix(&m.initial, &m.snapshots)?;
        let res = pca(&x, 0)?;
        let pc_percent = std::array::from_fn(|k| res.percent(k));
        let z_score = match null_trials {
            Some(n) => Some(random_walk_null(m.initial.len(), &step_norms(m), n, res.pc1_percent(), seed)?.z_score),
            None => None,
        };
        rows.push(PcaSummaryRow {
            layer: m.view.layer,
            matrix: m.view.matrix,
            pc_percent,
            z_score,
        });
    }
    Ok(rows)
}

pub fn write_summary_csv(path: &Path, rows: &[PcaSummaryRow]) -> Result<()> {
    use crate::io::{fmt_f64, fmt_opt_f64};
    let mut out = String::from("layer,matrix,pc1,pc2,pc3,pc4,pc5,z_score\n");
    for r in rows {
        out.push_str(&format!("{},{}", r.layer, r.matrix));
        for p in r.pc_percent {
            out.push(',');
            out.push_str(&fmt_f64(p));
        }
        out.push(',');
        out.push_str(&fmt_opt_f64(r.z_score));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<PcaSummaryRow>> {
    use crate::io::parse_opt_f64;
    let file = fs::File::open(path).map_err(|e| Error::MissingArtifact {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let bad = |what: &str| Error::InvalidConfig(format!("{}: bad {what}", path.display()));
    let mut rows = Vec::new();
    for rec in csv::Reader::from_reader(file).records() {
        let rec = rec?;
        if rec.len() != 8 {
            return Err(bad("row width"));
        }
        let layer = rec[0].parse().map_err(|_| bad("layer"))?;
        let matrix = rec[1].parse()?;
        let mut pc_percent = [0.0; 5];
        for (k, p) in pc_percent.iter_mut().enumerate() {
            *p = parse_opt_f64(&rec[2 + k])?.ok_or_else(|| bad("percentage"))?;
        }
        rows.push(PcaSummaryRow {
            layer,
            matrix,
            pc_percent,
            z_score: parse_opt_f64(&rec[7])?,
        });
    }
    Ok(rows)
}
