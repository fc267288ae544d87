//! On-disk experiment orchestration: single runs, sweeps, aggregation and
//! intervention grids. Every run lives in its own directory named after
//! a hash of its configuration, so repeated requests reuse finished runs.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::build_dataset;
use crate::error::{Error, Result};
use crate::intervention::{FrozenBasis, InterventionMode, KickEvent, KickHook, SuppressionHook};
use crate::io::write_json;
use crate::model::{save_checkpoint, Transformer};
use crate::pca::{summarize, write_summary_csv, TrajectoryLog};
use crate::probe::ProbeHook;
use crate::train::{train, Hook, MetricRow, NoHook, RunStatus};

pub mod aggregate;
pub mod artifacts;
pub mod config;
pub mod intervene;
pub mod sweep;

pub use aggregate::{analyze_runs, Analysis};
pub use artifacts::{Events, RunArtifacts, RunManifest, RunSummary};
pub use config::RunConfig;
pub use intervene::{run_intervention_grid, InterventionGrid};
pub use sweep::{run_sweep, SweepSpec};

use artifacts::*;

pub const OUT_ENV: &str = "GROKGEOM_OUT";

/// Artifact root: `$GROKGEOM_OUT`, else `./grokgeom-out`.
pub fn artifact_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("grokgeom-out"))
}

pub fn run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join("runs").join(cfg.dir_name())
}

/// Finds a run directory under `root` by run id.
pub fn find_run(root: &Path, run_id: &str) -> Result<PathBuf> {
    let runs = root.join("runs");
    let entries = fs::read_dir(&runs).map_err(|e| Error::MissingArtifact {
        path: runs.clone(),
        reason: e.to_string(),
    })?;
    for e in entries {
        let p = e?.path();
        if p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(&format!("-{run_id}")))
        {
            return Ok(p);
        }
    }
    Err(Error::MissingArtifact {
        path: runs.join(format!("*-{run_id}")),
        reason: "no run with this id".into(),
    })
}

/// How a run's basis-dependent intervention gets its frozen basis.
#[derive(Clone, Debug)]
pub enum BasisInput {
    None,
    Baseline(PathBuf),
}

#[derive(Debug)]
pub struct RunOutcome {
    pub artifacts: RunArtifacts,
    /// The run was already complete on disk.
    pub reused: bool,
}

/// Runs (or reuses) the experiment described by `cfg` under `root`.
pub fn execute_run(cfg: &RunConfig, root: &Path, baseline: &BasisInput, force: bool) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = run_dir(root, cfg);
    if !force && dir.join(MANIFEST).exists() {
        if let Ok(m) = read_manifest(&dir) {
            if matches!(m.status, RunStatus::Done | RunStatus::Failed) {
                return Ok(RunOutcome {
                    artifacts: RunArtifacts::load(&dir)?,
                    reused: true,
                });
            }
        }
    }
    fs::create_dir_all(&dir)?;
    write_json(&dir.join(CONFIG), cfg)?;
    let mut manifest = RunManifest {
        run_id: cfg.run_id(),
        dir: dir.clone(),
        status: RunStatus::Running,
        summary: None,
        failure: None,
    };
    write_manifest(&dir, &manifest)?;
    match train_into(cfg, &dir, baseline) {
        Ok(m) => {
            write_manifest(&dir, &m)?;
            Ok(RunOutcome {
                artifacts: RunArtifacts::load(&dir)?,
                reused: false,
            })
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.failure = Some(e.to_string());
            write_manifest(&dir, &manifest)?;
            Err(e)
        }
    }
}

fn train_into(cfg: &RunConfig, dir: &Path, baseline: &BasisInput) -> Result<RunManifest> {
    let model = Transformer::new(cfg.model.clone())?;
    let data = build_dataset(cfg.op, cfg.model.p, cfg.train_frac, cfg.train.seed)?;
    let t = &cfg.train;
    let iv = &cfg.intervention;

    let mut probe = cfg
        .probe
        .enabled
        .then(|| ProbeHook::new(cfg.probe.clone(), t.seed, t.probe_interval, t.batch_size));
    let mut suppress = None;
    let mut kick = None;
    let mut basis_hash = None;
    match iv.mode {
        InterventionMode::None => {}
        InterventionMode::SuppressPca => {
            let BasisInput::Baseline(base_dir) = baseline else {
                return Err(Error::InvalidConfig("suppress_pca needs a baseline run".into()));
            };
            let log = TrajectoryLog::read_dir(&base_dir.join(SNAPSHOTS))?;
            let fb = FrozenBasis::from_baseline(&log, model.n_params(), cfg.probe.pcs_per_matrix)?;
            basis_hash = Some(fb.basis.fingerprint());
            suppress = Some(SuppressionHook {
                basis: fb,
                strength: iv.strength,
                start_step: iv.start_step,
            });
        }
        InterventionMode::SuppressRandom => {
            let fb = FrozenBasis::random(model.n_params(), iv.basis_rank, t.seed);
            basis_hash = Some(fb.basis.fingerprint());
            suppress = Some(SuppressionHook {
                basis: fb,
                strength: iv.strength,
                start_step: iv.start_step,
            });
        }
        InterventionMode::KickCommutator | InterventionMode::KickRandom => {
            kick = Some(KickHook::new(iv.clone(), t.seed, t.batch_size));
        }
    }

    let label = cfg.dir_name();
    let mut progress = |r: &MetricRow| {
        if r.step.is_multiple_of(t.eval_interval * 10) {
            log::info!(
                "{label} step {} train_acc {:.4} test_acc {:.4} test_loss {:.4}",
                r.step,
                r.train_acc,
                r.test_acc,
                r.test_loss
            );
        }
    };
    let out = {
        let mut none_a = NoHook;
        let mut none_b = NoHook;
        let mut none_c = NoHook;
        let p: &mut dyn Hook = match probe.as_mut() {
            Some(h) => h,
            None => &mut none_a,
        };
        let s: &mut dyn Hook = match suppress.as_mut() {
            Some(h) => h,
            None => &mut none_b,
        };
        let k: &mut dyn Hook = match kick.as_mut() {
            Some(h) => h,
            None => &mut none_c,
        };
        let mut hooks = (p, (s, k));
        train(&model, t, &data, &mut hooks, Some(&mut progress))?
    };
    let rec = &out.record;

    write_metrics(&dir.join(METRICS), &rec.metrics)?;
    let (defect, onset_step, checkpoints) = match &probe {
        Some(h) => (h.records.clone(), h.onset_step, h.checkpoints.clone()),
        None => (Vec::new(), None, Vec::new()),
    };
    write_defect(&dir.join(DEFECT), &defect)?;
    out.log.write_dir(&dir.join(SNAPSHOTS))?;
    save_checkpoint(&out.theta, dir, FINAL_STEM)?;
    if out.log.len() >= 2 {
        let null = (cfg.null_trials >= 100).then_some(cfg.null_trials);
        let rows = summarize(&out.log, null, t.seed)?;
        write_summary_csv(&dir.join(PCA_SUMMARY), &rows)?;
    }
    if iv.mode != InterventionMode::None {
        let kicks: Vec<KickEvent> = kick.map(|k| k.events).unwrap_or_default();
        write_json(
            &dir.join(INTERVENTION),
            &serde_json::json!({
                "mode": iv.mode,
                "strength": iv.strength,
                "kick_gain": iv.kick_gain,
                "start_step": iv.start_step,
                "refresh_interval": iv.refresh_interval,
                "basis_hash": basis_hash,
                "basis_source": suppress.as_ref().map(|s| s.basis.source),
                "kicks_applied": kicks.iter().filter(|k| k.applied).count(),
                "kicks_skipped": kicks.iter().filter(|k| !k.applied).count(),
            }),
        )?;
    }
    let events = Events {
        memorization_step: rec.memorization_step,
        grok_step: rec.grok_step,
        onset_step,
        stopped_step: rec.stopped_step,
        early_stopped: rec.early_stopped,
        status: rec.status,
        failure: rec.failure.clone(),
        checkpoints,
        batch_hash: format!("{:016x}", rec.batch_hash),
    };
    write_json(&dir.join(EVENTS), &events)?;
    let last = rec.metrics.last();
    let summary = RunSummary {
        grok_step: rec.grok_step,
        memorization_step: rec.memorization_step,
        onset_step,
        stopped_step: rec.stopped_step,
        final_test_acc: last.map_or(f64::NAN, |m| m.test_acc),
        max_test_acc: rec.metrics.iter().map(|m| m.test_acc).fold(0.0, f64::max),
        max_defect: defect.iter().filter_map(|r| r.d_med).reduce(f64::max),
    };
    Ok(RunManifest {
        run_id: cfg.run_id(),
        dir: dir.to_path_buf(),
        status: rec.status,
        summary: Some(summary),
        failure: rec.failure.clone(),
    })
}

#[cfg(test)]
mod tests;
