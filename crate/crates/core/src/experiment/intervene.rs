use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::Operation;
use crate::error::{Error, Result};
use crate::intervention::{InterventionConfig, InterventionMode};
use crate::io::{fmt_f64, fmt_opt_u64, write_atomic, write_json};
use crate::train::RunStatus;

use super::artifacts::read_manifest;
use super::config::RunConfig;
use super::{execute_run, run_dir, BasisInput};

pub const DOSE_RESPONSE: &str = "dose_response.csv";

/// A dose-response grid: one intervention mode at several strengths (or
/// kick gains) over several seeds, each compared with its baseline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionGrid {
    pub op: Operation,
    pub seeds: Vec<u64>,
    pub mode: InterventionMode,
    /// Suppression strengths or kick gains.
    pub values: Vec<f64>,
    /// Baseline configuration; the seed is replaced per run and its
    /// intervention settings only apply to the intervention runs.
    pub template: RunConfig,
    /// Intervention runs stop at this multiple of the baseline grok step.
    pub budget_factor: u64,
    pub parallelism: usize,
}

impl InterventionGrid {
    pub fn new(op: Operation, seeds: Vec<u64>, mode: InterventionMode, values: Vec<f64>) -> Self {
        Self {
            op,
            seeds,
            mode,
            values,
            template: RunConfig::new(op, crate::train::Regime::Fast, 0),
            budget_factor: 3,
            parallelism: 1,
        }
    }

    pub fn baseline_config(&self, seed: u64) -> RunConfig {
        let mut c = self.template.clone();
        c.op = self.op;
        c.train.seed = seed;
        c.intervention = InterventionConfig::default();
        c
    }

    /// Configuration of one intervention run given its baseline grok step.
    pub fn run_config(&self, seed: u64, value: f64, baseline_grok: u64) -> RunConfig {
        let mut c = self.baseline_config(seed);
        c.intervention = self.template.intervention.clone();
        c.intervention.mode = self.mode;
        if self.mode.is_kick() {
            c.intervention.kick_gain = value;
        } else {
            c.intervention.strength = value;
        }
        c.probe.enabled = false;
        c.null_trials = 0;
        c.train.max_steps = self.budget_factor * baseline_grok;
        c
    }

    fn validate(&self) -> Result<()> {
        if self.mode == InterventionMode::None {
            return Err(Error::InvalidConfig("intervention grid needs a mode".into()));
        }
        if self.seeds.is_empty() || self.values.is_empty() || self.budget_factor == 0 || self.parallelism == 0 {
            return Err(Error::InvalidConfig("intervention grid is empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoseRow {
    pub op: Operation,
    pub mode: InterventionMode,
    pub value: f64,
    pub seed: u64,
    pub baseline_grok_step: u64,
    pub grok_step: Option<u64>,
    pub status: RunStatus,
    pub run_dir: PathBuf,
}

pub fn grid_dir(root: &Path, grid: &InterventionGrid) -> PathBuf {
    root.join("interventions").join(format!("{}-{}", grid.op, grid.mode))
}

/// Looks up the finished baseline run for `seed`.
pub fn baseline_grok(root: &Path, cfg: &RunConfig) -> Result<(PathBuf, u64)> {
    let dir = run_dir(root, cfg);
    let missing = |reason: String| Error::MissingArtifact {
        path: dir.clone(),
        reason,
    };
    let m = read_manifest(&dir).map_err(|e| missing(format!("baseline run not found: {e}")))?;
    if m.status != RunStatus::Done {
        return Err(missing(format!("baseline run is {:?}", m.status)));
    }
    let grok = m
        .summary
        .and_then(|s| s.grok_step)
        .ok_or_else(|| missing("baseline run never grokked".into()))?;
    Ok((dir, grok))
}

/// Runs the grid (reusing finished runs) and writes `dose_response.csv`.
/// Every seed needs a finished, grokked baseline under `root`.
pub fn run_intervention_grid(grid: &InterventionGrid, root: &Path) -> Result<Vec<DoseRow>> {
    grid.validate()?;
    let mut jobs = Vec::new();
    for &seed in &grid.seeds {
        let (base_dir, grok) = baseline_grok(root, &grid.baseline_config(seed))?;
        for &value in &grid.values {
            jobs.push((seed, value, grok, base_dir.clone()));
        }
    }
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<DoseRow>>> = Mutex::new(vec![None; jobs.len()]);
    let errors: Mutex<Vec<Error>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..grid.parallelism.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("grid state");
                    if *n >= jobs.len() {
                        return;
                    }
                    *n += 1;
                    *n - 1
                };
                let (seed, value, grok, ref base_dir) = jobs[i];
                let cfg = grid.run_config(seed, value, grok);
                match execute_run(&cfg, root, &BasisInput::Baseline(base_dir.clone()), false) {
                    Ok(o) => {
                        results.lock().expect("grid state")[i] = Some(DoseRow {
                            op: grid.op,
                            mode: grid.mode,
                            value,
                            seed,
                            baseline_grok_step: grok,
                            grok_step: o.artifacts.events.grok_step,
                            status: o.artifacts.manifest.status,
                            run_dir: o.artifacts.dir,
                        })
                    }
                    Err(e) => {
                        log::error!("intervention run seed {seed} value {value} failed: {e}");
                        errors.lock().expect("grid state").push(e);
                    }
                }
            });
        }
    });
    if let Some(e) = errors.into_inner().expect("grid state").into_iter().next() {
        return Err(e);
    }
    let rows: Vec<DoseRow> = results
        .into_inner()
        .expect("grid state")
        .into_iter()
        .flatten()
        .collect();
    let dir = grid_dir(root, grid);
    std::fs::create_dir_all(&dir)?;
    write_dose_response(&dir.join(DOSE_RESPONSE), &rows)?;
    write_json(&dir.join("grid.json"), grid)?;
    Ok(rows)
}

pub fn write_dose_response(path: &Path, rows: &[DoseRow]) -> Result<()> {
    let mut out = String::from("op,mode,s_or_gain,seed,grok_step_or_null,baseline_grok_step\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.op,
            r.mode,
            fmt_f64(r.value),
            r.seed,
            fmt_opt_u64(r.grok_step),
            r.baseline_grok_step
        ));
    }
    write_atomic(path, out.as_bytes())
}
