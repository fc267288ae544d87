use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::Operation;
use crate::error::{Error, Result};
use crate::io::write_json;
use crate::train::{Regime, RunStatus};

use super::aggregate::{analyze_runs, write_analysis};
use super::artifacts::{RunArtifacts, RunManifest};
use super::config::RunConfig;
use super::{execute_run, BasisInput};

/// Full learning-rate grid; entries below 3e-4 need `long`.
pub const LR_GRID: [f64; 6] = [3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub name: String,
    pub ops: Vec<Operation>,
    pub lrs: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub seeds: Vec<u64>,
    pub regime: Regime,
    /// Per-run step budget.
    pub max_steps: u64,
    pub parallelism: usize,
    /// Allows the slow regime and learning rates below 3e-4.
    pub long: bool,
    /// Template for every cell; op, lr, weight decay, seed and budget are
    /// overwritten per cell, and a template of another regime is replaced
    /// by that regime's defaults.
    pub template: RunConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            name: "sweep".into(),
            ops: vec![Operation::Add, Operation::X2XyY2],
            lrs: vec![3e-4, 1e-3, 3e-3],
            weight_decays: vec![1.0],
            seeds: vec![1, 2],
            regime: Regime::Fast,
            max_steps: 20_000,
            parallelism: 1,
            long: false,
            template: RunConfig::default(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ops.is_empty() || self.lrs.is_empty() || self.weight_decays.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidConfig("sweep grid is empty".into()));
        }
        if self.max_steps == 0 || self.parallelism == 0 {
            return Err(Error::InvalidConfig(
                "sweep budget and parallelism must be positive".into(),
            ));
        }
        if !self.long {
            if self.regime == Regime::Slow {
                return Err(Error::InvalidConfig("slow-regime sweeps need --long".into()));
            }
            if let Some(lr) = self.lrs.iter().find(|&&lr| lr < 3e-4) {
                return Err(Error::InvalidConfig(format!("lr {lr} below 3e-4 needs --long")));
            }
        }
        Ok(())
    }

    /// One configuration per grid cell, op-major.
    pub fn cells(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &op in &self.ops {
            for &lr in &self.lrs {
                for &wd in &self.weight_decays {
                    for &seed in &self.seeds {
                        let mut c = self.template.clone();
                        if c.train.regime != self.regime {
                            let fresh = RunConfig::new(op, self.regime, seed);
                            c.model.n_layers = fresh.model.n_layers;
                            c.train = fresh.train;
                        }
                        c.op = op;
                        c.train.lr = lr;
                        c.train.weight_decay = wd;
                        c.train.seed = seed;
                        c.train.max_steps = self.max_steps;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepManifest {
    pub spec: SweepSpec,
    pub runs: Vec<SweepEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepEntry {
    pub run_id: String,
    pub dir: PathBuf,
    pub status: RunStatus,
    pub error: Option<String>,
}

pub fn sweep_dir(root: &Path, name: &str) -> PathBuf {
    root.join("sweeps").join(name)
}

/// Runs every cell (reusing finished runs) with at most `parallelism`
/// concurrent runs, then writes the sweep manifest and its aggregate
/// artifacts. Individual run failures are recorded, not fatal.
pub fn run_sweep(spec: &SweepSpec, root: &Path) -> Result<SweepManifest> {
    spec.validate()?;
    let cells = spec.cells();
    let dir = sweep_dir(root, &spec.name);
    std::fs::create_dir_all(&dir)?;
    let entries: Vec<SweepEntry> = cells
        .iter()
        .map(|c| SweepEntry {
            run_id: c.run_id(),
            dir: super::run_dir(root, c),
            status: RunStatus::Pending,
            error: None,
        })
        .collect();
    let state = Mutex::new((
        0usize,
        SweepManifest {
            spec: spec.clone(),
            runs: entries,
        },
    ));
    {
        let s = state.lock().expect("sweep state");
        write_json(&dir.join("manifest.json"), &s.1)?;
    }
    let save = |m: &SweepManifest| {
        if let Err(e) = write_json(&dir.join("manifest.json"), m) {
            log::error!("could not write sweep manifest: {e}");
        }
    };
    std::thread::scope(|scope| {
        for _ in 0..spec.parallelism.min(cells.len()) {
            scope.spawn(|| loop {
                let i = {
                    let mut s = state.lock().expect("sweep state");
                    let i = s.0;
                    if i >= cells.len() {
                        return;
                    }
                    s.0 += 1;
                    s.1.runs[i].status = RunStatus::Running;
                    save(&s.1);
                    i
                };
                let result = execute_run(&cells[i], root, &BasisInput::None, false);
                let mut s = state.lock().expect("sweep state");
                match result {
                    Ok(o) => s.1.runs[i].status = o.artifacts.manifest.status,
                    Err(e) => {
                        log::error!("run {} failed: {e}", s.1.runs[i].run_id);
                        s.1.runs[i].status = RunStatus::Failed;
                        s.1.runs[i].error = Some(e.to_string());
                    }
                }
                save(&s.1);
            });
        }
    });
    let manifest = state.into_inner().expect("sweep state").1;
    save(&manifest);
    let runs: Vec<RunArtifacts> = manifest
        .runs
        .iter()
        .filter(|e| e.status == RunStatus::Done)
        .filter_map(|e| RunArtifacts::load(&e.dir).ok())
        .collect();
    if !runs.is_empty() {
        let analysis = analyze_runs(&runs, &Default::default())?;
        write_analysis(&dir, &runs, &analysis)?;
    }
    Ok(manifest)
}

/// Run manifests of a sweep's cells (as last recorded).
pub fn sweep_runs(manifest: &SweepManifest) -> Vec<Option<RunManifest>> {
    manifest
        .runs
        .iter()
        .map(|e| super::artifacts::read_manifest(&e.dir).ok())
        .collect()
}
