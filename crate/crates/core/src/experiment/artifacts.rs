use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, fmt_opt_f64, parse_opt_f64, read_json, write_atomic, write_json};
use crate::probe::{Checkpoint, DefectRecord};
use crate::train::{MetricRow, RunStatus};

use super::config::RunConfig;

pub const CONFIG: &str = "config.json";
pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.csv";
pub const DEFECT: &str = "defect.csv";
pub const EVENTS: &str = "events.json";
pub const SNAPSHOTS: &str = "snapshots";
pub const PCA_SUMMARY: &str = "pca_summary.csv";
pub const INTERVENTION: &str = "intervention.json";
pub const FINAL_STEM: &str = "final";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub grok_step: Option<u64>,
    pub memorization_step: Option<u64>,
    pub onset_step: Option<u64>,
    pub stopped_step: u64,
    pub final_test_acc: f64,
    pub max_test_acc: f64,
    pub max_defect: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub dir: PathBuf,
    pub status: RunStatus,
    pub summary: Option<RunSummary>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Events {
    pub memorization_step: Option<u64>,
    pub grok_step: Option<u64>,
    pub onset_step: Option<u64>,
    pub stopped_step: u64,
    pub early_stopped: bool,
    pub status: RunStatus,
    pub failure: Option<String>,
    /// Strategic probe checkpoints (memorization, onset, grok, post-grok).
    pub checkpoints: Vec<(Checkpoint, u64)>,
    pub batch_hash: String,
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::from("step,train_loss,train_acc,test_loss,test_acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step,
            fmt_f64(r.train_loss),
            fmt_f64(r.train_acc),
            fmt_f64(r.test_loss),
            fmt_f64(r.test_acc)
        ));
    }
    write_atomic(path, out.as_bytes())
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| Error::MissingArtifact {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(csv::Reader::from_reader(f))
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, path: &Path) -> Result<&'a str> {
    rec.get(i)
        .ok_or_else(|| Error::InvalidConfig(format!("{}: row has no column {i}", path.display())))
}

fn req_f64(s: &str) -> Result<f64> {
    parse_opt_f64(s)?.ok_or_else(|| Error::InvalidConfig("empty numeric field".into()))
}

fn parse_u64(s: &str) -> Result<u64> {
    s.trim()
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("bad integer `{s}`: {e}")))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for rec in open_csv(path)?.records() {
        let rec = rec?;
        let f = |i| field(&rec, i, path);
        rows.push(MetricRow {
            step: parse_u64(f(0)?)?,
            train_loss: parse_opt_f64(f(1)?)?.unwrap_or(f64::NAN),
            train_acc: req_f64(f(2)?)?,
            test_loss: parse_opt_f64(f(3)?)?.unwrap_or(f64::NAN),
            test_acc: req_f64(f(4)?)?,
        });
    }
    Ok(rows)
}

pub fn write_defect(path: &Path, rows: &[DefectRecord]) -> Result<()> {
    let mut out = String::from("step,D_med,rho,exec_frac,rand_frac,exec_rand_ratio,alignment,n_valid_samples\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step,
            fmt_opt_f64(r.d_med),
            fmt_opt_f64(r.rho),
            fmt_opt_f64(r.exec_frac),
            fmt_opt_f64(r.rand_frac),
            fmt_opt_f64(r.exec_rand_ratio),
            fmt_opt_f64(r.alignment),
            r.n_valid_samples
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_defect(path: &Path) -> Result<Vec<DefectRecord>> {
    let mut rows = Vec::new();
    for rec in open_csv(path)?.records() {
        let rec = rec?;
        let f = |i| field(&rec, i, path);
        rows.push(DefectRecord {
            step: parse_u64(f(0)?)?,
            d_med: parse_opt_f64(f(1)?)?,
            rho: parse_opt_f64(f(2)?)?,
            exec_frac: parse_opt_f64(f(3)?)?,
            rand_frac: parse_opt_f64(f(4)?)?,
            exec_rand_ratio: parse_opt_f64(f(5)?)?,
            alignment: parse_opt_f64(f(6)?)?,
            n_valid_samples: parse_u64(f(7)?)? as usize,
            basis_k: None,
        });
    }
    Ok(rows)
}

/// A completed run loaded back from its directory.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub manifest: RunManifest,
    pub metrics: Vec<MetricRow>,
    pub defect: Vec<DefectRecord>,
    pub events: Events,
}

impl RunArtifacts {
    pub fn load(dir: &Path) -> Result<Self> {
        let defect_path = dir.join(DEFECT);
        Ok(Self {
            dir: dir.to_path_buf(),
            config: read_json(&dir.join(CONFIG))?,
            manifest: read_json(&dir.join(MANIFEST))?,
            metrics: read_metrics(&dir.join(METRICS))?,
            defect: if defect_path.exists() {
                read_defect(&defect_path)?
            } else {
                Vec::new()
            },
            events: read_json(&dir.join(EVENTS))?,
        })
    }

    /// `(step, D_med)` of every probe with a valid median.
    pub fn defect_series(&self) -> Vec<(u64, f64)> {
        self.defect
            .iter()
            .filter_map(|r| r.d_med.map(|d| (r.step, d)))
            .collect()
    }

    pub fn is_done(&self) -> bool {
        self.manifest.status == RunStatus::Done
    }
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    write_json(&dir.join(MANIFEST), manifest)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    read_json(&dir.join(MANIFEST))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(METRICS);
        let rows = vec![
            MetricRow {
                step: 0,
                train_loss: 4.5749,
                train_acc: 0.01,
                test_loss: 1.0 / 3.0,
                test_acc: 0.0,
            },
            MetricRow {
                step: 100,
                train_loss: 1e-17,
                train_acc: 1.0,
                test_loss: 2.0,
                test_acc: 0.5,
            },
        ];
        write_metrics(&p, &rows).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), rows);
    }

    #[test]
    fn defect_round_trip_keeps_missing_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(DEFECT);
        let rows = vec![DefectRecord {
            step: 200,
            d_med: Some(3.25),
            rho: None,
            exec_frac: None,
            rand_frac: None,
            exec_rand_ratio: None,
            alignment: Some(0.1),
            n_valid_samples: 9,
            basis_k: None,
        }];
        write_defect(&p, &rows).unwrap();
        assert_eq!(read_defect(&p).unwrap(), rows);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,D_med,rho,exec_frac,rand_frac,exec_rand_ratio,alignment,n_valid_samples\n"));
    }
}
