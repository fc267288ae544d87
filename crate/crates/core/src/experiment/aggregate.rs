use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    defect_growth, lead_stats, onset_report, power_law_fit, sign_test, LeadStats, OnsetReport, OnsetRule, PowerLawFit,
};
use crate::data::Operation;
use crate::error::{Error, Result};
use crate::io::{fmt_f64, fmt_opt_f64, fmt_opt_u64, write_atomic, write_json};

use super::artifacts::RunArtifacts;

pub const ANALYSIS: &str = "analysis.json";
pub const PHASE_DIAGRAM: &str = "phase_diagram.csv";
pub const SCALING: &str = "scaling.csv";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOptions {
    pub rule: OnsetRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAnalysis {
    pub run_id: String,
    pub op: Operation,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub grokked: bool,
    pub max_defect: Option<f64>,
    /// Peak defect over the baseline, up to the grok step (or the whole run).
    pub growth: Option<f64>,
    /// `None` when the run has too few probe measurements.
    pub onset: Option<OnsetReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub op: Operation,
    pub lr: f64,
    pub n_runs: usize,
    pub grok_fraction: f64,
    pub mean_grok_step: Option<f64>,
    pub mean_lead_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub rule: OnsetRule,
    pub runs: Vec<RunAnalysis>,
    pub leads: LeadStats,
    /// One-sided sign test over runs with a lead time.
    pub sign_test_p: Option<f64>,
    /// Fit of lead time against grok step over grokked runs with an onset.
    pub power_law: Option<PowerLawFit>,
    pub cells: Vec<CellStats>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn analyze_run(run: &RunArtifacts, rule: &OnsetRule) -> Result<RunAnalysis> {
    let series = run.defect_series();
    let grok = run.events.grok_step;
    let (onset, growth) = if series.len() >= rule.baseline_n {
        (
            Some(onset_report(&series, grok, rule)?),
            Some(defect_growth(&series, rule.baseline_n, grok)?),
        )
    } else {
        (None, None)
    };
    let t = &run.config.train;
    Ok(RunAnalysis {
        run_id: run.manifest.run_id.clone(),
        op: run.config.op,
        lr: t.lr,
        weight_decay: t.weight_decay,
        seed: t.seed,
        grokked: grok.is_some(),
        max_defect: series.iter().map(|x| x.1).reduce(f64::max),
        growth,
        onset,
    })
}

pub fn analyze_runs(runs: &[RunArtifacts], opts: &AnalyzeOptions) -> Result<Analysis> {
    if runs.is_empty() {
        return Err(Error::InsufficientData("analysis needs at least one run".into()));
    }
    let per_run = runs
        .iter()
        .map(|r| analyze_run(r, &opts.rule))
        .collect::<Result<Vec<_>>>()?;
    let labelled: Vec<(String, OnsetReport)> = per_run
        .iter()
        .filter_map(|r| r.onset.clone().map(|o| (format!("{}/lr{}", r.op, r.lr), o)))
        .collect();
    let leads = lead_stats(&labelled);
    let sign_test_p = (leads.n_with_lead > 0)
        .then(|| sign_test(leads.n_positive, leads.n_with_lead))
        .transpose()?;
    let points: Vec<(f64, f64)> = per_run
        .iter()
        .filter_map(|r| r.onset.as_ref())
        .filter_map(|o| Some((o.grok_step? as f64, o.lead_time? as f64)))
        .collect();
    let power_law = match power_law_fit(&points) {
        Ok(f) => Some(f),
        Err(Error::InsufficientData(m)) => {
            log::info!("no power-law fit: {m}");
            None
        }
        Err(e) => return Err(e),
    };

    let mut groups: BTreeMap<(String, u64), Vec<&RunAnalysis>> = BTreeMap::new();
    for r in &per_run {
        groups.entry((r.op.to_string(), r.lr.to_bits())).or_default().push(r);
    }
    let cells = groups
        .into_values()
        .map(|rs| {
            let grok_steps: Vec<f64> = rs
                .iter()
                .filter_map(|r| r.onset.as_ref().and_then(|o| o.grok_step))
                .map(|g| g as f64)
                .collect();
            let n_grok = rs.iter().filter(|r| r.grokked).count();
            let fractions: Vec<f64> = rs
                .iter()
                .filter_map(|r| r.onset.as_ref().and_then(|o| o.lead_fraction))
                .collect();
            CellStats {
                op: rs[0].op,
                lr: rs[0].lr,
                n_runs: rs.len(),
                grok_fraction: n_grok as f64 / rs.len() as f64,
                mean_grok_step: mean(&grok_steps),
                mean_lead_fraction: mean(&fractions),
            }
        })
        .collect();
    Ok(Analysis {
        rule: opts.rule,
        runs: per_run,
        leads,
        sign_test_p,
        power_law,
        cells,
    })
}

/// Writes `analysis.json`, `phase_diagram.csv` and `scaling.csv` into `dir`.
pub fn write_analysis(dir: &Path, runs: &[RunArtifacts], analysis: &Analysis) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join(ANALYSIS), analysis)?;

    let mut phase = String::from("lr,op,seed,grokked,grok_step,max_defect,onset_step,lead\n");
    for (run, a) in runs.iter().zip(&analysis.runs) {
        let onset = a.onset.as_ref();
        phase.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            fmt_f64(a.lr),
            a.op,
            a.seed,
            a.grokked,
            fmt_opt_u64(run.events.grok_step),
            fmt_opt_f64(a.max_defect),
            fmt_opt_u64(onset.and_then(|o| o.onset_step)),
            onset.and_then(|o| o.lead_time).map_or(String::new(), |l| l.to_string()),
        ));
    }
    write_atomic(&dir.join(PHASE_DIAGRAM), phase.as_bytes())?;

    let mut scaling = String::from("run_id,op,lr,seed,grok_step,lead,lead_fraction,in_fit\n");
    for a in &analysis.runs {
        let Some(o) = &a.onset else { continue };
        let (Some(g), Some(l)) = (o.grok_step, o.lead_time) else {
            continue;
        };
        scaling.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            a.run_id,
            a.op,
            fmt_f64(a.lr),
            a.seed,
            g,
            l,
            fmt_opt_f64(o.lead_fraction),
            l > 0,
        ));
    }
    write_atomic(&dir.join(SCALING), scaling.as_bytes())
}
