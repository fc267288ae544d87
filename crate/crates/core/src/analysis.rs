//! Onset detection, lead-time statistics, sign test and power-law fit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::median;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnsetRule {
    pub baseline_n: usize,
    pub mult: f64,
    pub floor: f64,
}

impl Default for OnsetRule {
    fn default() -> Self {
        Self {
            baseline_n: 3,
            mult: 10.0,
            floor: 20.0,
        }
    }
}

impl OnsetRule {
    /// Median of the first `baseline_n` measurements.
    pub fn baseline(&self, series: &[(u64, f64)]) -> Result<f64> {
        if self.baseline_n == 0 || series.len() < self.baseline_n {
            return Err(Error::InsufficientData(format!(
                "onset needs {} baseline measurements, series has {}",
                self.baseline_n,
                series.len()
            )));
        }
        let base: Vec<f64> = series[..self.baseline_n].iter().map(|x| x.1).collect();
        Ok(median(&base))
    }

    pub fn threshold(&self, baseline: f64) -> f64 {
        (self.mult * baseline).max(self.floor)
    }

    /// First step whose value exceeds `max(mult × baseline, floor)`.
    pub fn detect(&self, series: &[(u64, f64)]) -> Result<Option<u64>> {
        let t = self.threshold(self.baseline(series)?);
        Ok(series.iter().find(|x| x.1 > t).map(|x| x.0))
    }
}

pub fn detect_onset(series: &[(u64, f64)], baseline_n: usize, mult: f64, floor: f64) -> Result<Option<u64>> {
    OnsetRule {
        baseline_n,
        mult,
        floor,
    }
    .detect(series)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnsetReport {
    pub onset_step: Option<u64>,
    pub baseline: f64,
    pub grok_step: Option<u64>,
    /// `t_grok − t_onset`.
    pub lead_time: Option<i64>,
    /// `lead_time / t_grok`.
    pub lead_fraction: Option<f64>,
}

pub fn onset_report(series: &[(u64, f64)], grok_step: Option<u64>, rule: &OnsetRule) -> Result<OnsetReport> {
    let baseline = rule.baseline(series)?;
    let onset_step = rule.detect(series)?;
    let lead_time = match (onset_step, grok_step) {
        (Some(o), Some(g)) => Some(g as i64 - o as i64),
        _ => None,
    };
    let lead_fraction = match (lead_time, grok_step) {
        (Some(l), Some(g)) if g > 0 => Some(l as f64 / g as f64),
        _ => None,
    };
    Ok(OnsetReport {
        onset_step,
        baseline,
        grok_step,
        lead_time,
        lead_fraction,
    })
}

/// Largest value over the baseline (median of the first `baseline_n`),
/// considering only steps up to `until` when given.
pub fn defect_growth(series: &[(u64, f64)], baseline_n: usize, until: Option<u64>) -> Result<f64> {
    let rule = OnsetRule {
        baseline_n,
        ..OnsetRule::default()
    };
    let base = rule.baseline(series)?;
    let max = series
        .iter()
        .filter(|x| until.is_none_or(|u| x.0 <= u))
        .map(|x| x.1)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(max / base)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupLeads {
    pub leads: Vec<i64>,
    pub mean_lead: Option<f64>,
    pub n_positive: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadStats {
    pub mean_lead: Option<f64>,
    pub mean_lead_fraction: Option<f64>,
    pub n_with_lead: usize,
    pub n_positive: usize,
    /// Runs that never grokked; excluded from lead statistics.
    pub n_no_grok: usize,
    /// Runs whose defect crossed the onset threshold without grokking.
    pub n_onset_without_grok: usize,
    /// Grokked runs whose defect never crossed the threshold.
    pub n_grok_without_onset: usize,
    pub per_group: BTreeMap<String, GroupLeads>,
}

/// Aggregates lead times over labelled runs (e.g. labelled by operation).
pub fn lead_stats(runs: &[(String, OnsetReport)]) -> LeadStats {
    let mut per_group: BTreeMap<String, GroupLeads> = BTreeMap::new();
    let mut leads = Vec::new();
    let mut fractions = Vec::new();
    let (mut n_no_grok, mut n_onset_without_grok, mut n_grok_without_onset) = (0, 0, 0);
    for (label, r) in runs {
        match (r.grok_step, r.onset_step) {
            (None, onset) => {
                n_no_grok += 1;
                if onset.is_some() {
                    n_onset_without_grok += 1;
                }
            }
            (Some(_), None) => n_grok_without_onset += 1,
            (Some(_), Some(_)) => {}
        }
        if let Some(l) = r.lead_time {
            leads.push(l);
            if let Some(f) = r.lead_fraction {
                fractions.push(f);
            }
            let g = per_group.entry(label.clone()).or_default();
            g.leads.push(l);
        }
    }
    for g in per_group.values_mut() {
        g.n_positive = g.leads.iter().filter(|&&l| l > 0).count();
        g.mean_lead = mean(g.leads.iter().map(|&l| l as f64));
    }
    LeadStats {
        mean_lead: mean(leads.iter().map(|&l| l as f64)),
        mean_lead_fraction: mean(fractions.iter().copied()),
        n_with_lead: leads.len(),
        n_positive: leads.iter().filter(|&&l| l > 0).count(),
        n_no_grok,
        n_onset_without_grok,
        n_grok_without_onset,
        per_group,
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = it.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One-sided sign test: `P(X ≥ n_positive)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test(n_positive: usize, n: usize) -> Result<f64> {
    if n == 0 || n_positive > n {
        return Err(Error::InvalidConfig(format!("sign test with {n_positive} of {n}")));
    }
    if n > 1000 {
        return Err(Error::InvalidConfig("sign test limited to n ≤ 1000".into()));
    }
    // C(n, k) from k = n downwards, so the n-of-n tail is exactly 1
    let mut c = 1.0f64;
    let mut tail = 0.0;
    for k in (n_positive..=n).rev() {
        tail += c;
        c = c * k as f64 / (n - k + 1) as f64;
    }
    Ok((tail * 0.5f64.powi(n as i32)).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub alpha_stderr: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
    /// Points dropped because a coordinate was not positive.
    pub n_excluded: usize,
}

/// Ordinary least squares of `ln Δt` on `ln t_grok`.
pub fn power_law_fit(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    let kept: Vec<(f64, f64)> = points
        .iter()
        .filter(|(t, l)| *t > 0.0 && *l > 0.0 && t.is_finite() && l.is_finite())
        .map(|(t, l)| (t.ln(), l.ln()))
        .collect();
    let n_excluded = points.len() - kept.len();
    if n_excluded > 0 {
        log::warn!("power-law fit excluded {n_excluded} non-positive points");
    }
    let n = kept.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "power-law fit needs ≥ 3 points, has {n}"
        )));
    }
    let nf = n as f64;
    let mx = kept.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = kept.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = kept.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = kept.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = kept.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::InsufficientData(
            "power-law fit needs distinct t_grok values".into(),
        ));
    }
    let alpha = sxy / sxx;
    let intercept = my - alpha * mx;
    let ss_res: f64 = kept.iter().map(|p| (p.1 - intercept - alpha * p.0).powi(2)).sum();
    let r_squared = if syy > 0.0 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let alpha_stderr = (ss_res / (nf - 2.0) / sxx).sqrt();
    Ok(PowerLawFit {
        alpha,
        alpha_stderr,
        intercept,
        r_squared,
        n_points: n,
        n_excluded,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn series(values: &[f64]) -> Vec<(u64, f64)> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| (200 * (i as u64 + 1), v))
            .collect()
    }

    #[test]
    fn onset_examples() {
        let s = series(&[1.0, 1.0, 1.0, 5.0, 30.0, 100.0]);
        assert_eq!(detect_onset(&s, 3, 10.0, 20.0).unwrap(), Some(1000));
        assert_eq!(
            detect_onset(&series(&[1.0, 5.0, 19.0, 20.0]), 3, 10.0, 20.0).unwrap(),
            None
        );
        assert!(detect_onset(&series(&[1.0]), 3, 10.0, 20.0).is_err());
        // a large baseline raises the threshold above the floor
        let s = series(&[5.0, 5.0, 5.0, 40.0, 51.0]);
        assert_eq!(detect_onset(&s, 3, 10.0, 20.0).unwrap(), Some(1000));
    }

    #[test]
    fn report_and_leads() {
        let rule = OnsetRule::default();
        let mut s = series(&[1.0; 9]);
        s.push((2000, 30.0));
        let r = onset_report(&s, Some(3600), &rule).unwrap();
        assert_eq!(r.onset_step, Some(2000));
        assert_eq!(r.lead_time, Some(1600));
        assert!((r.lead_fraction.unwrap() - 1600.0 / 3600.0).abs() < 1e-15);
        let none = onset_report(&s, None, &rule).unwrap();
        let stats = lead_stats(&[("add".into(), r), ("mul".into(), none)]);
        assert_eq!(stats.mean_lead, Some(1600.0));
        assert_eq!(stats.n_no_grok, 1);
        assert_eq!(stats.n_onset_without_grok, 1);
        assert_eq!(stats.n_positive, 1);
        assert_eq!(stats.per_group["add"].leads, vec![1600]);
        assert!(!stats.per_group.contains_key("mul"));
    }

    #[test]
    fn sign_test_examples() {
        assert_eq!(sign_test(12, 12).unwrap(), 2f64.powi(-12));
        assert!((sign_test(12, 12).unwrap() - 2.44e-4).abs() < 1e-6);
        assert_eq!(sign_test(1, 2).unwrap(), 0.75);
        assert_eq!(sign_test(0, 5).unwrap(), 1.0);
        assert!(sign_test(1, 0).is_err());
    }

    #[test]
    fn power_law_examples() {
        let pts: Vec<(f64, f64)> = (1..=10)
            .map(|i| (500.0 * i as f64, 0.3 * (500.0 * i as f64).powf(1.27)))
            .collect();
        let fit = power_law_fit(&pts).unwrap();
        assert!((fit.alpha - 1.27).abs() < 1e-10);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!((fit.intercept - 0.3f64.ln()).abs() < 1e-9);

        let flat: Vec<(f64, f64)> = (1..=5).map(|i| (i as f64 * 100.0, 700.0)).collect();
        let fit = power_law_fit(&flat).unwrap();
        assert!(fit.alpha.abs() < 1e-12);

        let mut with_bad = pts.clone();
        with_bad.push((1000.0, -5.0));
        assert_eq!(power_law_fit(&with_bad).unwrap().n_excluded, 1);
        assert!(power_law_fit(&pts[..2]).is_err());
    }

    #[test]
    fn growth_over_baseline() {
        let s = series(&[2.0, 1.0, 3.0, 50.0, 400.0]);
        assert_eq!(defect_growth(&s, 3, None).unwrap(), 200.0);
        assert_eq!(defect_growth(&s, 3, Some(800)).unwrap(), 25.0);
    }

    proptest! {
        #[test]
        fn sign_test_all_positive(n in 1usize..60) {
            prop_assert_eq!(sign_test(n, n).unwrap(), 0.5f64.powi(n as i32));
        }

        #[test]
        fn raising_the_floor_never_moves_onset_earlier(
            values in proptest::collection::vec(0.0f64..200.0, 4..30),
            f1 in 0.0f64..100.0,
            df in 0.0f64..100.0,
        ) {
            let s = series(&values);
            let lo = detect_onset(&s, 3, 10.0, f1).unwrap();
            let hi = detect_onset(&s, 3, 10.0, f1 + df).unwrap();
            if let Some(h) = hi {
                prop_assert!(lo.is_some_and(|l| l <= h));
            }
        }

        #[test]
        fn fit_ignores_time_units(c in 0.01f64..100.0, seed in 0u64..1000) {
            let pts: Vec<(f64, f64)> = (1..8)
                .map(|i| {
                    let t = 300.0 * i as f64;
                    (t, t.powf(1.1) * (1.0 + 0.1 * (((seed + i) % 7) as f64 - 3.0) / 3.0))
                })
                .collect();
            let scaled: Vec<(f64, f64)> = pts.iter().map(|(t, l)| (c * t, c * l)).collect();
            let a = power_law_fit(&pts).unwrap();
            let b = power_law_fit(&scaled).unwrap();
            prop_assert!((a.alpha - b.alpha).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&a.r_squared));
        }
    }
}
