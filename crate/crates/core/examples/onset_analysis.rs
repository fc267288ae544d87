//! Onset detection, lead times, the sign test and the power-law fit on
//! synthetic defect series.

use grokgeom::analysis::{lead_stats, onset_report, power_law_fit, sign_test, OnsetRule};

fn main() -> grokgeom::Result<()> {
    let rule = OnsetRule::default();
    let mut reports = Vec::new();
    let mut points = Vec::new();
    for (i, &t_grok) in [1500u64, 2400, 3600, 6000, 9000, 15000].iter().enumerate() {
        let lead = (0.2 * (t_grok as f64).powf(1.1)).round() as u64;
        let onset = t_grok - lead;
        let series: Vec<(u64, f64)> = (0..=t_grok / 100)
            .map(|k| {
                let s = k * 100;
                let d = if s < onset {
                    2.0 + 0.01 * k as f64
                } else {
                    40.0 + (s - onset) as f64
                };
                (s, d)
            })
            .collect();
        let r = onset_report(&series, Some(t_grok), &rule)?;
        println!(
            "run {i}: onset {:?} grok {t_grok} lead {:?} fraction {:.3}",
            r.onset_step,
            r.lead_time,
            r.lead_fraction.unwrap_or(f64::NAN)
        );
        if let (Some(g), Some(l)) = (r.grok_step, r.lead_time) {
            points.push((g as f64, l as f64));
        }
        reports.push((format!("run{i}"), r));
    }
    let stats = lead_stats(&reports);
    println!(
        "mean lead {:.0}, {} of {} positive, sign test p = {:.2e}",
        stats.mean_lead.unwrap_or(f64::NAN),
        stats.n_positive,
        stats.n_with_lead,
        sign_test(stats.n_positive, stats.n_with_lead)?
    );
    let fit = power_law_fit(&points)?;
    println!(
        "lead ∝ t_grok^α: α = {:.3} ± {:.3}, R² = {:.3}, n = {}",
        fit.alpha, fit.alpha_stderr, fit.r_squared, fit.n_points
    );
    Ok(())
}
