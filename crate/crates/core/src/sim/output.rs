//! CSV files read by the plotting scripts.

use std::io::Write;
use std::path::Path;

use super::experiments::{ComparisonReport, EpisodeSummary, ExperimentResult, SweepKind, SweepPoint, TrackingTrial};
use super::{EpisodeTrace, SimError};
use crate::drl::LearningCurveRow;

fn f(v: f64) -> String {
    format!("{v}")
}

/// One row per slot; per-user columns are suffixed with the user index.
pub fn write_trace<W: Write>(w: W, trace: &EpisodeTrace) -> Result<(), SimError> {
    let mut out = csv::Writer::from_writer(w);
    let n_users = trace.n_embb + trace.n_urllc;
    let mut header: Vec<String> = [
        "slot", "prbs_embb", "prbs_urllc", "F", "G", "h", "drift_plus_penalty", "slack", "lambda_l",
        "lagrangian", "reward_embb", "reward_urllc",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..n_users).map(|i| format!("rate_{i}")));
    for col in ["backlog", "delay", "violation", "delay_steps", "adjusted", "di", "tracking_error"] {
        header.extend((0..trace.n_urllc).map(|i| format!("urllc_{col}_{i}")));
    }
    header.extend((0..trace.n_embb).map(|i| format!("embb_backlog_{i}")));
    out.write_record(&header)?;
    for r in &trace.records {
        let mut row = vec![
            r.slot.to_string(),
            r.prbs_embb.to_string(),
            r.prbs_urllc.to_string(),
            f(r.f),
            f(r.g),
            f(r.cost_h),
            f(r.drift_plus_penalty),
            f(r.slack),
            f(r.lambda_l),
            f(r.lagrangian),
            f(r.reward_embb.value),
            f(r.reward_urllc.value),
        ];
        row.extend(r.rates.iter().map(|&v| f(v)));
        row.extend(r.urllc_backlog.iter().map(|&v| f(v)));
        row.extend(r.delays.iter().map(|&v| f(v)));
        row.extend(r.violations.iter().map(|&v| u8::from(v).to_string()));
        row.extend(r.delay_steps.iter().map(|v| v.to_string()));
        row.extend(r.adjusted.iter().map(|&v| u8::from(v).to_string()));
        row.extend(r.di.iter().map(|&v| f(v)));
        row.extend(r.tracking_error.iter().map(|&v| f(v)));
        row.extend(r.embb_backlog.iter().map(|&v| f(v)));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// `policy,seed,slot,F,G`.
pub fn write_queue_trace<W: Write>(w: W, traces: &[EpisodeTrace]) -> Result<(), SimError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["policy", "seed", "slot", "F", "G"])?;
    for t in traces {
        for r in &t.records {
            out.write_record([t.policy.to_string(), t.seed.to_string(), r.slot.to_string(), f(r.f), f(r.g)])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Empirical CDF: `policy,slice,rate_mbps,cdf`.
pub fn write_rates_cdf<W: Write>(w: W, results: &[&ExperimentResult]) -> Result<(), SimError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["policy", "slice", "rate_mbps", "cdf"])?;
    for res in results {
        for (slice, samples) in [("embb", &res.rate_cdf_embb), ("urllc", &res.rate_cdf_urllc)] {
            let n = samples.len() as f64;
            for (i, &v) in samples.iter().enumerate() {
                out.write_record([res.policy.to_string(), slice.to_string(), f(v), f((i + 1) as f64 / n)])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-episode summaries: `policy,seed,<metrics...>`.
pub fn write_summaries<W: Write>(w: W, results: &[&ExperimentResult]) -> Result<(), SimError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["policy".to_string(), "seed".to_string()];
    header.extend(EpisodeSummary::METRICS.iter().map(|m| m.to_string()));
    out.write_record(&header)?;
    for res in results {
        for e in &res.episodes {
            let mut row = vec![res.policy.to_string(), e.seed.to_string()];
            row.extend(e.metric_values().iter().map(|&v| f(v)));
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `policy,seed,violation_frequency,rate_urllc_mbps,rate_embb_mbps`.
pub fn write_violations<W: Write>(w: W, report: &ComparisonReport) -> Result<(), SimError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["policy", "seed", "violation_frequency", "rate_urllc_mbps", "rate_embb_mbps"])?;
    for res in [&report.drl, &report.pf] {
        for e in &res.episodes {
            out.write_record([
                res.policy.to_string(),
                e.seed.to_string(),
                f(e.violation_frequency),
                f(e.rate_urllc_mbps),
                f(e.rate_embb_mbps),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Long format: `value,metric,mean,std,reps`.
pub fn write_sweep<W: Write>(w: W, points: &[SweepPoint]) -> Result<(), SimError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["value", "metric", "mean", "std", "reps"])?;
    for p in points {
        for m in EpisodeSummary::METRICS {
            let (mean, sd) = p.result.stat(m);
            out.write_record([p.value.clone(), m.to_string(), f(mean), f(sd), p.result.episodes.len().to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn sweep_file_name(kind: SweepKind) -> String {
    format!("sweep_{kind}.csv")
}

/// `seed,step,delay_steps,error_nominal,error_adjusted`.
pub fn write_tracking<W: Write>(w: W, trials: &[TrackingTrial]) -> Result<(), SimError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["seed", "step", "delay_steps", "error_nominal", "error_adjusted"])?;
    for t in trials {
        for r in &t.rows {
            out.write_record([
                r.seed.to_string(),
                r.step.to_string(),
                r.delay_steps.to_string(),
                f(r.error_nominal),
                f(r.error_adjusted),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `episode,reward_embb,reward_urllc,F_mean,G_mean,lambda_l`.
pub fn write_learning_curve<W: Write>(w: W, rows: &[LearningCurveRow]) -> Result<(), SimError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    if rows.is_empty() {
        out.write_record(["episode", "reward_embb", "reward_urllc", "F_mean", "G_mean", "lambda_l"])?;
    }
    out.flush()?;
    Ok(())
}

/// Create `path` and hand a buffered writer to `write`.
pub fn to_file<F>(path: &Path, write: F) -> Result<(), SimError>
where
    F: FnOnce(std::io::BufWriter<std::fs::File>) -> Result<(), SimError>,
{
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write(std::io::BufWriter::new(std::fs::File::create(path)?))
}
