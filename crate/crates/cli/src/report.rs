use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use quadrgp::sim::{compute_metrics, EpisodeLog, EpisodeMetrics, Variant};
use serde::{Deserialize, Serialize};

use crate::suite::{LOG_DIR, POSTERIOR_DIR};

pub const TABLE_FILE: &str = "table.csv";
pub const COVARIANCE_FILE: &str = "covariance.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const INDEX_FILE: &str = "report.json";

const VARIANTS: [Variant; 3] = [Variant::Nominal, Variant::Gp, Variant::Rgp];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub stem: String,
    pub error: String,
}

/// Deterministic part of [`EpisodeMetrics`] (no wall-clock timing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub rmse_mm: f64,
    pub rmse_axis_mm: [f64; 3],
    pub cov_v_e: [f64; 3],
    pub v_peak: f64,
    pub rejected: usize,
}

impl From<&EpisodeMetrics> for EpisodeSummary {
    fn from(m: &EpisodeMetrics) -> Self {
        Self {
            rmse_mm: m.rmse_mm,
            rmse_axis_mm: m.rmse_axis_mm,
            cov_v_e: m.cov_v_e,
            v_peak: m.v_peak,
            rejected: m.rejected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub stem: String,
    pub trajectory: String,
    pub v_max: f64,
    pub variant: Variant,
    pub seed: u64,
    pub steps: usize,
    pub steps_planned: usize,
    pub failure: Option<String>,
    pub metrics: Option<EpisodeSummary>,
    /// Every applied input was inside `[0, 1]⁴`.
    pub inputs_in_bounds: bool,
    /// Artifact paths relative to the output directory.
    pub files: Vec<String>,
}

impl EpisodeEntry {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none() && self.steps == self.steps_planned && self.metrics.is_some()
    }
}

/// Machine-readable index of one output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub episodes: Vec<EpisodeEntry>,
    pub failures: Vec<CellFailure>,
    pub table: String,
    pub covariance: String,
    pub timing: String,
    pub all_succeeded: bool,
}

fn variant_rank(v: Variant) -> usize {
    VARIANTS.iter().position(|x| *x == v).unwrap_or(VARIANTS.len())
}

fn entry_for(out: &Path, stem: &str) -> Result<(EpisodeEntry, EpisodeLog)> {
    let log = EpisodeLog::read_files(&out.join(LOG_DIR), stem).with_context(|| format!("reading log {stem}"))?;
    let h = &log.header;
    let mut files = vec![
        format!("{LOG_DIR}/{stem}.csv"),
        format!("{LOG_DIR}/{stem}.json"),
        format!("{LOG_DIR}/{stem}_timing.csv"),
    ];
    for tag in ["start", "end"] {
        let p = format!("{POSTERIOR_DIR}/{stem}_{tag}.json");
        if out.join(&p).is_file() {
            files.push(p);
        }
    }
    let metrics = compute_metrics(&log).ok().map(|m| EpisodeSummary::from(&m));
    let entry = EpisodeEntry {
        stem: stem.into(),
        trajectory: h.trajectory.clone(),
        v_max: h.v_max,
        variant: h.variant,
        seed: h.seed,
        steps: log.rows.len(),
        steps_planned: h.steps_planned,
        failure: h.failure.clone(),
        metrics,
        inputs_in_bounds: log.rows.iter().all(|r| r.u.iter().all(|u| (0.0..=1.0).contains(u))),
        files,
    };
    Ok((entry, log))
}

/// Stems of all episode logs under `out/logs`.
pub fn list_stems(out: &Path) -> Result<Vec<String>> {
    let dir = out.join(LOG_DIR);
    let mut stems = vec![];
    if !dir.is_dir() {
        return Ok(stems);
    }
    for e in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".json") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    Ok(stems)
}

fn pct(x: f64, nominal: f64) -> String {
    format!("{:.0}%", 100.0 * x / nominal)
}

/// Table of mean RMSE per (trajectory, v_max) with percentages relative to nominal.
pub fn aggregate_table(entries: &[EpisodeEntry]) -> String {
    let mut groups: BTreeMap<(String, u64), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.succeeded()) {
        let key = (e.trajectory.clone(), (e.v_max * 1e3).round() as u64);
        groups
            .entry(key)
            .or_default()
            .entry(variant_rank(e.variant))
            .or_default()
            .push(e.metrics.as_ref().unwrap().rmse_mm);
    }
    let mut s = String::from("trajectory,v_max,nominal_rmse_mm,nominal_pct,gp_rmse_mm,gp_pct,rgp_rmse_mm,rgp_pct,seeds\n");
    for ((traj, v), by_variant) in &groups {
        let mean = |r: usize| by_variant.get(&r).map(|xs| xs.iter().sum::<f64>() / xs.len() as f64);
        let nominal = mean(0);
        let seeds = by_variant.values().map(Vec::len).max().unwrap_or(0);
        let _ = write!(s, "{traj},{}", *v as f64 / 1e3);
        for r in 0..VARIANTS.len() {
            match (mean(r), nominal) {
                (Some(x), Some(n)) => {
                    let _ = write!(s, ",{x:.3},{}", pct(x, n));
                }
                (Some(x), None) => {
                    let _ = write!(s, ",{x:.3},");
                }
                _ => s.push_str(",,"),
            }
        }
        let _ = writeln!(s, ",{seeds}");
    }
    s
}

/// Per-episode |cov(v_d, e_d)| against peak speed.
pub fn covariance_table(entries: &[EpisodeEntry]) -> String {
    let mut s = String::from("trajectory,v_max,variant,seed,v_peak,cov_x,cov_y,cov_z,rmse_mm\n");
    for e in entries.iter().filter(|e| e.succeeded()) {
        let m = e.metrics.as_ref().unwrap();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            e.trajectory, e.v_max, e.variant, e.seed, m.v_peak, m.cov_v_e[0], m.cov_v_e[1], m.cov_v_e[2], m.rmse_mm
        );
    }
    s
}

fn timing_table(logs: &[(EpisodeEntry, EpisodeLog)]) -> String {
    let mut s = String::from("stem,mean_solve_ms,mean_update_ms,mean_step_ms,max_step_ms\n");
    for (e, log) in logs {
        let n = log.timing.len().max(1) as f64;
        let step: Vec<f64> = log.timing.iter().map(|t| 1e3 * (t.solve_time + t.update_time)).collect();
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{:.4},{:.4}",
            e.stem,
            1e3 * log.timing.iter().map(|t| t.solve_time).sum::<f64>() / n,
            1e3 * log.timing.iter().map(|t| t.update_time).sum::<f64>() / n,
            step.iter().sum::<f64>() / n,
            step.iter().cloned().fold(0.0, f64::max),
        );
    }
    s
}

/// Recomputes every summary from the logs in `out` and writes the table,
/// covariance summary, timing summary and the report index.
pub fn write_report(out: &Path, extra_failures: &[CellFailure]) -> Result<Report> {
    let mut logs = vec![];
    for stem in list_stems(out)? {
        logs.push(entry_for(out, &stem)?);
    }
    logs.sort_by(|(a, _), (b, _)| {
        (a.trajectory.as_str(), a.v_max, a.seed, variant_rank(a.variant))
            .partial_cmp(&(b.trajectory.as_str(), b.v_max, b.seed, variant_rank(b.variant)))
            .unwrap()
    });
    let entries: Vec<EpisodeEntry> = logs.iter().map(|(e, _)| e.clone()).collect();

    let mut failures = extra_failures.to_vec();
    for e in entries.iter().filter(|e| !e.succeeded()) {
        failures.push(CellFailure {
            stem: e.stem.clone(),
            error: e
                .failure
                .clone()
                .unwrap_or_else(|| format!("episode stopped after {} of {} steps", e.steps, e.steps_planned)),
        });
    }
    failures.sort_by(|a, b| a.stem.cmp(&b.stem));

    fs::write(out.join(TABLE_FILE), aggregate_table(&entries))?;
    fs::write(out.join(COVARIANCE_FILE), covariance_table(&entries))?;
    fs::write(out.join(TIMING_FILE), timing_table(&logs))?;
    let report = Report {
        all_succeeded: failures.is_empty() && !entries.is_empty(),
        episodes: entries,
        failures,
        table: TABLE_FILE.into(),
        covariance: COVARIANCE_FILE.into(),
        timing: TIMING_FILE.into(),
    };
    fs::write(out.join(INDEX_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

pub fn read_report(out: &Path) -> Result<Report> {
    let text = fs::read_to_string(out.join(INDEX_FILE)).with_context(|| format!("reading report in {}", out.display()))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(traj: &str, v: f64, variant: Variant, seed: u64, rmse: f64) -> EpisodeEntry {
        EpisodeEntry {
            stem: format!("{traj}_{v}_{variant}_{seed}"),
            trajectory: traj.into(),
            v_max: v,
            variant,
            seed,
            steps: 10,
            steps_planned: 10,
            failure: None,
            metrics: Some(EpisodeSummary {
                rmse_mm: rmse,
                rmse_axis_mm: [0.0; 3],
                cov_v_e: [0.1, 0.2, 0.3],
                v_peak: v,
                rejected: 0,
            }),
            inputs_in_bounds: true,
            files: vec![],
        }
    }

    #[test]
    fn nominal_only_row_is_self_relative() {
        let t = aggregate_table(&[entry("circle", 3.0, Variant::Nominal, 0, 12.5)]);
        let row = t.lines().nth(1).unwrap();
        assert_eq!(row, "circle,3,12.500,100%,,,,,1");
    }

    #[test]
    fn percentages_are_variant_over_nominal() {
        let t = aggregate_table(&[
            entry("circle", 3.0, Variant::Nominal, 0, 57.5),
            entry("circle", 3.0, Variant::Gp, 0, 23.6),
            entry("circle", 3.0, Variant::Rgp, 0, 30.0),
        ]);
        let row: Vec<&str> = t.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[5], "41%");
        assert_eq!(row[7], "52%");
    }

    #[test]
    fn seeds_are_averaged_and_failures_skipped() {
        let mut failed = entry("random", 6.0, Variant::Rgp, 2, 1.0);
        failed.failure = Some("diverged".into());
        let t = aggregate_table(&[
            entry("random", 6.0, Variant::Nominal, 0, 10.0),
            entry("random", 6.0, Variant::Nominal, 1, 20.0),
            entry("random", 6.0, Variant::Rgp, 0, 6.0),
            entry("random", 6.0, Variant::Rgp, 1, 9.0),
            failed,
        ]);
        assert_eq!(t.lines().nth(1).unwrap(), "random,6,15.000,100%,,,7.500,50%,2");
    }

    #[test]
    fn empty_directory_reports_no_success() {
        let dir = tempfile::tempdir().unwrap();
        let r = write_report(dir.path(), &[]).unwrap();
        assert!(!r.all_succeeded);
        assert!(r.episodes.is_empty());
        assert_eq!(read_report(dir.path()).unwrap(), r);
    }
}
