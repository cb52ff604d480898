//! Per-step episode records and their CSV/JSON persistence.
//!
//! Wall-clock timings live in a separate file so that the main log is
//! byte-identical across reruns of the same configuration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::SimConfig;
use crate::dynamics::{StateVec, STATE_DIM};
use crate::error::{Error, Result};
use crate::estimator::Rejection;
use crate::trajectory::SampledTrajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub trajectory: String,
    pub v_max: f64,
    pub variant: super::Variant,
    pub seed: u64,
    pub code_version: String,
    pub steps_planned: usize,
    pub failure: Option<String>,
    pub config: SimConfig,
}

impl EpisodeHeader {
    pub fn new(cfg: &SimConfig, traj: &SampledTrajectory) -> Self {
        Self {
            trajectory: "custom".into(),
            v_max: traj.peak_speed(),
            variant: cfg.variant,
            seed: cfg.seed,
            code_version: env!("CARGO_PKG_VERSION").into(),
            steps_planned: traj.len(),
            failure: None,
            config: cfg.clone(),
        }
    }

    /// `{traj}_{vmax}_{variant}_{seed}`
    pub fn file_stem(&self) -> String {
        let v = (self.v_max * 1e3).round() / 1e3;
        format!("{}_{}_{}_{}", self.trajectory, v, self.variant, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    pub x_ref: StateVec,
    pub x_meas: StateVec,
    pub u: [f64; 4],
    pub a_tilde: Option<Vector3<f64>>,
    /// Body-frame velocity paired with `a_tilde`.
    pub v_obs: Option<Vector3<f64>>,
    pub rejection: Option<Rejection>,
    pub hash_used: String,
    pub hash_after: String,
    pub kkt_residual: f64,
    pub qp_iterations: usize,
    pub active_constraints: usize,
    pub qp_converged: bool,
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepTiming {
    pub solve_time: f64,
    pub update_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub header: EpisodeHeader,
    pub rows: Vec<StepRecord>,
    pub timing: Vec<StepTiming>,
}

const STATE_COLS: [&str; STATE_DIM] = [
    "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz",
];

fn header_row() -> Vec<String> {
    let mut h: Vec<String> = vec!["k".into(), "t".into()];
    h.extend(STATE_COLS.iter().map(|c| format!("ref_{c}")));
    h.extend(STATE_COLS.iter().map(|c| format!("meas_{c}")));
    h.extend((0..4).map(|i| format!("u{i}")));
    h.extend(["ax", "ay", "az", "obs_vx", "obs_vy", "obs_vz"].map(String::from));
    h.extend(
        [
            "rejection",
            "hash_used",
            "hash_after",
            "kkt_residual",
            "qp_iterations",
            "active_constraints",
            "qp_converged",
            "fallback",
        ]
        .map(String::from),
    );
    h
}

fn opt_vec(v: &Option<Vector3<f64>>) -> [String; 3] {
    match v {
        Some(v) => [v.x.to_string(), v.y.to_string(), v.z.to_string()],
        None => [String::new(), String::new(), String::new()],
    }
}

fn rejection_name(r: &Option<Rejection>) -> &'static str {
    match r {
        None => "",
        Some(Rejection::StepTooShort) => "step_too_short",
        Some(Rejection::NonFinite) => "non_finite",
    }
}

fn parse_f(s: &str, row: usize) -> Result<f64> {
    s.parse()
        .map_err(|e| Error::Parse(format!("log row {row}: '{s}': {e}")))
}

fn parse_opt_vec(cols: &[&str], row: usize) -> Result<Option<Vector3<f64>>> {
    if cols.iter().all(|c| c.is_empty()) {
        return Ok(None);
    }
    Ok(Some(Vector3::new(
        parse_f(cols[0], row)?,
        parse_f(cols[1], row)?,
        parse_f(cols[2], row)?,
    )))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

impl EpisodeLog {
    pub fn new(header: EpisodeHeader) -> Self {
        Self {
            header,
            rows: vec![],
            timing: vec![],
        }
    }

    pub fn push(&mut self, row: StepRecord, timing: StepTiming) {
        self.rows.push(row);
        self.timing.push(timing);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(header_row()).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec: Vec<String> = vec![r.k.to_string(), r.t.to_string()];
            rec.extend(r.x_ref.iter().map(|v| v.to_string()));
            rec.extend(r.x_meas.iter().map(|v| v.to_string()));
            rec.extend(r.u.iter().map(|v| v.to_string()));
            rec.extend(opt_vec(&r.a_tilde));
            rec.extend(opt_vec(&r.v_obs));
            rec.push(rejection_name(&r.rejection).into());
            rec.push(r.hash_used.clone());
            rec.push(r.hash_after.clone());
            rec.push(r.kkt_residual.to_string());
            rec.push(r.qp_iterations.to_string());
            rec.push(r.active_constraints.to_string());
            rec.push(r.qp_converged.to_string());
            rec.push(r.fallback.to_string());
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = vec![];
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
    }

    fn read_rows(text: &str) -> Result<Vec<StepRecord>> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header = rd.headers().map_err(csv_err)?.clone();
        if header.iter().collect::<Vec<_>>() != header_row() {
            return Err(Error::Parse("unexpected episode log header".into()));
        }
        let mut rows = vec![];
        for (i, rec) in rd.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let c: Vec<&str> = rec.iter().collect();
            let row = i + 2;
            let state = |off: usize| -> Result<StateVec> {
                let mut x = StateVec::zeros();
                for j in 0..STATE_DIM {
                    x[j] = parse_f(c[off + j], row)?;
                }
                Ok(x)
            };
            let rejection = match c[38] {
                "" => None,
                "step_too_short" => Some(Rejection::StepTooShort),
                "non_finite" => Some(Rejection::NonFinite),
                other => return Err(Error::Parse(format!("log row {row}: rejection '{other}'"))),
            };
            let parse_u = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("log row {row}: {e}")));
            let parse_b = |s: &str| s.parse::<bool>().map_err(|e| Error::Parse(format!("log row {row}: {e}")));
            rows.push(StepRecord {
                k: parse_u(c[0])?,
                t: parse_f(c[1], row)?,
                x_ref: state(2)?,
                x_meas: state(15)?,
                u: [
                    parse_f(c[28], row)?,
                    parse_f(c[29], row)?,
                    parse_f(c[30], row)?,
                    parse_f(c[31], row)?,
                ],
                a_tilde: parse_opt_vec(&c[32..35], row)?,
                v_obs: parse_opt_vec(&c[35..38], row)?,
                rejection,
                hash_used: c[39].to_string(),
                hash_after: c[40].to_string(),
                kkt_residual: parse_f(c[41], row)?,
                qp_iterations: parse_u(c[42])?,
                active_constraints: parse_u(c[43])?,
                qp_converged: parse_b(c[44])?,
                fallback: parse_b(c[45])?,
            });
        }
        Ok(rows)
    }

    fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf, PathBuf) {
        (
            dir.join(format!("{stem}.csv")),
            dir.join(format!("{stem}.json")),
            dir.join(format!("{stem}_timing.csv")),
        )
    }

    /// Writes `{stem}.csv`, `{stem}.json` and `{stem}_timing.csv`; returns the paths.
    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let (csv_path, json_path, timing_path) = Self::paths(dir, stem);
        self.write_csv(fs::File::create(&csv_path)?)?;
        let header = serde_json::to_string_pretty(&self.header)
            .map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(&json_path, header + "\n")?;
        let mut timing = String::from("k,solve_time,update_time\n");
        for (r, t) in self.rows.iter().zip(&self.timing) {
            timing.push_str(&format!("{},{},{}\n", r.k, t.solve_time, t.update_time));
        }
        fs::write(&timing_path, timing)?;
        Ok(vec![csv_path, json_path, timing_path])
    }

    /// Loads a log written by [`EpisodeLog::write_files`]. A missing timing
    /// file yields zero timings.
    pub fn read_files(dir: &Path, stem: &str) -> Result<Self> {
        let (csv_path, json_path, timing_path) = Self::paths(dir, stem);
        let header: EpisodeHeader = serde_json::from_str(&fs::read_to_string(json_path)?)
            .map_err(|e| Error::Parse(e.to_string()))?;
        let rows = Self::read_rows(&fs::read_to_string(csv_path)?)?;
        let timing = match fs::read_to_string(timing_path) {
            Ok(text) => {
                let mut out = vec![];
                for (i, line) in text.lines().skip(1).enumerate() {
                    let c: Vec<&str> = line.split(',').collect();
                    if c.len() != 3 {
                        return Err(Error::Parse(format!("timing row {}: bad column count", i + 2)));
                    }
                    out.push(StepTiming {
                        solve_time: parse_f(c[1], i + 2)?,
                        update_time: parse_f(c[2], i + 2)?,
                    });
                }
                out
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => vec![StepTiming::default(); rows.len()],
            Err(e) => return Err(e.into()),
        };
        if timing.len() != rows.len() {
            return Err(Error::Parse("timing and log row counts differ".into()));
        }
        Ok(Self { header, rows, timing })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::QuadParams;
    use crate::trajectory::circle_trajectory;

    fn sample_log() -> EpisodeLog {
        let cfg = SimConfig::default();
        let traj = circle_trajectory(10.0, 3.0, 100.0, 10.0, &QuadParams::default()).unwrap();
        let mut log = EpisodeLog::new(EpisodeHeader::new(&cfg, &traj));
        for k in 0..3 {
            log.push(
                StepRecord {
                    k,
                    t: k as f64 * 0.01,
                    x_ref: traj.x_ref[k],
                    x_meas: traj.x_ref[k] * 1.000_000_1,
                    u: [0.1, 0.2, 0.3, 1.0 / 3.0],
                    a_tilde: (k != 1).then(|| Vector3::new(-0.1, 1e-17, 3.0)),
                    v_obs: (k != 1).then(|| Vector3::new(0.5, -0.25, 0.0)),
                    rejection: (k == 1).then_some(Rejection::NonFinite),
                    hash_used: "abc".into(),
                    hash_after: "def".into(),
                    kkt_residual: 1.5e-7,
                    qp_iterations: 4,
                    active_constraints: 1,
                    qp_converged: true,
                    fallback: k == 2,
                },
                StepTiming { solve_time: 1e-4, update_time: 2e-5 },
            );
        }
        log
    }

    #[test]
    fn files_round_trip_exactly() {
        let dir = std::env::temp_dir().join(format!("quadrgp-log-{}", std::process::id()));
        let log = sample_log();
        let stem = log.header.file_stem();
        assert_eq!(stem, "custom_3_nominal_0");
        log.write_files(&dir, &stem).unwrap();
        let back = EpisodeLog::read_files(&dir, &stem).unwrap();
        assert_eq!(back, log);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn header_mismatch_is_a_parse_error() {
        assert!(matches!(EpisodeLog::read_rows("a,b\n1,2\n"), Err(Error::Parse(_))));
    }
}
