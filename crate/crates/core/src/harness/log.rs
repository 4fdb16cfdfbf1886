use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::trial::{SweepResult, TrialResult};
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 9] = ["t", "xB", "vB", "phi", "phidot", "u", "force_meas", "force_pred", "theta_hat"];

/// One row of a run log; absent values are written as empty fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub state: [f64; 4],
    pub u: Option<f64>,
    pub force_meas: Option<f64>,
    pub force_pred: Option<f64>,
    pub theta_hat: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

impl RunLog {
    pub fn validate(&self) -> Result<()> {
        for w in self.rows.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::InvalidArgument(format!(
                    "log times must increase strictly: {} then {}",
                    w[0].t, w[1].t
                )));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![fmt(r.t)];
            rec.extend(r.state.iter().map(|v| fmt(*v)));
            rec.extend([r.u, r.force_meas, r.force_pred, r.theta_hat].map(fmt_opt));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let header = r.headers().map_err(csv_err)?.clone();
        if header.iter().ne(CSV_HEADER) {
            return Err(Error::InvalidArgument(format!("{}: unexpected header {header:?}", path.display())));
        }
        let bad = |line: usize, field: &str| {
            Error::InvalidArgument(format!("{}: line {line}: bad value {field:?}", path.display()))
        };
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let line = i + 2;
            let opt = |j: usize| -> Result<Option<f64>> {
                let s = rec.get(j).unwrap_or("");
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(line, s))
                }
            };
            let req = |j: usize| -> Result<f64> { opt(j)?.ok_or_else(|| bad(line, "")) };
            rows.push(LogRow {
                t: req(0)?,
                state: [req(1)?, req(2)?, req(3)?, req(4)?],
                u: opt(5)?,
                force_meas: opt(6)?,
                force_pred: opt(7)?,
                theta_hat: opt(8)?,
            });
        }
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub theta0: f64,
    pub use_estimation: bool,
    pub theta_final: f64,
    pub success: bool,
    pub terminal_mass: Option<[f64; 4]>,
    pub iters_trajopt: Option<usize>,
    pub cost_final: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDocument {
    pub trial: TrialSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepDocument {
    pub trials: Vec<TrialDocument>,
    pub mean_theta: f64,
    pub std_theta: f64,
}

impl From<&TrialResult> for TrialDocument {
    fn from(r: &TrialResult) -> Self {
        let exec = r.execution.as_ref();
        TrialDocument {
            trial: TrialSummary {
                theta0: r.theta0,
                use_estimation: r.use_estimation,
                theta_final: r.theta_final,
                success: r.success,
                terminal_mass: exec.map(|e| e.terminal_mass.into()),
                iters_trajopt: exec.map(|e| e.plan.iterations),
                cost_final: exec.map(|e| e.plan.cost),
            },
        }
    }
}

impl From<&SweepResult> for SweepDocument {
    fn from(s: &SweepResult) -> Self {
        SweepDocument {
            trials: s.trials.iter().map(TrialDocument::from).collect(),
            mean_theta: s.mean_theta,
            std_theta: s.std_theta,
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Writes `estimation.csv`, `plan.csv` and `execution.csv` (whichever exist)
/// and `summary.json` into `dir`. Returns the paths written.
pub fn write_logs(result: &TrialResult, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut written = Vec::new();
    let mut csv = |name: &str, log: &RunLog| -> Result<()> {
        let path = dir.join(name);
        log.write_csv(&path)?;
        written.push(path);
        Ok(())
    };
    if let Some(e) = &result.estimation {
        csv("estimation.csv", &e.log)?;
    }
    if let Some(x) = &result.execution {
        csv("plan.csv", &x.plan_log)?;
        csv("execution.csv", &x.log)?;
    }
    let path = dir.join("summary.json");
    write_json(&TrialDocument::from(result), &path)?;
    written.push(path);
    Ok(written)
}

/// Writes each trial into `dir/<with|without>_<theta0>/` and the sweep
/// summary into `dir/sweep.json`.
pub fn write_sweep(sweep: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut written = Vec::new();
    for t in &sweep.trials {
        let column = if t.use_estimation { "with" } else { "without" };
        written.extend(write_logs(t, &dir.join(format!("{column}_{:.3}", t.theta0)))?);
    }
    let path = dir.join("sweep.json");
    write_json(&SweepDocument::from(sweep), &path)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64) -> LogRow {
        LogRow {
            t,
            state: [0.1 + t, -1.0 / 3.0, 1e-300, -0.0],
            u: Some(std::f64::consts::PI * t),
            force_meas: None,
            force_pred: Some(0.49050000000000005),
            theta_hat: Some(0.368),
        }
    }

    #[test]
    fn empty_log_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        RunLog::default().write_csv(&path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().trim(), CSV_HEADER.join(","));
        assert_eq!(RunLog::read_csv(&path).unwrap(), RunLog::default());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let log = RunLog {
            rows: (0..20).map(|k| row(k as f64 * 0.01)).collect(),
        };
        log.write_csv(&path).unwrap();
        let back = RunLog::read_csv(&path).unwrap();
        for (a, b) in log.rows.iter().zip(&back.rows) {
            assert_eq!(a.t.to_bits(), b.t.to_bits());
            for (x, y) in a.state.iter().zip(&b.state) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(back, log);
    }

    #[test]
    fn non_increasing_time_is_rejected() {
        let log = RunLog {
            rows: vec![row(0.1), row(0.1)],
        };
        assert!(log.validate().is_err());
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "t,x\n0,1\n").unwrap();
        assert!(RunLog::read_csv(&path).is_err());
    }
}
