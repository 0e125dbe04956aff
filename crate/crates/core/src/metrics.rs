//! Log-spectral distortion, ILD error and evaluation reports.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::features::ild_scalar;
use crate::graphs::Direction;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("I/O error writing {path}: {source}")]
    Io { path: String, source: io::Error },
}

/// Root-mean-square dB difference over all bins.
pub fn lsd(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "LSD operands differ in length");
    let n = pred.len().max(1) as f64;
    (pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n).sqrt()
}

pub fn ild_error(pred: &[f64], truth: &[f64]) -> f64 {
    (ild_scalar(pred) - ild_scalar(truth)).abs()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalEntry {
    pub subject: String,
    pub direction_index: usize,
    pub direction: Direction,
    pub lsd_db: f64,
    pub ild_err_db: f64,
}

/// Per-direction errors over non-measured directions plus aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub zeta: f64,
    pub entries: Vec<EvalEntry>,
    pub mean_lsd: f64,
    pub mean_ild_err: f64,
}

/// Scores one subject's predicted field. Directions listed in `measured` are
/// inputs and are skipped.
pub fn evaluate_subject(
    subject: &str,
    directions: &[Direction],
    predictions: &[Vec<f64>],
    truth: &[Vec<f64>],
    measured: &[usize],
) -> Result<Vec<EvalEntry>, MetricsError> {
    if predictions.len() != directions.len() || truth.len() != directions.len() {
        return Err(MetricsError::Misaligned(format!(
            "{} predictions, {} truths, {} directions",
            predictions.len(),
            truth.len(),
            directions.len()
        )));
    }
    let mut out = Vec::new();
    for (i, ((p, t), &d)) in predictions.iter().zip(truth).zip(directions).enumerate() {
        if p.len() != t.len() {
            return Err(MetricsError::Misaligned(format!("direction {i}: {} vs {} bins", p.len(), t.len())));
        }
        if measured.contains(&i) {
            continue;
        }
        out.push(EvalEntry {
            subject: subject.to_string(),
            direction_index: i,
            direction: d,
            lsd_db: lsd(p, t),
            ild_err_db: ild_error(p, t),
        });
    }
    Ok(out)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn new(method: impl Into<String>, zeta: f64, entries: Vec<EvalEntry>) -> Self {
        let mean_lsd = mean(entries.iter().map(|e| e.lsd_db));
        let mean_ild_err = mean(entries.iter().map(|e| e.ild_err_db));
        Self { method: method.into(), zeta, entries, mean_lsd, mean_ild_err }
    }

    pub fn exceeds(&self, e: &EvalEntry) -> bool {
        e.lsd_db > self.zeta
    }

    pub fn exceed_count(&self) -> usize {
        self.entries.iter().filter(|e| self.exceeds(e)).count()
    }

    /// Subjects in first-appearance order with their mean LSD and ILD error.
    pub fn per_subject(&self) -> Vec<(String, f64, f64)> {
        let mut ids: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !ids.contains(&e.subject.as_str()) {
                ids.push(&e.subject);
            }
        }
        ids.into_iter()
            .map(|id| {
                let rows = || self.entries.iter().filter(move |e| e.subject == id);
                (id.to_string(), mean(rows().map(|e| e.lsd_db)), mean(rows().map(|e| e.ild_err_db)))
            })
            .collect()
    }

    /// Number of subjects exceeding ζ at each evaluated direction index.
    pub fn exceedance_by_direction(&self) -> Vec<(usize, Direction, usize, usize)> {
        let mut rows: Vec<(usize, Direction, usize, usize)> = Vec::new();
        for e in &self.entries {
            let hit = usize::from(self.exceeds(e));
            match rows.iter_mut().find(|r| r.0 == e.direction_index) {
                Some(r) => {
                    r.2 += hit;
                    r.3 += 1;
                }
                None => rows.push((e.direction_index, e.direction, hit, 1)),
            }
        }
        rows.sort_by_key(|r| r.0);
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("subject,az,el,lsd_db,ild_err_db,exceeds_zeta\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                e.subject,
                e.direction.azimuth(),
                e.direction.elevation(),
                e.lsd_db,
                e.ild_err_db,
                self.exceeds(e)
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method: {}", self.method);
        let _ = writeln!(s, "evaluated directions: {}", self.entries.len());
        let _ = writeln!(s, "mean LSD [dB]: {:.4}", self.mean_lsd);
        let _ = writeln!(s, "mean ILD error [dB]: {:.4}", self.mean_ild_err);
        let _ = writeln!(s, "zeta [dB]: {}", self.zeta);
        let _ = writeln!(s, "entries with LSD > zeta: {}", self.exceed_count());
        for (id, l, i) in self.per_subject() {
            let _ = writeln!(s, "  {id}: LSD {l:.4}  ILD error {i:.4}");
        }
        s
    }

    /// Writes `<stem>.csv` and `<stem>_summary.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), MetricsError> {
        let write = |name: String, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|source| MetricsError::Io { path: path.display().to_string(), source })
        };
        write(format!("{stem}.csv"), self.to_csv())?;
        write(format!("{stem}_summary.txt"), self.summary())
    }
}
