//! HRTF bundles (portable on-disk format), synthetic generation and splits.

mod splits;
mod synth;

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, Hrir};
use crate::graphs::Direction;

pub use splits::{farthest_point_subset, make_splits, SplitFractions, SplitSpec};
pub use synth::{generate_synthetic, ring_grid, synthesize_hrir, woodworth_itd, SubjectParams, SyntheticConfig};

pub const BUNDLE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MAGNITUDES_FILE: &str = "magnitudes.f32";
pub const HRIRS_FILE: &str = "hrirs.f32";

/// Largest disagreement tolerated between stored magnitudes and those
/// recomputed from stored HRIRs. Both payloads are float32, so dB values near
/// ±100 carry quantization around 4e-6 dB.
pub const HRIR_CONSISTENCY_DB: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("unsupported bundle version {0}")]
    UnsupportedVersion(u64),
    #[error("shape mismatch in {what}: expected {expected} values, found {found}")]
    ShapeMismatch { what: &'static str, expected: usize, found: usize },
    #[error("invalid bundle: {0}")]
    Invalid(String),
}

/// Magnitudes `[|S|, |D|, 2K]` in dB, optional HRIRs `[|S|, |D|, 2, taps]`.
/// Every payload value is exactly representable in float32 so that a save
/// and load round trip is bitwise.
#[derive(Clone, Debug, PartialEq)]
pub struct HrtfBundle {
    subjects: Vec<String>,
    directions: Vec<Direction>,
    k: usize,
    sample_rate: f64,
    magnitudes: Vec<f64>,
    hrirs: Option<HrirPayload>,
    provenance: String,
}

#[derive(Clone, Debug, PartialEq)]
struct HrirPayload {
    taps: usize,
    data: Vec<f64>,
}

fn quantize(values: Vec<f64>) -> Vec<f64> {
    values.into_iter().map(|v| v as f32 as f64).collect()
}

impl HrtfBundle {
    pub fn new(
        subjects: Vec<String>,
        directions: Vec<Direction>,
        k: usize,
        sample_rate: f64,
        magnitudes: Vec<f64>,
        provenance: impl Into<String>,
    ) -> Result<Self, BundleError> {
        let bundle = Self {
            subjects,
            directions,
            k,
            sample_rate,
            magnitudes: quantize(magnitudes),
            hrirs: None,
            provenance: provenance.into(),
        };
        bundle.validate_structure()?;
        Ok(bundle)
    }

    /// Attaches HRIRs laid out as `[|S|, |D|, 2, taps]`.
    pub fn with_hrirs(mut self, taps: usize, data: Vec<f64>) -> Result<Self, BundleError> {
        let expected = self.subjects.len() * self.directions.len() * 2 * taps;
        if data.len() != expected || taps == 0 {
            return Err(BundleError::ShapeMismatch { what: "hrirs", expected, found: data.len() });
        }
        self.hrirs = Some(HrirPayload { taps, data: quantize(data) });
        Ok(self)
    }

    fn validate_structure(&self) -> Result<(), BundleError> {
        if self.k == 0 {
            return Err(BundleError::Invalid("K must be positive".into()));
        }
        if !(self.sample_rate > 0.0) {
            return Err(BundleError::Invalid(format!("sample rate {}", self.sample_rate)));
        }
        let mut seen = HashSet::new();
        for s in &self.subjects {
            if !seen.insert(s.as_str()) {
                return Err(BundleError::Invalid(format!("duplicate subject id {s}")));
            }
        }
        for (i, a) in self.directions.iter().enumerate() {
            if self.directions[..i].contains(a) {
                return Err(BundleError::Invalid(format!("duplicate direction ({}, {})", a.azimuth(), a.elevation())));
            }
        }
        let expected = self.subjects.len() * self.directions.len() * 2 * self.k;
        if self.magnitudes.len() != expected {
            return Err(BundleError::ShapeMismatch { what: "magnitudes", expected, found: self.magnitudes.len() });
        }
        if self.magnitudes.iter().any(|v| !v.is_finite()) {
            return Err(BundleError::Invalid("non-finite magnitude".into()));
        }
        Ok(())
    }

    /// Full validation including the HRIR/magnitude consistency check.
    pub fn validate(&self) -> Result<(), BundleError> {
        self.validate_structure()?;
        if self.hrirs.is_none() {
            return Ok(());
        }
        for s in 0..self.subject_count() {
            for d in 0..self.direction_count() {
                let h = self.hrir(s, d).expect("hrirs present");
                let mag = dsp::hrir_to_magnitude(&h, self.k)
                    .map_err(|e| BundleError::Invalid(format!("subject {s}, direction {d}: {e}")))?;
                let worst = mag.bins.iter().zip(self.magnitude(s, d)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if worst > HRIR_CONSISTENCY_DB {
                    return Err(BundleError::Invalid(format!(
                        "subject {s}, direction {d}: HRIR magnitude off by {worst} dB"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn subject_count(&self) -> usize {
        self.subjects.len()
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s == id)
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn direction_count(&self) -> usize {
        self.directions.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn has_hrirs(&self) -> bool {
        self.hrirs.is_some()
    }

    pub fn taps(&self) -> usize {
        self.hrirs.as_ref().map_or(0, |h| h.taps)
    }

    /// dB magnitudes of subject `s` at direction `d` (length 2K).
    pub fn magnitude(&self, s: usize, d: usize) -> &[f64] {
        let w = 2 * self.k;
        let start = (s * self.directions.len() + d) * w;
        &self.magnitudes[start..start + w]
    }

    /// All directions of subject `s`, one row per direction.
    pub fn subject_field(&self, s: usize) -> Vec<Vec<f64>> {
        (0..self.direction_count()).map(|d| self.magnitude(s, d).to_vec()).collect()
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn hrir(&self, s: usize, d: usize) -> Option<Hrir> {
        let p = self.hrirs.as_ref()?;
        let start = (s * self.directions.len() + d) * 2 * p.taps;
        let left = p.data[start..start + p.taps].to_vec();
        let right = p.data[start + p.taps..start + 2 * p.taps].to_vec();
        Some(Hrir { left, right, sample_rate: self.sample_rate })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u64,
    subjects: Vec<String>,
    directions: Vec<[f64; 2]>,
    #[serde(rename = "K")]
    k: usize,
    sample_rate: f64,
    has_hrirs: bool,
    taps: usize,
    provenance: String,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BundleError + '_ {
    move |source| BundleError::Io { path: path.display().to_string(), source }
}

fn write_f32(path: &Path, values: &[f64]) -> Result<(), BundleError> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_f32(path: &Path, what: &'static str, expected: usize) -> Result<Vec<f64>, BundleError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(BundleError::ShapeMismatch { what, expected, found: bytes.len() / 4 });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

/// Writes `bundle` as a directory (created if missing).
pub fn save_bundle(bundle: &HrtfBundle, dir: &Path) -> Result<(), BundleError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest {
        version: BUNDLE_VERSION as u64,
        subjects: bundle.subjects.clone(),
        directions: bundle.directions.iter().map(|&d| d.into()).collect(),
        k: bundle.k,
        sample_rate: bundle.sample_rate,
        has_hrirs: bundle.has_hrirs(),
        taps: bundle.taps(),
        provenance: bundle.provenance.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    write_f32(&dir.join(MAGNITUDES_FILE), &bundle.magnitudes)?;
    let hrir_path = dir.join(HRIRS_FILE);
    match &bundle.hrirs {
        Some(p) => write_f32(&hrir_path, &p.data)?,
        None if hrir_path.exists() => fs::remove_file(&hrir_path).map_err(io_err(&hrir_path))?,
        None => {}
    }
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<HrtfBundle, BundleError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| BundleError::MalformedManifest(e.to_string()))?;
    match raw.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == BUNDLE_VERSION as u64 => {}
        Some(v) => return Err(BundleError::UnsupportedVersion(v)),
        None => return Err(BundleError::MalformedManifest("missing integer \"version\"".into())),
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| BundleError::MalformedManifest(e.to_string()))?;
    let directions = m
        .directions
        .iter()
        .map(|&[az, el]| Direction::new(az, el))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| BundleError::MalformedManifest(e.to_string()))?;
    let (s, d) = (m.subjects.len(), directions.len());
    let magnitudes = read_f32(&dir.join(MAGNITUDES_FILE), "magnitudes", s * d * 2 * m.k)?;
    let mut bundle = HrtfBundle::new(m.subjects, directions, m.k, m.sample_rate, magnitudes, m.provenance)?;
    if m.has_hrirs {
        if m.taps == 0 {
            return Err(BundleError::MalformedManifest("has_hrirs with taps = 0".into()));
        }
        let data = read_f32(&dir.join(HRIRS_FILE), "hrirs", s * d * 2 * m.taps)?;
        bundle = bundle.with_hrirs(m.taps, data)?;
    }
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> HrtfBundle {
        let dirs = vec![
            Direction::new(0.0, 0.0).unwrap(),
            Direction::new(90.0, 0.0).unwrap(),
            Direction::new(180.0, 0.0).unwrap(),
            Direction::new(270.0, 30.0).unwrap(),
        ];
        let mags = (0..2 * 4 * 8).map(|i| (i as f64 * 0.37).sin() * 10.0).collect();
        HrtfBundle::new(vec!["a".into(), "b".into()], dirs, 4, 48000.0, mags, "test").unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = tiny();
        save_bundle(&b, dir.path()).unwrap();
        assert_eq!(load_bundle(dir.path()).unwrap(), b);
    }

    #[test]
    fn truncated_payload_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&tiny(), dir.path()).unwrap();
        let p = dir.path().join(MAGNITUDES_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 2 * 8 * 4]).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(BundleError::ShapeMismatch { .. })));
    }

    #[test]
    fn version_and_manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&tiny(), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, text.replace("\"version\": 1", "\"version\": 2")).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(BundleError::UnsupportedVersion(2))));
        fs::write(&p, "{ not json").unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(BundleError::MalformedManifest(_))));
    }

    #[test]
    fn duplicates_rejected() {
        let d = Direction::new(0.0, 0.0).unwrap();
        let err = HrtfBundle::new(vec!["a".into()], vec![d, d], 1, 1.0, vec![0.0; 4], "").unwrap_err();
        assert!(matches!(err, BundleError::Invalid(_)));
        let err = HrtfBundle::new(vec!["a".into(), "a".into()], vec![d], 1, 1.0, vec![0.0; 4], "").unwrap_err();
        assert!(matches!(err, BundleError::Invalid(_)));
    }
}
