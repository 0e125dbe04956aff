//! Subject characteristics (ILD / ITD), LSD-ranked retrieval, clue vectors
//! and random Fourier feature encoding.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::dataset::HrtfBundle;
use crate::dsp::{self, Hrir};
use crate::graphs::{self, Direction, GraphError};
use crate::metrics::lsd;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("ITD features need HRIRs, which this data does not carry")]
    MissingHrirs,
    #[error("LSD retrieval ranks spectra directly and has no feature vector")]
    NotAVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("unknown feature kind `{0}`")]
    UnknownKind(String),
    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Ild,
    Itd,
    Lsd,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [FeatureKind::Ild, FeatureKind::Itd, FeatureKind::Lsd];

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Ild => "ild",
            FeatureKind::Itd => "itd",
            FeatureKind::Lsd => "lsd",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| FeatureError::UnknownKind(s.to_string()))
    }
}

/// Broadband interaural level difference: mean over bins of left − right dB.
pub fn ild_scalar(bins: &[f64]) -> f64 {
    let k = bins.len() / 2;
    let (l, r) = bins.split_at(k);
    l.iter().zip(r).map(|(a, b)| a - b).sum::<f64>() / k as f64
}

/// Sparse data available for one subject: spectra (and optionally HRIRs) at
/// a list of direction indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurements {
    pub directions: Vec<usize>,
    pub spectra: Vec<Vec<f64>>,
    pub hrirs: Option<Vec<Hrir>>,
}

impl Measurements {
    pub fn from_bundle(bundle: &HrtfBundle, subject: usize, subset: &[usize]) -> Self {
        let spectra = subset.iter().map(|&d| bundle.magnitude(subject, d).to_vec()).collect();
        let hrirs = if bundle.has_hrirs() {
            Some(subset.iter().map(|&d| bundle.hrir(subject, d).expect("hrirs present")).collect())
        } else {
            None
        };
        Self { directions: subset.to_vec(), spectra, hrirs }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectFeature {
    pub kind: FeatureKind,
    pub values: Vec<f64>,
    pub measured: Vec<usize>,
}

pub fn subject_feature(m: &Measurements, kind: FeatureKind) -> Result<SubjectFeature, FeatureError> {
    let values = match kind {
        FeatureKind::Ild => m.spectra.iter().map(|s| ild_scalar(s)).collect(),
        FeatureKind::Itd => {
            let hrirs = m.hrirs.as_ref().ok_or(FeatureError::MissingHrirs)?;
            hrirs.iter().map(dsp::estimate_itd).collect::<Result<_, _>>()?
        }
        FeatureKind::Lsd => return Err(FeatureError::NotAVector),
    };
    Ok(SubjectFeature { kind, values, measured: m.directions.clone() })
}

/// Per-component mean/std fitted on training subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..dim)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var.sqrt() > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, FeatureError> {
        if x.len() != self.mean.len() {
            return Err(FeatureError::Dimension { expected: self.mean.len(), got: x.len() });
        }
        Ok(x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect())
    }
}

/// Standardized features of every bundle subject at one measurement subset.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub kind: FeatureKind,
    pub subset: Vec<usize>,
    pub standardizer: Standardizer,
    /// Raw (unstandardized) features, indexed by bundle subject.
    pub raw: Vec<Vec<f64>>,
}

impl FeatureTable {
    /// Computes features for all subjects; standardization statistics come
    /// from `train` only.
    pub fn new(
        bundle: &HrtfBundle,
        subset: &[usize],
        kind: FeatureKind,
        train: &[usize],
    ) -> Result<Self, FeatureError> {
        let raw = (0..bundle.subject_count())
            .map(|s| subject_feature(&Measurements::from_bundle(bundle, s, subset), kind).map(|f| f.values))
            .collect::<Result<Vec<_>, _>>()?;
        let train_rows: Vec<Vec<f64>> = train.iter().map(|&s| raw[s].clone()).collect();
        Ok(Self { kind, subset: subset.to_vec(), standardizer: Standardizer::fit(&train_rows), raw })
    }

    pub fn standardized(&self, subject: usize) -> Vec<f64> {
        self.standardizer.apply(&self.raw[subject]).expect("same subset")
    }
}

/// Ranks `candidates` against the target's measurements and keeps `m`.
/// ILD/ITD use Euclidean distance of standardized features; LSD uses the
/// mean spectral distance over the measured directions.
pub fn retrieve(
    bundle: &HrtfBundle,
    candidates: &[usize],
    target: &Measurements,
    kind: FeatureKind,
    standardizer: &Standardizer,
    m: usize,
) -> Result<Vec<usize>, FeatureError> {
    if kind == FeatureKind::Lsd {
        if m == 0 || m > candidates.len() {
            return Err(GraphError::Retrieval(format!("M={m} with {} candidates", candidates.len())).into());
        }
        let scored = candidates.iter().map(|&c| (c, mean_lsd_to(bundle, c, target))).collect();
        return Ok(graphs::top_m_by_score(scored, m));
    }
    let t = standardizer.apply(&subject_feature(target, kind)?.values)?;
    let feats = candidates
        .iter()
        .map(|&c| {
            let f = subject_feature(&Measurements::from_bundle(bundle, c, &target.directions), kind)?;
            Ok((c, standardizer.apply(&f.values)?))
        })
        .collect::<Result<Vec<_>, FeatureError>>()?;
    Ok(graphs::retrieve_subjects(&feats, &t, m)?)
}

/// Retrieval from precomputed features of bundle subjects.
pub fn retrieve_from_table(
    bundle: &HrtfBundle,
    table: &FeatureTable,
    candidates: &[usize],
    target: usize,
    m: usize,
) -> Result<Vec<usize>, FeatureError> {
    if table.kind == FeatureKind::Lsd {
        let meas = Measurements::from_bundle(bundle, target, &table.subset);
        return retrieve(bundle, candidates, &meas, FeatureKind::Lsd, &table.standardizer, m);
    }
    let feats: Vec<(usize, Vec<f64>)> = candidates.iter().map(|&c| (c, table.standardized(c))).collect();
    Ok(graphs::retrieve_subjects(&feats, &table.standardized(target), m)?)
}

pub fn mean_lsd_to(bundle: &HrtfBundle, candidate: usize, target: &Measurements) -> f64 {
    let n = target.directions.len().max(1) as f64;
    target
        .directions
        .iter()
        .zip(&target.spectra)
        .map(|(&d, spec)| lsd(bundle.magnitude(candidate, d), spec))
        .sum::<f64>()
        / n
}

/// `[azimuth_rad, elevation_rad, features…]`.
pub fn build_clue(d: Direction, standardized_feature: &[f64]) -> Vec<f64> {
    let mut c = Vec::with_capacity(2 + standardized_feature.len());
    c.push(d.azimuth().to_radians());
    c.push(d.elevation().to_radians());
    c.extend_from_slice(standardized_feature);
    c
}

/// Frozen Gaussian projection `B` of shape `[F, in_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RffEncoder {
    b: Tensor,
}

impl RffEncoder {
    pub fn new<R: Rng>(in_dim: usize, frequencies: usize, sigma: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
        let data = (0..frequencies * in_dim).map(|_| normal.sample(rng)).collect();
        Self { b: Tensor::new(vec![frequencies, in_dim], data).expect("shape") }
    }

    pub fn from_matrix(b: Tensor) -> Result<Self, FeatureError> {
        if b.rank() != 2 {
            return Err(FeatureError::Dimension { expected: 2, got: b.rank() });
        }
        Ok(Self { b })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.b
    }

    pub fn in_dim(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        2 * self.b.shape()[0]
    }

    /// `[cos(2πBx); sin(2πBx)]`.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>, FeatureError> {
        if x.len() != self.in_dim() {
            return Err(FeatureError::Dimension { expected: self.in_dim(), got: x.len() });
        }
        let proj: Vec<f64> = (0..self.b.shape()[0])
            .map(|i| 2.0 * std::f64::consts::PI * self.b.row(i).iter().zip(x).map(|(b, v)| b * v).sum::<f64>())
            .collect();
        let mut out: Vec<f64> = proj.iter().map(|p| p.cos()).collect();
        out.extend(proj.iter().map(|p| p.sin()));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ild_examples() {
        assert_eq!(ild_scalar(&[1.0, 2.0, 1.0, 2.0]), 0.0);
        assert_eq!(ild_scalar(&[7.0, 8.0, 1.0, 2.0]), 6.0);
    }

    #[test]
    fn clue_layout() {
        let d = Direction::new(90.0, -45.0).unwrap();
        let c = build_clue(d, &[0.5; 5]);
        assert_eq!(c.len(), 7);
        assert!((c[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(build_clue(d, &[]).len(), 2);
    }

    #[test]
    fn rff_at_zero() {
        let enc = RffEncoder::new(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(enc.encode(&[0.0; 3]).unwrap(), vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(enc.encode(&[0.0; 2]).is_err());
    }

    #[test]
    fn standardizer_constant_column() {
        let s = Standardizer::fit(&[vec![1.0, 2.0], vec![1.0, 4.0]]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.apply(&[1.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("ILD".parse::<FeatureKind>().unwrap(), FeatureKind::Ild);
        assert!("foo".parse::<FeatureKind>().is_err());
    }
}
