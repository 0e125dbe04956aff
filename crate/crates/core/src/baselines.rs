//! Classical reference predictors: nearest measured direction, subject
//! selection by matching error, and two-point linear interpolation.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::HrtfBundle;
use crate::dsp::{self, DspError};
use crate::features::{ild_scalar, FeatureKind, Measurements};
use crate::graphs::{angular_distance, Direction};
use crate::metrics::lsd;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("no measured directions")]
    NoMeasurements,
    #[error("linear interpolation needs at least two measured directions, got {0}")]
    TooFewSamples(usize),
    #[error("no candidate subjects for selection")]
    NoCandidates,
    #[error("ITD selection needs HRIRs for the target and every candidate")]
    MissingHrirs,
    #[error("measurement lists disagree: {0}")]
    Misaligned(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    NearestNeighbor,
    SelectionLsd,
    SelectionItd,
    SelectionIld,
    LinearInterp,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::NearestNeighbor,
        BaselineKind::SelectionLsd,
        BaselineKind::SelectionItd,
        BaselineKind::SelectionIld,
        BaselineKind::LinearInterp,
    ];

    /// Method name used on the command line.
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::NearestNeighbor => "nn",
            BaselineKind::SelectionLsd => "sel-lsd",
            BaselineKind::SelectionItd => "sel-itd",
            BaselineKind::SelectionIld => "sel-ild",
            BaselineKind::LinearInterp => "lininterp",
        }
    }

    pub fn selection_kind(self) -> Option<FeatureKind> {
        match self {
            BaselineKind::SelectionLsd => Some(FeatureKind::Lsd),
            BaselineKind::SelectionItd => Some(FeatureKind::Itd),
            BaselineKind::SelectionIld => Some(FeatureKind::Ild),
            _ => None,
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| format!("unknown baseline `{s}`"))
    }
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Measured spectra with the directions they were taken at.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseField<'a> {
    pub directions: Vec<Direction>,
    /// Bundle direction indices, used for tie-breaking.
    pub indices: Vec<usize>,
    pub spectra: Vec<&'a [f64]>,
}

impl<'a> SparseField<'a> {
    pub fn from_bundle(bundle: &'a HrtfBundle, subject: usize, subset: &[usize]) -> Self {
        Self {
            directions: subset.iter().map(|&d| bundle.directions()[d]).collect(),
            indices: subset.to_vec(),
            spectra: subset.iter().map(|&d| bundle.magnitude(subject, d)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.spectra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectra.is_empty()
    }

    /// Positions sorted by angular distance to `query`, ties by direction index.
    fn ranked(&self, query: Direction) -> Vec<(f64, usize)> {
        let mut r: Vec<(f64, usize)> =
            self.directions.iter().map(|&d| angular_distance(d, query)).zip(0..self.len()).collect();
        r.sort_by(|a, b| by_distance_then_index(&(a.0, self.indices[a.1]), &(b.0, self.indices[b.1])));
        r
    }
}

/// The target's own measurement at the measured direction closest to `query`.
pub fn nearest_neighbor(measured: &SparseField, query: Direction) -> Result<Vec<f64>, BaselineError> {
    let (_, i) = *measured.ranked(query).first().ok_or(BaselineError::NoMeasurements)?;
    Ok(measured.spectra[i].to_vec())
}

/// Per-direction matching error between two subjects' measurements.
fn matching_error(kind: FeatureKind, a: &Measurements, b: &Measurements) -> Result<f64, BaselineError> {
    let n = a.spectra.len();
    let errs: Vec<f64> = match kind {
        FeatureKind::Lsd => a.spectra.iter().zip(&b.spectra).map(|(x, y)| lsd(x, y)).collect(),
        FeatureKind::Ild => {
            a.spectra.iter().zip(&b.spectra).map(|(x, y)| (ild_scalar(x) - ild_scalar(y)).abs()).collect()
        }
        FeatureKind::Itd => {
            let (Some(ha), Some(hb)) = (&a.hrirs, &b.hrirs) else {
                return Err(BaselineError::MissingHrirs);
            };
            ha.iter()
                .zip(hb)
                .map(|(x, y)| Ok((dsp::estimate_itd(x)? - dsp::estimate_itd(y)?).abs()))
                .collect::<Result<_, DspError>>()?
        }
    };
    Ok(errs.iter().sum::<f64>() / n.max(1) as f64)
}

/// Candidate with the smallest mean matching error over the measured subset.
/// Ties go to the lexicographically smaller subject id.
pub fn hrtf_selection(
    bundle: &HrtfBundle,
    target: &Measurements,
    candidates: &[usize],
    kind: FeatureKind,
) -> Result<usize, BaselineError> {
    if target.directions.is_empty() {
        return Err(BaselineError::NoMeasurements);
    }
    let mut best: Option<(f64, usize)> = None;
    for &c in candidates {
        let m = Measurements::from_bundle(bundle, c, &target.directions);
        let e = matching_error(kind, target, &m)?;
        let better = match best {
            None => true,
            Some((be, bc)) => e < be || (e == be && bundle.subjects()[c] < bundle.subjects()[bc]),
        };
        if better {
            best = Some((e, c));
        }
    }
    best.map(|(_, c)| c).ok_or(BaselineError::NoCandidates)
}

/// Blend weights over measured positions for `query`.
///
/// The two nearest samples are taken from the measured elevation ring closest
/// to the query's elevation and blended by inverse angular distance. A ring
/// holding a single sample borrows the nearest remaining sample overall.
pub fn linear_interp_weights(measured: &SparseField, query: Direction) -> Result<Vec<(usize, f64)>, BaselineError> {
    if measured.len() < 2 {
        return Err(BaselineError::TooFewSamples(measured.len()));
    }
    let ranked = measured.ranked(query);
    if ranked[0].0 == 0.0 {
        return Ok(vec![(ranked[0].1, 1.0)]);
    }
    let ring_el = measured
        .directions
        .iter()
        .map(|d| d.elevation())
        .min_by(|a, b| (a - query.elevation()).abs().total_cmp(&(b - query.elevation()).abs()).then(a.total_cmp(b)))
        .expect("nonempty");
    let mut pair: Vec<(f64, usize)> =
        ranked.iter().copied().filter(|&(_, i)| measured.directions[i].elevation() == ring_el).take(2).collect();
    if pair.len() < 2 {
        let extra = ranked.iter().copied().find(|r| !pair.contains(r)).expect("at least two samples");
        pair.push(extra);
    }
    let (d0, d1) = (pair[0].0, pair[1].0);
    if d0 == 0.0 {
        return Ok(vec![(pair[0].1, 1.0)]);
    }
    let w0 = d1 / (d0 + d1);
    Ok(vec![(pair[0].1, w0), (pair[1].1, 1.0 - w0)])
}

pub fn linear_interp(measured: &SparseField, query: Direction) -> Result<Vec<f64>, BaselineError> {
    let w = linear_interp_weights(measured, query)?;
    let k = measured.spectra[0].len();
    let mut out = vec![0.0; k];
    for (i, wi) in w {
        for (o, v) in out.iter_mut().zip(measured.spectra[i]) {
            *o += wi * v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(dirs: &[(f64, f64)], spectra: &[Vec<f64>]) -> (Vec<Direction>, Vec<Vec<f64>>) {
        (dirs.iter().map(|&(a, e)| Direction::new(a, e).unwrap()).collect(), spectra.to_vec())
    }

    #[test]
    fn interp_midpoint_averages() {
        let (dirs, spectra) =
            field(&[(0.0, 0.0), (40.0, 0.0), (0.0, 60.0)], &[vec![0.0; 4], vec![2.0; 4], vec![9.0; 4]]);
        let f = SparseField {
            directions: dirs,
            indices: vec![0, 1, 2],
            spectra: spectra.iter().map(|s| s.as_slice()).collect(),
        };
        let y = linear_interp(&f, Direction::new(20.0, 0.0).unwrap()).unwrap();
        assert!(y.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let w = linear_interp_weights(&f, Direction::new(10.0, 5.0).unwrap()).unwrap();
        assert!((w.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|p| p.0 != 2));
    }

    #[test]
    fn nn_copies_nearest() {
        let (dirs, spectra) = field(&[(0.0, 0.0), (90.0, 0.0)], &[vec![1.0; 2], vec![2.0; 2]]);
        let f = SparseField {
            directions: dirs,
            indices: vec![3, 7],
            spectra: spectra.iter().map(|s| s.as_slice()).collect(),
        };
        assert_eq!(nearest_neighbor(&f, Direction::new(80.0, 10.0).unwrap()).unwrap(), vec![2.0; 2]);
        assert_eq!(nearest_neighbor(&f, Direction::new(45.0, 0.0).unwrap()).unwrap(), vec![1.0; 2]);
    }
}
