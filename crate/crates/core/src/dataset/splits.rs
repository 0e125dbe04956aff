use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BundleError, HrtfBundle};
use crate::graphs::{angular_distance, Direction};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.8, validation: 0.1, test: 0.1 }
    }
}

/// Subject partition plus the direction indices measured for test subjects.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub measured: Vec<usize>,
}

impl SplitSpec {
    /// Checks disjointness, membership and measurement indices against `bundle`.
    pub fn validate(&self, bundle: &HrtfBundle) -> Result<(), BundleError> {
        let mut all: Vec<&String> = self.train.iter().chain(&self.validation).chain(&self.test).collect();
        for id in &all {
            if bundle.subject_index(id).is_none() {
                return Err(BundleError::Invalid(format!("split names unknown subject {id}")));
            }
        }
        let n = all.len();
        all.sort();
        all.dedup();
        if all.len() != n {
            return Err(BundleError::Invalid("split subject lists overlap".into()));
        }
        let mut m = self.measured.clone();
        m.sort_unstable();
        m.dedup();
        if m.len() != self.measured.len() || m.iter().any(|&i| i >= bundle.direction_count()) {
            return Err(BundleError::Invalid("measurement subset has invalid or repeated indices".into()));
        }
        Ok(())
    }

    fn indices(bundle: &HrtfBundle, ids: &[String]) -> Vec<usize> {
        ids.iter().filter_map(|id| bundle.subject_index(id)).collect()
    }

    pub fn train_indices(&self, bundle: &HrtfBundle) -> Vec<usize> {
        Self::indices(bundle, &self.train)
    }

    pub fn validation_indices(&self, bundle: &HrtfBundle) -> Vec<usize> {
        Self::indices(bundle, &self.validation)
    }

    pub fn test_indices(&self, bundle: &HrtfBundle) -> Vec<usize> {
        Self::indices(bundle, &self.test)
    }
}

/// Greedy farthest-point sampling of `count` directions, seeded at the
/// direction nearest to (0°, 0°). Ties resolve to the lower index.
pub fn farthest_point_subset(directions: &[Direction], count: usize) -> Vec<usize> {
    if count == 0 || directions.is_empty() {
        return Vec::new();
    }
    let front = Direction::new(0.0, 0.0).expect("valid");
    let first = (0..directions.len())
        .min_by(|&a, &b| angular_distance(directions[a], front).total_cmp(&angular_distance(directions[b], front)))
        .expect("nonempty");
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = directions.iter().map(|&d| angular_distance(d, directions[first])).collect();
    while chosen.len() < count.min(directions.len()) {
        let mut best = None;
        for (i, &dist) in nearest.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            if best.is_none_or(|(_, b)| dist > b) {
                best = Some((i, dist));
            }
        }
        let (next, _) = best.expect("unchosen direction remains");
        chosen.push(next);
        for (i, n) in nearest.iter_mut().enumerate() {
            *n = n.min(angular_distance(directions[i], directions[next]));
        }
    }
    chosen
}

pub fn make_splits(
    bundle: &HrtfBundle,
    fractions: SplitFractions,
    measurement_count: usize,
    seed: u64,
) -> Result<SplitSpec, BundleError> {
    let SplitFractions { train, validation, test } = fractions;
    if [train, validation, test].iter().any(|f| !(0.0..=1.0).contains(f))
        || ((train + validation + test) - 1.0).abs() > 1e-9
    {
        return Err(BundleError::Invalid(format!("split fractions {train}/{validation}/{test} must sum to 1")));
    }
    let n = bundle.subject_count();
    let n_train = (train * n as f64).round() as usize;
    let n_val = (validation * n as f64).round() as usize;
    if n_train == 0 || n_train + n_val > n || (test > 0.0 && n_train + n_val == n) {
        return Err(BundleError::Invalid(format!("cannot split {n} subjects as {train}/{validation}/{test}")));
    }
    if measurement_count == 0 || measurement_count > bundle.direction_count() {
        return Err(BundleError::Invalid(format!(
            "measurement count {measurement_count} not in 1..={}",
            bundle.direction_count()
        )));
    }
    let mut ids = bundle.subjects().to_vec();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_ids = ids.split_off(n_train + n_val);
    let val_ids = ids.split_off(n_train);
    Ok(SplitSpec {
        train: ids,
        validation: val_ids,
        test: test_ids,
        measured: farthest_point_subset(bundle.directions(), measurement_count),
    })
}
