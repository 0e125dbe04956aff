//! Direction geometry, neighbor retrieval and the two graph constructions:
//! the complete subject graph and the distance-thresholded spatial graph.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::dataset::HrtfBundle;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("elevation {0}° outside [-90, 90]")]
    Elevation(f64),
    #[error("non-finite direction component")]
    NonFinite,
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid retrieval request: {0}")]
    Retrieval(String),
    #[error("no direction within {0}° of the target")]
    NoNeighbors(f64),
    #[error("unknown {kind} index {index}")]
    UnknownIndex { kind: &'static str, index: usize },
    #[error("invalid graph parameter: {0}")]
    Parameter(String),
}

/// Source direction in degrees: azimuth in `[0, 360)` counterclockwise with
/// 90° toward the left ear, elevation in `[-90, 90]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct Direction {
    azimuth: f64,
    elevation: f64,
}

impl Direction {
    pub fn new(azimuth: f64, elevation: f64) -> Result<Self, GraphError> {
        if !azimuth.is_finite() || !elevation.is_finite() {
            return Err(GraphError::NonFinite);
        }
        if !(-90.0..=90.0).contains(&elevation) {
            return Err(GraphError::Elevation(elevation));
        }
        let mut azimuth = azimuth.rem_euclid(360.0);
        if azimuth >= 360.0 {
            azimuth = 0.0;
        }
        Ok(Self { azimuth, elevation })
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    /// Unit vector with x forward, y left, z up.
    pub fn unit_vector(&self) -> [f64; 3] {
        let (az, el) = (self.azimuth.to_radians(), self.elevation.to_radians());
        [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
    }

    /// Lateral angle in radians, positive toward the left ear.
    pub fn lateral_angle(&self) -> f64 {
        self.unit_vector()[1].clamp(-1.0, 1.0).asin()
    }
}

impl TryFrom<[f64; 2]> for Direction {
    type Error = GraphError;

    fn try_from([az, el]: [f64; 2]) -> Result<Self, Self::Error> {
        Direction::new(az, el)
    }
}

impl From<Direction> for [f64; 2] {
    fn from(d: Direction) -> Self {
        [d.azimuth, d.elevation]
    }
}

/// Great-circle angle between two directions, in degrees.
pub fn angular_distance(a: Direction, b: Direction) -> f64 {
    let (u, v) = (a.unit_vector(), b.unit_vector());
    let cross = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let cos = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    sin.atan2(cos).to_degrees()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Orders `(id, score)` pairs by ascending score, ties by id, and keeps `m`.
pub fn top_m_by_score(mut scored: Vec<(usize, f64)>, m: usize) -> Vec<usize> {
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(m).map(|(id, _)| id).collect()
}

/// The `m` candidates nearest to `target` in Euclidean feature distance.
pub fn retrieve_subjects(candidates: &[(usize, Vec<f64>)], target: &[f64], m: usize) -> Result<Vec<usize>, GraphError> {
    if m == 0 || m > candidates.len() {
        return Err(GraphError::Retrieval(format!("M={m} with {} candidates", candidates.len())));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for (id, f) in candidates {
        if f.len() != target.len() {
            return Err(GraphError::Dimension { expected: target.len(), got: f.len() });
        }
        scored.push((*id, euclidean(f, target)));
    }
    Ok(top_m_by_score(scored, m))
}

/// Threshold form: every candidate with `‖a_s − a_ŝ‖₂ < delta`, nearest first.
pub fn retrieve_subjects_within(
    candidates: &[(usize, Vec<f64>)],
    target: &[f64],
    delta: f64,
) -> Result<Vec<usize>, GraphError> {
    let mut scored = Vec::new();
    for (id, f) in candidates {
        if f.len() != target.len() {
            return Err(GraphError::Dimension { expected: target.len(), got: f.len() });
        }
        let d = euclidean(f, target);
        if d < delta {
            scored.push((*id, d));
        }
    }
    if scored.is_empty() {
        return Err(GraphError::Retrieval(format!("no subject within {delta}")));
    }
    let n = scored.len();
    Ok(top_m_by_score(scored, n))
}

/// Indices of directions strictly closer than `delta_d` degrees to `target`,
/// in index order.
pub fn retrieve_directions(
    all: &[Direction],
    target: Direction,
    delta_d: f64,
    exclude_target: bool,
) -> Result<Vec<usize>, GraphError> {
    if !(delta_d > 0.0) {
        return Err(GraphError::Parameter(format!("δ_d = {delta_d}")));
    }
    let found: Vec<usize> = all
        .iter()
        .enumerate()
        .filter(|(_, &d)| {
            let dist = angular_distance(d, target);
            dist < delta_d && !(exclude_target && dist == 0.0)
        })
        .map(|(i, _)| i)
        .collect();
    if found.is_empty() {
        return Err(GraphError::NoNeighbors(delta_d));
    }
    Ok(found)
}

/// Edge set with per-edge weights over `n` nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    n: usize,
    weights: Vec<Option<f64>>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self { n, weights: vec![None; n * n] }
    }

    /// All ordered pairs, self-loops included, weight 1.
    pub fn complete(n: usize) -> Self {
        Self { n, weights: vec![Some(1.0); n * n] }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn connect(&mut self, i: usize, j: usize, w: f64) {
        self.weights[i * self.n + j] = Some(w);
        self.weights[j * self.n + i] = Some(w);
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.weights[i * self.n + j]
    }

    pub fn edge_count(&self) -> usize {
        self.weights.iter().filter(|w| w.is_some()).count()
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| j != i && self.weight(i, j).is_some()).count()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.weight(i, j) == self.weight(j, i)))
    }

    /// `[n, n]` additive attention bias: `ln w` on edges, `−∞` elsewhere.
    pub fn log_weight_bias(&self) -> Tensor {
        let data = self.weights.iter().map(|w| w.map_or(f64::NEG_INFINITY, f64::ln)).collect();
        Tensor::new(vec![self.n, self.n], data).expect("square")
    }

    /// Same adjacency with rows/columns reordered: new node `i` is old `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::empty(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.weights[i * self.n + j] = self.weight(perm[i], perm[j]);
            }
        }
        out
    }
}

/// Complete graph over retrieved subjects at one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectGraph {
    pub node_ids: Vec<usize>,
    pub direction: usize,
    pub features: Vec<Vec<f64>>,
    pub adjacency: Adjacency,
}

pub fn build_subject_graph(bundle: &HrtfBundle, nodes: &[usize], direction: usize) -> Result<SubjectGraph, GraphError> {
    if nodes.is_empty() {
        return Err(GraphError::Retrieval("empty subject set".into()));
    }
    if direction >= bundle.direction_count() {
        return Err(GraphError::UnknownIndex { kind: "direction", index: direction });
    }
    let mut features = Vec::with_capacity(nodes.len());
    for &s in nodes {
        if s >= bundle.subject_count() {
            return Err(GraphError::UnknownIndex { kind: "subject", index: s });
        }
        features.push(bundle.magnitude(s, direction).to_vec());
    }
    Ok(SubjectGraph { node_ids: nodes.to_vec(), direction, features, adjacency: Adjacency::complete(nodes.len()) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialParams {
    /// Topology factor `a`: neighbor pairs closer than `a·δ_d` are linked.
    pub a: f64,
    /// Retrieval radius in degrees.
    pub delta_d: f64,
    /// Gaussian kernel bandwidth on the `a·δ_d`-normalized distance.
    pub sigma: f64,
}

impl Default for SpatialParams {
    fn default() -> Self {
        Self { a: 0.75, delta_d: 20.0, sigma: 0.5 }
    }
}

impl SpatialParams {
    pub fn validate(&self) -> Result<(), GraphError> {
        if !(self.a > 0.0 && self.a <= 1.0) {
            return Err(GraphError::Parameter(format!("a = {} not in (0, 1]", self.a)));
        }
        if !(self.delta_d > 0.0) || !(self.sigma > 0.0) {
            return Err(GraphError::Parameter(format!("δ_d = {}, σ = {}", self.delta_d, self.sigma)));
        }
        Ok(())
    }

    /// `exp(−ρ²/(2σ²))` with `ρ = distance / (a·δ_d)`.
    pub fn kernel(&self, distance_deg: f64) -> f64 {
        let rho = distance_deg / (self.a * self.delta_d);
        (-rho * rho / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Subject-independent geometry of one spatial graph: neighbors come first,
/// the target node is last.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialLayout {
    pub neighbors: Vec<usize>,
    pub target: Direction,
    pub adjacency: Adjacency,
}

impl SpatialLayout {
    pub fn target_index(&self) -> usize {
        self.neighbors.len()
    }

    pub fn new(
        directions: &[Direction],
        neighbors: Vec<usize>,
        target: Direction,
        params: &SpatialParams,
    ) -> Result<Self, GraphError> {
        params.validate()?;
        if neighbors.is_empty() {
            return Err(GraphError::NoNeighbors(params.delta_d));
        }
        let n = neighbors.len();
        let mut adjacency = Adjacency::empty(n + 1);
        let cutoff = params.a * params.delta_d;
        for (i, &di) in neighbors.iter().enumerate() {
            let d = *directions.get(di).ok_or(GraphError::UnknownIndex { kind: "direction", index: di })?;
            for (j, &dj) in neighbors.iter().enumerate().take(i + 1) {
                let dist = angular_distance(d, directions[dj]);
                if i == j || dist < cutoff {
                    adjacency.connect(i, j, params.kernel(dist));
                }
            }
            adjacency.connect(i, n, params.kernel(angular_distance(d, target)));
        }
        adjacency.connect(n, n, 1.0);
        Ok(Self { neighbors, target, adjacency })
    }

    /// Layout around `target` from the directions within `δ_d`.
    pub fn around(
        directions: &[Direction],
        target: Direction,
        params: &SpatialParams,
        exclude_target: bool,
    ) -> Result<Self, GraphError> {
        let neighbors = retrieve_directions(directions, target, params.delta_d, exclude_target)?;
        Self::new(directions, neighbors, target, params)
    }
}

/// Spatial graph with node features; the target row is all ones.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGraph {
    pub layout: SpatialLayout,
    pub features: Vec<Vec<f64>>,
}

impl SpatialGraph {
    pub fn target_index(&self) -> usize {
        self.layout.target_index()
    }
}

/// Builds the spatial graph from neighbor magnitudes (`node_magnitudes[i]`
/// belongs to `directions[neighbors[i]]`).
pub fn build_spatial_graph(
    node_magnitudes: Vec<Vec<f64>>,
    directions: &[Direction],
    neighbors: Vec<usize>,
    target: Direction,
    params: &SpatialParams,
) -> Result<SpatialGraph, GraphError> {
    if node_magnitudes.len() != neighbors.len() {
        return Err(GraphError::Dimension { expected: neighbors.len(), got: node_magnitudes.len() });
    }
    let width = node_magnitudes.first().map_or(0, Vec::len);
    let layout = SpatialLayout::new(directions, neighbors, target, params)?;
    Ok(SpatialGraph { layout, features: with_target_row(node_magnitudes, width) })
}

pub(crate) fn with_target_row(mut rows: Vec<Vec<f64>>, width: usize) -> Vec<Vec<f64>> {
    rows.push(vec![1.0; width]);
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir(az: f64, el: f64) -> Direction {
        Direction::new(az, el).unwrap()
    }

    #[test]
    fn azimuth_wraps() {
        assert_eq!(dir(-90.0, 0.0).azimuth(), 270.0);
        assert_eq!(dir(720.0, 0.0).azimuth(), 0.0);
        assert!(Direction::new(0.0, 91.0).is_err());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(angular_distance(dir(10.0, 20.0), dir(10.0, 20.0)), 0.0);
        assert!((angular_distance(dir(0.0, 0.0), dir(180.0, 0.0)) - 180.0).abs() < 1e-12);
        assert!((angular_distance(dir(90.0, 0.0), dir(90.0, 45.0)) - 45.0).abs() < 1e-12);
        assert!((angular_distance(dir(359.0, 0.0), dir(1.0, 0.0)) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn retrieval_basics() {
        let cands = vec![(3, vec![1.0, 1.0]), (1, vec![0.0, 0.0]), (2, vec![5.0, 5.0])];
        assert_eq!(retrieve_subjects(&cands, &[0.0, 0.0], 1).unwrap(), vec![1]);
        assert_eq!(retrieve_subjects(&cands, &[0.0, 0.0], 3).unwrap(), vec![1, 3, 2]);
        assert!(retrieve_subjects(&cands, &[0.0], 1).is_err());
        assert!(retrieve_subjects(&cands, &[0.0, 0.0], 4).is_err());
        assert_eq!(retrieve_subjects_within(&cands, &[0.0, 0.0], 2.0).unwrap(), vec![1, 3]);
    }

    #[test]
    fn ties_break_by_id() {
        let cands = vec![(7, vec![1.0]), (2, vec![-1.0])];
        assert_eq!(retrieve_subjects(&cands, &[0.0], 1).unwrap(), vec![2]);
    }

    #[test]
    fn direction_retrieval() {
        let all = vec![dir(0.0, 0.0), dir(10.0, 0.0), dir(90.0, 0.0), dir(180.0, 0.0)];
        assert_eq!(retrieve_directions(&all, all[0], 200.0, false).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(retrieve_directions(&all, all[0], 20.0, false).unwrap(), vec![0, 1]);
        assert_eq!(retrieve_directions(&all, all[0], 20.0, true).unwrap(), vec![1]);
        assert!(matches!(retrieve_directions(&all, all[2], 5.0, true), Err(GraphError::NoNeighbors(_))));
    }

    #[test]
    fn kernel_values() {
        let p = SpatialParams::default();
        assert_eq!(p.kernel(0.0), 1.0);
        assert!((p.kernel(15.0) - (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn spatial_edges_follow_cutoff() {
        // Neighbor pairs at 14° are linked, at 16° they are not (a·δ_d = 15°).
        let all = vec![dir(0.0, 0.0), dir(14.0, 0.0), dir(30.0, 0.0)];
        let layout = SpatialLayout::new(&all, vec![0, 1, 2], dir(15.0, 0.0), &SpatialParams::default()).unwrap();
        let adj = &layout.adjacency;
        assert!(adj.weight(0, 1).is_some());
        assert!(adj.weight(1, 2).is_none());
        assert!(adj.weight(0, 2).is_none());
        for i in 0..3 {
            assert!(adj.weight(i, 3).is_some());
            assert_eq!(adj.weight(i, i), Some(1.0));
        }
        assert!(adj.is_symmetric());
    }

    #[test]
    fn spatial_graph_target_row_is_ones() {
        let all = vec![dir(0.0, 0.0), dir(10.0, 0.0)];
        let g = build_spatial_graph(
            vec![vec![3.0; 4], vec![-1.0; 4]],
            &all,
            vec![0, 1],
            dir(5.0, 0.0),
            &SpatialParams::default(),
        )
        .unwrap();
        assert_eq!(g.features[g.target_index()], vec![1.0; 4]);
        assert!(g.layout.adjacency.degree(g.target_index()) >= 1);
    }

    #[test]
    fn zero_topology_factor_rejected() {
        let p = SpatialParams { a: 0.0, ..SpatialParams::default() };
        assert!(p.validate().is_err());
    }
}
