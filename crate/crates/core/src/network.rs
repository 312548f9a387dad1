//! Communication graphs and doubly stochastic consensus weights.
//!
//! A [`Network`] couples an undirected connected graph with a symmetric,
//! doubly stochastic weight matrix `W` whose sparsity follows the graph plus
//! the diagonal, together with the spectral summaries of `I - W` used by the
//! solvers and the rate analysis.

use std::collections::VecDeque;
use std::io::{self, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::numfmt::g17;

/// Eigenvalues of `I - W` below this are treated as zero.
pub const ZERO_EIGENVALUE_THRESHOLD: f64 = 1e-10;

/// Number of seeds tried by [`generate_rgg`] before giving up.
pub const DEFAULT_RGG_ATTEMPTS: u32 = 1000;

/// Tolerance used by [`validate_a1`] for symmetry and stochasticity.
pub const A1_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("a network needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("no connected geometric graph after {attempts} samples (last seed tried: {last_seed})")]
    GenerationFailed { attempts: u32, last_seed: u64 },
    #[error("graph is disconnected: {zero_eigenvalues} eigenvalues of I-W are below {threshold:e}")]
    Disconnected { zero_eigenvalues: usize, threshold: f64 },
    #[error("invalid adjacency: {0}")]
    InvalidAdjacency(String),
    #[error("weight matrix violates the consensus assumptions: {0}")]
    InvalidWeights(String),
}

/// Spectral quantities of a consensus weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralSummary {
    /// Smallest nonzero eigenvalue of `I - W`.
    pub lambda2: f64,
    /// Largest eigenvalue of `I - W`.
    pub lambda_max: f64,
    /// `max_i w_ii`.
    pub w_d: f64,
    /// `min_i w_ii`.
    pub w_m: f64,
}

#[derive(Debug, Clone)]
pub struct Network {
    neighbors: Vec<Vec<usize>>,
    weights: DMatrix<f64>,
    spectrum: SpectralSummary,
}

impl Network {
    /// Builds a network with Metropolis weights on the given undirected graph.
    pub fn from_adjacency(neighbors: Vec<Vec<usize>>) -> Result<Self, NetworkError> {
        let neighbors = normalize_adjacency(neighbors)?;
        if !is_connected(&neighbors) {
            return Err(NetworkError::InvalidAdjacency("graph is not connected".into()));
        }
        let weights = metropolis_weights(&neighbors);
        let spectrum = spectral_summary(&weights)?;
        Ok(Self { neighbors, weights, spectrum })
    }

    /// Builds a network with caller-provided weights, which must satisfy the
    /// consensus assumptions on the given graph.
    pub fn with_weights(neighbors: Vec<Vec<usize>>, weights: DMatrix<f64>) -> Result<Self, NetworkError> {
        let neighbors = normalize_adjacency(neighbors)?;
        if weights.nrows() != neighbors.len() || weights.ncols() != neighbors.len() {
            return Err(NetworkError::InvalidWeights(format!(
                "expected {0}x{0} matrix, got {1}x{2}",
                neighbors.len(),
                weights.nrows(),
                weights.ncols()
            )));
        }
        let report = validate_a1(&weights, Some(&neighbors));
        if !report.passed() {
            return Err(NetworkError::InvalidWeights(report.describe_failures()));
        }
        let spectrum = spectral_summary(&weights)?;
        Ok(Self { neighbors, weights, spectrum })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Sorted neighbors of node `i`, excluding `i` itself.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    pub fn spectrum(&self) -> &SpectralSummary {
        &self.spectrum
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// True when every diagonal weight equals the first one exactly.
    pub fn has_equal_self_weights(&self) -> bool {
        let w0 = self.weights[(0, 0)];
        (0..self.len()).all(|i| self.weights[(i, i)] == w0)
    }

    pub fn validate(&self) -> A1Report {
        validate_a1(&self.weights, Some(&self.neighbors))
    }

    /// Writes `i j w_ij` lines (0-based, `i < j`) for every edge.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            for &j in nbrs.iter().filter(|&&j| j > i) {
                writeln!(out, "{} {} {}", i, j, g17(self.weights[(i, j)]))?;
            }
        }
        Ok(())
    }
}

/// Connectivity radius `sqrt(ln N / N)` of the geometric graph model.
pub fn connectivity_radius(nodes: usize) -> f64 {
    let n = nodes as f64;
    (n.ln() / n).sqrt()
}

/// Draws `nodes` points uniformly on the unit square.
pub fn sample_points(nodes: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..nodes).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect()
}

/// Links every pair of points strictly closer than `radius`.
pub fn geometric_adjacency(points: &[[f64; 2]], radius: f64) -> Vec<Vec<usize>> {
    let mut neighbors = vec![Vec::new(); points.len()];
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            if (dx * dx + dy * dy).sqrt() < radius {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    neighbors
}

/// Samples a connected random geometric graph on `nodes` points.
///
/// Disconnected samples are discarded and the seed is advanced by one, up to
/// [`DEFAULT_RGG_ATTEMPTS`] tries.
pub fn generate_rgg(nodes: usize, seed: u64) -> Result<Network, NetworkError> {
    generate_rgg_with_attempts(nodes, seed, DEFAULT_RGG_ATTEMPTS)
}

pub fn generate_rgg_with_attempts(nodes: usize, seed: u64, attempts: u32) -> Result<Network, NetworkError> {
    if nodes < 2 {
        return Err(NetworkError::TooFewNodes(nodes));
    }
    let radius = connectivity_radius(nodes);
    let mut last_seed = seed;
    for attempt in 0..attempts {
        last_seed = seed.wrapping_add(u64::from(attempt));
        let adjacency = geometric_adjacency(&sample_points(nodes, last_seed), radius);
        if is_connected(&adjacency) {
            return Network::from_adjacency(adjacency);
        }
    }
    Err(NetworkError::GenerationFailed { attempts, last_seed })
}

/// Metropolis weights `w_ij = 1 / (1 + max(deg i, deg j))` on edges, with the
/// diagonal completing each row to one.
pub fn metropolis_weights(neighbors: &[Vec<usize>]) -> DMatrix<f64> {
    let n = neighbors.len();
    let mut w = DMatrix::zeros(n, n);
    for (i, nbrs) in neighbors.iter().enumerate() {
        for &j in nbrs.iter().filter(|&&j| j > i) {
            let value = 1.0 / (1.0 + neighbors[i].len().max(neighbors[j].len()) as f64);
            w[(i, j)] = value;
            w[(j, i)] = value;
        }
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    w
}

/// Eigen-summaries of `I - W` from a dense symmetric eigensolve.
pub fn spectral_summary(weights: &DMatrix<f64>) -> Result<SpectralSummary, NetworkError> {
    let n = weights.nrows();
    if n < 2 {
        return Err(NetworkError::TooFewNodes(n));
    }
    let laplacian = DMatrix::identity(n, n) - weights;
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(laplacian).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    let zero_eigenvalues = eigenvalues.iter().filter(|&&l| l < ZERO_EIGENVALUE_THRESHOLD).count();
    if zero_eigenvalues != 1 {
        return Err(NetworkError::Disconnected { zero_eigenvalues, threshold: ZERO_EIGENVALUE_THRESHOLD });
    }
    let diagonal = weights.diagonal();
    Ok(SpectralSummary {
        lambda2: eigenvalues[1],
        lambda_max: eigenvalues[n - 1],
        w_d: diagonal.max(),
        w_m: diagonal.min(),
    })
}

/// Outcome of a single invariant check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Check {
    pub passed: bool,
    pub max_violation: f64,
}

impl Check {
    fn within(max_violation: f64, tolerance: f64) -> Self {
        Self { passed: max_violation <= tolerance, max_violation }
    }
}

/// Per-invariant report for the consensus weight assumptions.
#[derive(Debug, Clone, Serialize)]
pub struct A1Report {
    pub symmetric: Check,
    pub row_sums: Check,
    pub column_sums: Check,
    /// Negative entries anywhere in the matrix.
    pub nonnegative: Check,
    /// `w_ij > 0` exactly on the graph plus the diagonal. Only evaluated when
    /// an adjacency is supplied; otherwise the support of `W` defines the graph.
    pub sparsity: Option<Check>,
    /// Whether the support graph of `W` is connected.
    pub connected: bool,
}

impl A1Report {
    pub fn passed(&self) -> bool {
        self.symmetric.passed
            && self.row_sums.passed
            && self.column_sums.passed
            && self.nonnegative.passed
            && self.sparsity.is_none_or(|c| c.passed)
            && self.connected
    }

    fn describe_failures(&self) -> String {
        let mut failures = Vec::new();
        let mut note = |name: &str, check: &Check| {
            if !check.passed {
                failures.push(format!("{name} (max violation {:e})", check.max_violation));
            }
        };
        note("symmetry", &self.symmetric);
        note("row sums", &self.row_sums);
        note("column sums", &self.column_sums);
        note("nonnegativity", &self.nonnegative);
        if let Some(s) = &self.sparsity {
            note("sparsity pattern", s);
        }
        if !self.connected {
            failures.push("support graph disconnected".into());
        }
        failures.join(", ")
    }
}

/// Checks symmetry, double stochasticity, sign and sparsity of `weights`.
pub fn validate_a1(weights: &DMatrix<f64>, neighbors: Option<&[Vec<usize>]>) -> A1Report {
    let n = weights.nrows();
    let mut asym = 0.0f64;
    let mut negative = 0.0f64;
    for i in 0..n {
        for j in 0..weights.ncols() {
            if j < n {
                asym = asym.max((weights[(i, j)] - weights[(j, i)]).abs());
            }
            negative = negative.max(-weights[(i, j)]);
        }
    }
    let row_dev = weights.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    let col_dev = weights.column_iter().map(|c| (c.sum() - 1.0).abs()).fold(0.0, f64::max);

    let sparsity = neighbors.map(|nbrs| {
        let mut violation = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let in_pattern = i == j || nbrs.get(i).is_some_and(|l| l.contains(&j));
                let w = weights[(i, j)];
                if in_pattern && w <= 0.0 {
                    violation = violation.max(w.abs().max(f64::MIN_POSITIVE));
                } else if !in_pattern && w != 0.0 {
                    violation = violation.max(w.abs());
                }
            }
        }
        Check { passed: violation == 0.0, max_violation: violation }
    });

    let support: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| j != i && weights[(i, j)] != 0.0).collect()).collect();

    A1Report {
        symmetric: Check::within(asym, A1_TOLERANCE),
        row_sums: Check::within(row_dev, A1_TOLERANCE),
        column_sums: Check::within(col_dev, A1_TOLERANCE),
        nonnegative: Check::within(negative, 0.0),
        sparsity,
        connected: n > 0 && is_connected(&support),
    }
}

/// Breadth-first connectivity test.
pub fn is_connected(neighbors: &[Vec<usize>]) -> bool {
    if neighbors.is_empty() {
        return false;
    }
    let mut seen = vec![false; neighbors.len()];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = queue.pop_front() {
        for &j in &neighbors[i] {
            if !seen[j] {
                seen[j] = true;
                count += 1;
                queue.push_back(j);
            }
        }
    }
    count == neighbors.len()
}

fn normalize_adjacency(mut neighbors: Vec<Vec<usize>>) -> Result<Vec<Vec<usize>>, NetworkError> {
    let n = neighbors.len();
    if n < 2 {
        return Err(NetworkError::TooFewNodes(n));
    }
    for (i, list) in neighbors.iter_mut().enumerate() {
        list.sort_unstable();
        list.dedup();
        if list.contains(&i) {
            return Err(NetworkError::InvalidAdjacency(format!("self-loop at node {i}")));
        }
        if let Some(&j) = list.iter().find(|&&j| j >= n) {
            return Err(NetworkError::InvalidAdjacency(format!("node {i} links to missing node {j}")));
        }
    }
    for i in 0..n {
        for &j in &neighbors[i] {
            if neighbors[j].binary_search(&i).is_err() {
                return Err(NetworkError::InvalidAdjacency(format!("edge ({i}, {j}) is not symmetric")));
            }
        }
    }
    Ok(neighbors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> Vec<Vec<usize>> {
        vec![vec![1], vec![0, 2], vec![1]]
    }

    #[test]
    fn two_node_weights() {
        let w = metropolis_weights(&[vec![1], vec![0]]);
        assert_eq!(w[(0, 1)], 0.5);
        assert_eq!(w[(0, 0)], 0.5);
        assert_eq!(w[(1, 1)], 0.5);
    }

    #[test]
    fn path_weights_by_hand() {
        let w = metropolis_weights(&path3());
        assert_eq!(w[(0, 1)], 1.0 / 3.0);
        assert_eq!(w[(1, 2)], 1.0 / 3.0);
        assert_eq!(w[(0, 2)], 0.0);
        assert!((w[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[(1, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w[(2, 2)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn star_weights_are_one_over_n() {
        let n = 6;
        let mut adj = vec![Vec::new(); n];
        for leaf in 1..n {
            adj[0].push(leaf);
            adj[leaf].push(0);
        }
        let w = metropolis_weights(&adj);
        for leaf in 1..n {
            assert_eq!(w[(0, leaf)], 1.0 / n as f64);
        }
    }

    #[test]
    fn two_node_spectrum() {
        let w = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let s = spectral_summary(&w).unwrap();
        assert!((s.lambda2 - 1.0).abs() < 1e-14);
        assert!((s.lambda_max - 1.0).abs() < 1e-14);
    }

    #[test]
    fn single_node_rejected() {
        let w = DMatrix::identity(1, 1);
        assert!(matches!(spectral_summary(&w), Err(NetworkError::TooFewNodes(1))));
        assert!(matches!(generate_rgg(1, 0), Err(NetworkError::TooFewNodes(1))));
    }

    #[test]
    fn path_spectrum_matches_characteristic_roots() {
        // I - W for the Metropolis path is [[1/3,-1/3,0],[-1/3,2/3,-1/3],[0,-1/3,1/3]];
        // its characteristic polynomial is l (l - 1/3) (l - 1), so lambda2 = 1/3.
        let s = spectral_summary(&metropolis_weights(&path3())).unwrap();
        assert!((s.lambda2 - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.lambda_max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disconnected_spectrum_rejected() {
        let mut w = DMatrix::identity(4, 4);
        w[(0, 0)] = 0.5;
        w[(1, 1)] = 0.5;
        w[(0, 1)] = 0.5;
        w[(1, 0)] = 0.5;
        assert!(matches!(spectral_summary(&w), Err(NetworkError::Disconnected { zero_eigenvalues: 3, .. })));
    }

    #[test]
    fn planted_collinear_points_form_a_path() {
        let r = connectivity_radius(3);
        let step = 0.9 * r;
        let points = [[0.05, 0.5], [0.05 + step, 0.5], [0.05 + 2.0 * step, 0.5]];
        let adj = geometric_adjacency(&points, r);
        assert_eq!(adj, path3());
    }

    #[test]
    fn radius_for_two_nodes() {
        assert!((connectivity_radius(2) - 0.5887).abs() < 1e-4);
    }

    #[test]
    fn two_node_rgg_is_single_edge() {
        let net = generate_rgg(2, 3).unwrap();
        assert_eq!(net.adjacency(), &[vec![1], vec![0]]);
        assert_eq!(net.weight(0, 1), 0.5);
    }

    #[test]
    fn thirty_node_instance_is_valid() {
        let net = generate_rgg(30, 11).unwrap();
        assert!(net.validate().passed());
        assert!((0..30).all(|i| net.degree(i) >= 1));
        let s = net.spectrum();
        assert!(0.0 < s.lambda2 && s.lambda2 <= s.lambda_max && s.lambda_max <= 2.0);
    }

    #[test]
    fn generation_failure_reports_last_seed() {
        // With a single attempt some seed yields a disconnected 30-node sample.
        let failing = (0..200u64)
            .find(|&s| !is_connected(&geometric_adjacency(&sample_points(30, s), connectivity_radius(30))))
            .expect("some disconnected sample");
        match generate_rgg_with_attempts(30, failing, 1) {
            Err(NetworkError::GenerationFailed { attempts: 1, last_seed }) => assert_eq!(last_seed, failing),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_detects_scaled_row() {
        let mut w = metropolis_weights(&path3());
        for j in 0..3 {
            w[(1, j)] *= 1.01;
        }
        let report = validate_a1(&w, None);
        assert!(!report.row_sums.passed);
        assert!((report.row_sums.max_violation - 0.01).abs() < 1e-12);
        assert!(!report.passed());
    }

    #[test]
    fn validate_detects_asymmetry() {
        let mut w = metropolis_weights(&path3());
        w[(0, 1)] += 1e-3;
        let report = validate_a1(&w, Some(&path3()));
        assert!(!report.symmetric.passed);
        assert!((report.symmetric.max_violation - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn validate_detects_pattern_mismatch() {
        let w = metropolis_weights(&path3());
        let triangle = vec![vec![1, 2], vec![0, 2], vec![0, 1]];
        let report = validate_a1(&w, Some(&triangle));
        assert!(report.sparsity.is_some_and(|c| !c.passed));
    }

    #[test]
    fn with_weights_rejects_bad_matrix() {
        let mut w = metropolis_weights(&path3());
        w[(0, 0)] += 0.1;
        assert!(matches!(Network::with_weights(path3(), w), Err(NetworkError::InvalidWeights(_))));
    }

    #[test]
    fn adjacency_errors() {
        assert!(Network::from_adjacency(vec![vec![0], vec![]]).is_err());
        assert!(Network::from_adjacency(vec![vec![1], vec![]]).is_err());
        assert!(Network::from_adjacency(vec![vec![], vec![], vec![]]).is_err());
    }

    #[test]
    fn edge_list_format() {
        let net = Network::from_adjacency(path3()).unwrap();
        let mut buf = Vec::new();
        net.write_edge_list(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "0 1 0.33333333333333331\n1 2 0.33333333333333331\n");
    }
}
