//! Per-node strongly convex costs, their derivatives, reference solutions
//! and the error measures reported in traces.
//!
//! Vectors in `R^{nN}` are stored node-major: block `i` occupies entries
//! `i*n .. (i+1)*n`.

pub mod libsvm;
mod logistic;
mod quadratic;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

pub use libsvm::Dataset;
pub use logistic::{logistic_from_dataset, logistic_load, LogisticData, LogisticNode};
pub use quadratic::{quadratic_generate, quadratic_solution, QuadraticData, QuadraticNode};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: label `{label}` is outside the two classes seen so far")]
    Labels { line: usize, label: String },
    #[error("{samples} samples cannot be spread over {nodes} nodes")]
    TooFewSamples { samples: usize, nodes: usize },
    #[error("invalid problem data: {0}")]
    InvalidData(String),
    #[error("aggregate Hessian is singular")]
    SingularAggregate,
    #[error("operation requires a {0} instance")]
    WrongKind(&'static str),
    #[error("relative error is undefined for a zero minimizer")]
    ZeroMinimizer,
    #[error("centralized Newton did not converge (gradient norm {gradient_norm:e})")]
    NoConvergence { gradient_norm: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Quadratic,
    Logistic,
}

#[derive(Debug, Clone)]
pub enum ProblemData {
    Quadratic(QuadraticData),
    Logistic(LogisticData),
}

/// A distributed problem `min sum_i f_i(y)` with curvature bounds
/// `m I <= Hess f_i <= M I`.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    dim: usize,
    data: ProblemData,
    strong_convexity: f64,
    smoothness: f64,
    hessian_lipschitz: f64,
}

impl ProblemInstance {
    pub fn quadratic(nodes: Vec<QuadraticNode>) -> Result<Self, ObjectiveError> {
        let dim =
            nodes.first().map(|b| b.center.len()).ok_or_else(|| ObjectiveError::InvalidData("no nodes".into()))?;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (i, node) in nodes.iter().enumerate() {
            if node.center.len() != dim || node.matrix.shape() != (dim, dim) {
                return Err(ObjectiveError::InvalidData(format!("node {i} has mismatched dimensions")));
            }
            let skew = (&node.matrix - node.matrix.transpose()).amax();
            if skew > 1e-12 {
                return Err(ObjectiveError::InvalidData(format!("node {i} matrix is not symmetric ({skew:e})")));
            }
            let eig = SymmetricEigen::new(node.matrix.clone()).eigenvalues;
            lo = lo.min(eig.min());
            hi = hi.max(eig.max());
        }
        if !(lo > 0.0) {
            return Err(ObjectiveError::InvalidData(format!(
                "quadratic blocks are not positive definite (min eigenvalue {lo:e})"
            )));
        }
        Ok(Self {
            dim,
            data: ProblemData::Quadratic(QuadraticData { nodes }),
            strong_convexity: lo,
            smoothness: hi,
            hessian_lipschitz: 0.0,
        })
    }

    pub fn logistic(data: LogisticData) -> Result<Self, ObjectiveError> {
        let dim = data
            .nodes
            .first()
            .map(|b| b.features.ncols())
            .ok_or_else(|| ObjectiveError::InvalidData("no nodes".into()))?;
        for (i, node) in data.nodes.iter().enumerate() {
            if node.features.ncols() != dim || node.features.nrows() != node.labels.len() {
                return Err(ObjectiveError::InvalidData(format!("node {i} has mismatched dimensions")));
            }
            if node.labels.is_empty() {
                return Err(ObjectiveError::InvalidData(format!("node {i} holds no samples")));
            }
            if node.labels.iter().any(|&l| l != 1.0 && l != -1.0) {
                return Err(ObjectiveError::InvalidData(format!("node {i} has labels outside {{-1, +1}}")));
            }
        }
        if !(data.regularization > 0.0) {
            return Err(ObjectiveError::InvalidData("regularization must be positive".into()));
        }
        let mut loss = data.loss_smoothness();
        if (loss - 1.0).abs() < 1e-12 {
            loss = 1.0;
        }
        Ok(Self {
            dim,
            strong_convexity: data.regularization,
            smoothness: data.regularization + loss,
            hessian_lipschitz: data.hessian_lipschitz(),
            data: ProblemData::Logistic(data),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> usize {
        match &self.data {
            ProblemData::Quadratic(q) => q.nodes.len(),
            ProblemData::Logistic(l) => l.nodes.len(),
        }
    }

    pub fn kind(&self) -> ProblemKind {
        match self.data {
            ProblemData::Quadratic(_) => ProblemKind::Quadratic,
            ProblemData::Logistic(_) => ProblemKind::Logistic,
        }
    }

    pub fn data(&self) -> &ProblemData {
        &self.data
    }

    pub fn quadratic_data(&self) -> Option<&QuadraticData> {
        match &self.data {
            ProblemData::Quadratic(q) => Some(q),
            ProblemData::Logistic(_) => None,
        }
    }

    pub fn logistic_data(&self) -> Option<&LogisticData> {
        match &self.data {
            ProblemData::Logistic(l) => Some(l),
            ProblemData::Quadratic(_) => None,
        }
    }

    /// Global strong convexity constant `m`.
    pub fn strong_convexity(&self) -> f64 {
        self.strong_convexity
    }

    /// Global gradient Lipschitz constant `M`.
    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    /// Hessian Lipschitz constant `L` (zero for quadratics). Diagnostics only.
    pub fn hessian_lipschitz(&self) -> f64 {
        self.hessian_lipschitz
    }

    pub fn has_constant_hessian(&self) -> bool {
        matches!(self.data, ProblemData::Quadratic(_))
    }

    /// Per-node sample counts `|J_i|`; empty for quadratic instances.
    pub fn sample_counts(&self) -> Vec<usize> {
        match &self.data {
            ProblemData::Logistic(l) => l.nodes.iter().map(|n| n.labels.len()).collect(),
            ProblemData::Quadratic(_) => Vec::new(),
        }
    }

    pub fn value(&self, i: usize, y: &DVector<f64>) -> f64 {
        match &self.data {
            ProblemData::Quadratic(q) => q.nodes[i].value(y),
            ProblemData::Logistic(l) => l.nodes[i].value(y, l.regularization),
        }
    }

    pub fn gradient(&self, i: usize, y: &DVector<f64>) -> DVector<f64> {
        match &self.data {
            ProblemData::Quadratic(q) => q.nodes[i].gradient(y),
            ProblemData::Logistic(l) => l.nodes[i].gradient(y, l.regularization),
        }
    }

    pub fn hessian(&self, i: usize, y: &DVector<f64>) -> DMatrix<f64> {
        match &self.data {
            ProblemData::Quadratic(q) => q.nodes[i].matrix.clone(),
            ProblemData::Logistic(l) => l.nodes[i].hessian(y, l.regularization),
        }
    }

    pub fn hessian_diagonal(&self, i: usize, y: &DVector<f64>) -> DVector<f64> {
        match &self.data {
            ProblemData::Quadratic(q) => q.nodes[i].matrix.diagonal(),
            ProblemData::Logistic(l) => l.nodes[i].hessian_diagonal(y, l.regularization),
        }
    }

    /// `sum_i f_i(y)`.
    pub fn aggregate_value(&self, y: &DVector<f64>) -> f64 {
        (0..self.nodes()).map(|i| self.value(i, y)).sum()
    }

    pub fn aggregate_gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        (0..self.nodes()).fold(DVector::zeros(self.dim), |acc, i| acc + self.gradient(i, y))
    }

    pub fn aggregate_hessian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        (0..self.nodes()).fold(DMatrix::zeros(self.dim, self.dim), |acc, i| acc + self.hessian(i, y))
    }

    /// Stacked local gradients `(grad f_1(x_1); ...; grad f_N(x_N))`.
    pub fn stacked_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.dim;
        let mut out = DVector::zeros(x.len());
        for i in 0..self.nodes() {
            let xi = x.rows(i * n, n).into_owned();
            out.rows_mut(i * n, n).copy_from(&self.gradient(i, &xi));
        }
        out
    }

    /// Minimizer of `sum_i f_i`: a direct solve for quadratics, damped
    /// centralized Newton for logistic regression.
    pub fn reference_solution(&self) -> Result<DVector<f64>, ObjectiveError> {
        match self.data {
            ProblemData::Quadratic(_) => quadratic_solution(self),
            ProblemData::Logistic(_) => self.centralized_newton(1e-12, 200),
        }
    }

    fn centralized_newton(&self, tol: f64, max_iter: usize) -> Result<DVector<f64>, ObjectiveError> {
        let mut y = DVector::zeros(self.dim);
        let scale = self.aggregate_gradient(&y).norm().max(1.0);
        let mut grad_norm = f64::INFINITY;
        for _ in 0..max_iter {
            let grad = self.aggregate_gradient(&y);
            grad_norm = grad.norm();
            if grad_norm <= tol * scale {
                return Ok(y);
            }
            let hess = self.aggregate_hessian(&y);
            let step = hess.cholesky().ok_or(ObjectiveError::SingularAggregate)?.solve(&(-&grad));
            // Armijo backtracking on the aggregate objective.
            let f0 = self.aggregate_value(&y);
            let slope = grad.dot(&step);
            let mut t = 1.0;
            loop {
                let trial = &y + &step * t;
                if self.aggregate_value(&trial) <= f0 + 1e-4 * t * slope || t < 1e-12 {
                    y = trial;
                    break;
                }
                t *= 0.5;
            }
        }
        if grad_norm <= 1e-9 * scale {
            Ok(y)
        } else {
            Err(ObjectiveError::NoConvergence { gradient_norm: grad_norm })
        }
    }
}

/// Mean relative distance of the node estimates to the minimizer:
/// `(1/N) sum_i ||x_i - y*|| / ||y*||`.
pub fn error_e(x: &DVector<f64>, y_star: &DVector<f64>) -> Result<f64, ObjectiveError> {
    let n = y_star.len();
    let norm = y_star.norm();
    if norm == 0.0 {
        return Err(ObjectiveError::ZeroMinimizer);
    }
    if n == 0 || !x.len().is_multiple_of(n) {
        return Err(ObjectiveError::InvalidData("stacked vector does not match the minimizer dimension".into()));
    }
    let nodes = x.len() / n;
    let total: f64 = (0..nodes).map(|i| (x.rows(i * n, n) - y_star).norm()).sum();
    Ok(total / (nodes as f64 * norm))
}

/// Average aggregate objective over the node estimates:
/// `(1/N) sum_i sum_j f_j(x_i)`.
pub fn error_v(x: &DVector<f64>, instance: &ProblemInstance) -> f64 {
    let n = instance.dim();
    let nodes = instance.nodes();
    let total: f64 = (0..nodes).map(|i| instance.aggregate_value(&x.rows(i * n, n).into_owned())).sum();
    total / nodes as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_quadratic(pairs: &[(f64, f64)]) -> ProblemInstance {
        ProblemInstance::quadratic(
            pairs
                .iter()
                .map(|&(s, b)| QuadraticNode {
                    matrix: DMatrix::from_element(1, 1, s),
                    center: DVector::from_element(1, b),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn one_dimensional_collapse() {
        let inst = quadratic_generate(1, 1, 17).unwrap();
        let s = inst.quadratic_data().unwrap().nodes[0].matrix[(0, 0)];
        assert!((1.0..=101.0).contains(&s));
        assert!((inst.strong_convexity() - s).abs() < 1e-12);
        assert!((inst.smoothness() - s).abs() < 1e-12);
        let y = DVector::from_element(1, 3.0);
        let b = inst.quadratic_data().unwrap().nodes[0].center[0];
        assert!((inst.value(0, &y) - 0.5 * s * (3.0 - b).powi(2)).abs() < 1e-10);
    }

    #[test]
    fn paper_sized_instance_bounds() {
        let inst = quadratic_generate(100, 30, 1).unwrap();
        assert!(inst.strong_convexity() >= 1.0 - 1e-8);
        assert!(inst.smoothness() <= 101.0 + 1e-8);
        assert!(inst.strong_convexity() <= inst.smoothness());
    }

    #[test]
    fn single_node_minimizer_is_center() {
        let inst = quadratic_generate(5, 1, 2).unwrap();
        let y = quadratic_solution(&inst).unwrap();
        let b = &inst.quadratic_data().unwrap().nodes[0].center;
        assert!((y - b).amax() < 1e-10);
    }

    #[test]
    fn common_center_is_minimizer() {
        let inst = scalar_quadratic(&[(2.0, 7.0), (9.0, 7.0), (4.0, 7.0)]);
        assert!((quadratic_solution(&inst).unwrap()[0] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn two_node_scalar_minimizer() {
        let inst = scalar_quadratic(&[(2.0, 1.0), (4.0, 4.0)]);
        assert!((quadratic_solution(&inst).unwrap()[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn gradient_vanishes_at_center_and_hessian_is_constant() {
        let inst = quadratic_generate(4, 3, 9).unwrap();
        let q = inst.quadratic_data().unwrap();
        for i in 0..3 {
            assert!(inst.gradient(i, &q.nodes[i].center).amax() < 1e-12);
            let y = DVector::from_element(4, -2.5);
            assert_eq!(inst.hessian(i, &y), q.nodes[i].matrix);
            assert_eq!(inst.hessian_diagonal(i, &y), q.nodes[i].matrix.diagonal());
        }
    }

    #[test]
    fn quadratic_solution_requires_quadratic() {
        let ds = Dataset::new(DMatrix::from_element(2, 1, 1.0), vec![1.0, -1.0]).unwrap();
        let inst = logistic_from_dataset(&ds, 1, 1e-4, 0).unwrap();
        assert!(matches!(quadratic_solution(&inst), Err(ObjectiveError::WrongKind(_))));
    }

    #[test]
    fn zero_feature_logistic_collapses() {
        let ds = Dataset::new(DMatrix::zeros(1, 3), vec![1.0]).unwrap();
        let m = 0.3;
        let inst = logistic_from_dataset(&ds, 1, m, 0).unwrap();
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert!((inst.value(0, &y) - (2f64.ln() + 0.5 * m * y.norm_squared())).abs() < 1e-14);
        assert!((inst.hessian(0, &y) - DMatrix::identity(3, 3) * m).amax() < 1e-15);
        assert_eq!(inst.strong_convexity(), m);
        assert_eq!(inst.smoothness(), m);
    }

    #[test]
    fn logistic_partition_and_scaling() {
        let ds = Dataset::new(
            DMatrix::from_fn(23, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0),
            (0..23).map(|r| if r % 3 == 0 { 1.0 } else { -1.0 }).collect(),
        )
        .unwrap();
        let inst = logistic_from_dataset(&ds, 5, 1e-4, 42).unwrap();
        let counts = inst.sample_counts();
        assert_eq!(counts.iter().sum::<usize>(), 23);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        let mut seen: Vec<usize> =
            inst.logistic_data().unwrap().nodes.iter().flat_map(|n| n.samples.iter().copied()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
        assert_eq!(inst.smoothness(), 1.0 + 1e-4);
        assert!((inst.logistic_data().unwrap().loss_smoothness() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples() {
        let ds = Dataset::new(DMatrix::from_element(2, 1, 1.0), vec![1.0, -1.0]).unwrap();
        assert!(matches!(
            logistic_from_dataset(&ds, 3, 1e-4, 0),
            Err(ObjectiveError::TooFewSamples { samples: 2, nodes: 3 })
        ));
    }

    #[test]
    fn error_e_by_hand() {
        let y = DVector::from_element(1, 1.0);
        let x = DVector::from_vec(vec![2.0, 0.0]);
        assert!((error_e(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(error_e(&DVector::from_vec(vec![1.0, 1.0]), &y).unwrap(), 0.0);
        assert!(matches!(error_e(&x, &DVector::zeros(1)), Err(ObjectiveError::ZeroMinimizer)));
    }

    #[test]
    fn error_v_consensus_is_aggregate() {
        let inst = scalar_quadratic(&[(2.0, 1.0), (4.0, 4.0)]);
        let y = DVector::from_element(1, 0.5);
        let x = DVector::from_vec(vec![0.5, 0.5]);
        assert!((error_v(&x, &inst) - inst.aggregate_value(&y)).abs() < 1e-14);
    }

    #[test]
    fn logistic_reference_solution_is_stationary() {
        let ds = Dataset::new(
            DMatrix::from_fn(40, 3, |r, c| ((r * 13 + c * 5) % 7) as f64 / 3.0 - 1.0),
            (0..40).map(|r| if (r * 7) % 5 < 2 { 1.0 } else { -1.0 }).collect(),
        )
        .unwrap();
        let inst = logistic_from_dataset(&ds, 4, 1e-2, 3).unwrap();
        let y = inst.reference_solution().unwrap();
        assert!(inst.aggregate_gradient(&y).norm() < 1e-10);
    }
}
