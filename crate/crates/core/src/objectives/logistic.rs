use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::libsvm::{self, Dataset};
use super::{ObjectiveError, ProblemInstance};

/// Samples held by one node.
#[derive(Debug, Clone)]
pub struct LogisticNode {
    /// One row per sample.
    pub features: DMatrix<f64>,
    pub labels: DVector<f64>,
    /// Row indices into the original dataset.
    pub samples: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct LogisticData {
    pub nodes: Vec<LogisticNode>,
    pub regularization: f64,
    /// Multiplier applied to every raw feature value.
    pub feature_scale: f64,
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
#[inline]
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

impl LogisticNode {
    fn margins(&self, y: &DVector<f64>) -> DVector<f64> {
        (&self.features * y).component_mul(&self.labels)
    }

    fn inv_count(&self) -> f64 {
        1.0 / self.labels.len() as f64
    }

    pub(crate) fn value(&self, y: &DVector<f64>, reg: f64) -> f64 {
        let loss: f64 = self.margins(y).iter().map(|&z| softplus(-z)).sum();
        loss * self.inv_count() + 0.5 * reg * y.norm_squared()
    }

    pub(crate) fn gradient(&self, y: &DVector<f64>, reg: f64) -> DVector<f64> {
        let coeffs = self.margins(y).zip_map(&self.labels, |z, l| -l * sigmoid(-z) * self.inv_count());
        self.features.tr_mul(&coeffs) + y * reg
    }

    fn curvatures(&self, y: &DVector<f64>) -> DVector<f64> {
        self.margins(y).map(|z| {
            let s = sigmoid(z);
            s * (1.0 - s) * self.inv_count()
        })
    }

    pub(crate) fn hessian(&self, y: &DVector<f64>, reg: f64) -> DMatrix<f64> {
        let c = self.curvatures(y);
        let mut scaled = self.features.clone();
        for (mut row, &w) in scaled.row_iter_mut().zip(c.iter()) {
            row *= w;
        }
        let mut h = self.features.tr_mul(&scaled);
        for j in 0..h.nrows() {
            h[(j, j)] += reg;
        }
        // Exact symmetry for downstream factorizations.
        (&h + h.transpose()) * 0.5
    }

    pub(crate) fn hessian_diagonal(&self, y: &DVector<f64>, reg: f64) -> DVector<f64> {
        let c = self.curvatures(y);
        let mut d = DVector::from_element(self.features.ncols(), reg);
        for (row, &w) in self.features.row_iter().zip(c.iter()) {
            for (j, &p) in row.iter().enumerate() {
                d[j] += w * p * p;
            }
        }
        d
    }

    /// `(1/|J|) * lambda_max(sum p p^T) / 4`, the loss-gradient Lipschitz bound.
    fn loss_smoothness(&self) -> f64 {
        let p = &self.features;
        let gram = if p.nrows() <= p.ncols() { p * p.transpose() } else { p.tr_mul(p) };
        let top = SymmetricEigen::new(gram).eigenvalues.max().max(0.0);
        0.25 * top * self.inv_count()
    }

    fn cubic_moment(&self) -> f64 {
        self.features.row_iter().map(|r| r.norm().powi(3)).sum::<f64>() * self.inv_count()
    }
}

/// Reads a LIBSVM file and distributes it over `nodes` nodes.
pub fn logistic_load(
    path: &Path,
    nodes: usize,
    regularization: f64,
    seed: u64,
) -> Result<ProblemInstance, ObjectiveError> {
    let file = File::open(path).map_err(|source| ObjectiveError::Io { path: path.display().to_string(), source })?;
    let dataset = libsvm::parse(BufReader::new(file))?;
    logistic_from_dataset(&dataset, nodes, regularization, seed)
}

/// Shuffles the samples with `seed`, splits them into `nodes` contiguous
/// blocks whose sizes differ by at most one, and rescales all features by a
/// single factor so the largest per-node loss smoothness bound equals one.
pub fn logistic_from_dataset(
    dataset: &Dataset,
    nodes: usize,
    regularization: f64,
    seed: u64,
) -> Result<ProblemInstance, ObjectiveError> {
    if nodes == 0 {
        return Err(ObjectiveError::InvalidData("node count must be positive".into()));
    }
    if dataset.len() < nodes {
        return Err(ObjectiveError::TooFewSamples { samples: dataset.len(), nodes });
    }
    if !(regularization > 0.0) {
        return Err(ObjectiveError::InvalidData(format!("regularization must be positive, got {regularization}")));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let base = dataset.len() / nodes;
    let extra = dataset.len() % nodes;
    let mut start = 0;
    let mut blocks = Vec::with_capacity(nodes);
    for i in 0..nodes {
        let size = base + usize::from(i < extra);
        let samples = order[start..start + size].to_vec();
        start += size;
        let features = dataset.features.select_rows(samples.iter());
        let labels = DVector::from_iterator(size, samples.iter().map(|&s| dataset.labels[s]));
        blocks.push(LogisticNode { features, labels, samples });
    }

    let raw = blocks.iter().map(LogisticNode::loss_smoothness).fold(0.0, f64::max);
    let feature_scale = if raw > 0.0 { 1.0 / raw.sqrt() } else { 1.0 };
    for block in &mut blocks {
        block.features *= feature_scale;
    }
    ProblemInstance::logistic(LogisticData { nodes: blocks, regularization, feature_scale })
}

impl LogisticData {
    /// Largest per-node loss smoothness bound after scaling.
    pub fn loss_smoothness(&self) -> f64 {
        self.nodes.iter().map(LogisticNode::loss_smoothness).fold(0.0, f64::max)
    }

    /// Hessian Lipschitz bound `max_i (1/|J_i|) sum ||p_j||^3 / (6 sqrt 3)`.
    pub fn hessian_lipschitz(&self) -> f64 {
        let moment = self.nodes.iter().map(LogisticNode::cubic_moment).fold(0.0, f64::max);
        moment / (6.0 * 3f64.sqrt())
    }
}
