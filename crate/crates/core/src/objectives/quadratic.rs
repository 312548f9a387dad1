use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ObjectiveError, ProblemInstance};

/// Local cost `f_i(y) = 0.5 (y - b_i)^T B_ii (y - b_i)`.
#[derive(Debug, Clone)]
pub struct QuadraticNode {
    pub matrix: DMatrix<f64>,
    pub center: DVector<f64>,
}

impl QuadraticNode {
    pub(crate) fn value(&self, y: &DVector<f64>) -> f64 {
        let r = y - &self.center;
        0.5 * r.dot(&(&self.matrix * &r))
    }

    pub(crate) fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.matrix * (y - &self.center)
    }
}

#[derive(Debug, Clone)]
pub struct QuadraticData {
    pub nodes: Vec<QuadraticNode>,
}

/// Draws the simulated quadratic benchmark: centers uniform on `[1, 31]^n`,
/// spectra uniform on `[1, 101]`, eigenvectors from symmetrized Gaussian
/// matrices.
pub fn quadratic_generate(dim: usize, nodes: usize, seed: u64) -> Result<ProblemInstance, ObjectiveError> {
    if dim == 0 || nodes == 0 {
        return Err(ObjectiveError::InvalidData("dimension and node count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = (0..nodes)
        .map(|_| {
            let sample = SampledBlock::draw(dim, &mut rng);
            let matrix = &sample.basis * DMatrix::from_diagonal(&sample.scales) * sample.basis.transpose();
            // Exact symmetry; rounding in the triple product leaves ~1e-14 skew.
            let matrix = (&matrix + matrix.transpose()) * 0.5;
            QuadraticNode { matrix, center: sample.center }
        })
        .collect();
    ProblemInstance::quadratic(blocks)
}

struct SampledBlock {
    center: DVector<f64>,
    scales: DVector<f64>,
    basis: DMatrix<f64>,
}

impl SampledBlock {
    fn draw(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let centers = Uniform::new_inclusive(1.0, 31.0).expect("valid range");
        let spectrum = Uniform::new_inclusive(1.0, 101.0).expect("valid range");
        let center = DVector::from_fn(dim, |_, _| centers.sample(rng));
        let scales = DVector::from_fn(dim, |_, _| spectrum.sample(rng));
        let gaussian: DMatrix<f64> = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
        let basis = SymmetricEigen::new((&gaussian + gaussian.transpose()) * 0.5).eigenvectors;
        Self { center, scales, basis }
    }
}

/// Minimizer of the aggregate quadratic: `(sum B_ii) y = sum B_ii b_i`.
pub fn quadratic_solution(instance: &ProblemInstance) -> Result<DVector<f64>, ObjectiveError> {
    let data = instance.quadratic_data().ok_or(ObjectiveError::WrongKind("quadratic"))?;
    let n = instance.dim();
    let mut lhs = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for node in &data.nodes {
        lhs += &node.matrix;
        rhs += &node.matrix * &node.center;
    }
    let y = lhs
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| lhs.clone().lu().solve(&rhs))
        .ok_or(ObjectiveError::SingularAggregate)?;
    let residual = (&lhs * &y - &rhs).norm();
    if !(residual <= 1e-8 * rhs.norm().max(f64::MIN_POSITIVE)) {
        return Err(ObjectiveError::SingularAggregate);
    }
    Ok(y)
}
