//! Inner solvers for the Newton system `H d = -g`.
//!
//! Both solvers are stationary iterations on a splitting of the augmented
//! Hessian `H = blockdiag(Hess f_i) + alpha (I - W) (x) I_n + eps I`:
//!
//! * [`JorSplitting`]: `H = D - G` with `D` diagonal. One step is
//!   `d_i <- gamma D_ii^{-1} (G_ii d_i + alpha sum_j w_ij d_j - g_i) + (1 - gamma) d_i`.
//! * [`EsomSplitting`]: `H = D_E - B` with dense SPD blocks
//!   `[D_E]_ii = Hess f_i + 2 alpha (1 - w_ii) I + eps I`. One step is
//!   `d_i <- [D_E]_ii^{-1} (alpha (1 - w_ii) d_i + alpha sum_j w_ij d_j - g_i)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::Network;
use crate::pmm::NewtonSystem;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InnerError {
    #[error("relaxation parameter must be positive, got {0}")]
    NonPositiveGamma(f64),
    #[error("diagonal entry {entry} of node {node} is {value:e}; the splitting needs positive entries")]
    NonPositiveDiagonal { node: usize, entry: usize, value: f64 },
    #[error("dense block of node {node} is not positive definite")]
    FactorizationFailed { node: usize },
    #[error("forcing level not reached after {cap} inner iterations (residual {residual:e}, target {target:e})")]
    CapExceeded { cap: usize, residual: f64, target: f64 },
}

/// How many inner iterations to run per outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InnerPolicy {
    /// Exactly this many inner iterations.
    FixedCount(usize),
    /// Iterate until `||H d + g|| <= eta ||g||`, failing after `cap` iterations.
    Forcing { eta: f64, cap: usize },
}

/// Norm used by the forcing test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualNorm {
    #[default]
    Two,
    /// Largest absolute entry over all blocks, evaluated centrally.
    BlockInf,
}

impl ResidualNorm {
    pub fn of(self, v: &DVector<f64>) -> f64 {
        match self {
            ResidualNorm::Two => v.norm(),
            ResidualNorm::BlockInf => v.amax(),
        }
    }
}

/// Jacobi overrelaxation splitting `H = D - G`.
#[derive(Debug, Clone)]
pub struct JorSplitting {
    dim: usize,
    alpha: f64,
    gamma: f64,
    /// Entries of `D_ii`, node by node.
    diagonal: Vec<DVector<f64>>,
    /// `G_ii = diag(Hess f_i) - Hess f_i`.
    local: Vec<DMatrix<f64>>,
}

impl JorSplitting {
    pub fn build(system: &NewtonSystem<'_>, gamma: f64) -> Result<Self, InnerError> {
        if !(gamma > 0.0) {
            return Err(InnerError::NonPositiveGamma(gamma));
        }
        let network = system.network();
        let (alpha, eps) = (system.alpha(), system.eps());
        let mut diagonal = Vec::with_capacity(network.len());
        let mut local = Vec::with_capacity(network.len());
        for (i, hess) in system.hessians().iter().enumerate() {
            let shift = eps + alpha * (1.0 - network.weight(i, i));
            let d = hess.diagonal().add_scalar(shift);
            if let Some((entry, &value)) = d.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
                return Err(InnerError::NonPositiveDiagonal { node: i, entry, value });
            }
            let mut g = -hess.clone();
            g.fill_diagonal(0.0);
            diagonal.push(d);
            local.push(g);
        }
        Ok(Self { dim: system.dim(), alpha, gamma, diagonal, local })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn diagonal(&self, i: usize) -> &DVector<f64> {
        &self.diagonal[i]
    }

    pub fn local_offdiagonal(&self, i: usize) -> &DMatrix<f64> {
        &self.local[i]
    }

    /// Copy of this splitting with a different relaxation parameter.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self, InnerError> {
        if !(gamma > 0.0) {
            return Err(InnerError::NonPositiveGamma(gamma));
        }
        Ok(Self { gamma, ..self.clone() })
    }

    /// One JOR iteration; each node reads its neighbors' previous blocks.
    pub fn step(&self, network: &Network, d: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        let n = self.dim;
        let blocks: Vec<DVector<f64>> = (0..network.len())
            .into_par_iter()
            .map(|i| {
                let di = d.rows(i * n, n);
                let mut acc = &self.local[i] * di - g.rows(i * n, n);
                for &j in network.neighbors(i) {
                    acc.axpy(self.alpha * network.weight(i, j), &d.rows(j * n, n), 1.0);
                }
                let scaled = acc.component_div(&self.diagonal[i]) * self.gamma;
                scaled + di * (1.0 - self.gamma)
            })
            .collect();
        stack(&blocks, n)
    }
}

/// ESOM splitting `H = D_E - B` with factorized dense diagonal blocks.
#[derive(Clone)]
pub struct EsomSplitting {
    dim: usize,
    alpha: f64,
    factors: Vec<Cholesky<f64, Dyn>>,
}

impl std::fmt::Debug for EsomSplitting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EsomSplitting")
            .field("dim", &self.dim)
            .field("alpha", &self.alpha)
            .field("nodes", &self.factors.len())
            .finish()
    }
}

impl EsomSplitting {
    pub fn build(system: &NewtonSystem<'_>) -> Result<Self, InnerError> {
        let network = system.network();
        let (alpha, eps) = (system.alpha(), system.eps());
        let factors = system
            .hessians()
            .par_iter()
            .enumerate()
            .map(|(i, hess)| {
                let shift = 2.0 * alpha * (1.0 - network.weight(i, i)) + eps;
                let mut block = hess.clone();
                for j in 0..block.nrows() {
                    block[(j, j)] += shift;
                }
                Cholesky::new(block).ok_or(InnerError::FactorizationFailed { node: i })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { dim: system.dim(), alpha, factors })
    }

    /// Dense `[D_E]_ii`.
    pub fn block(&self, i: usize) -> DMatrix<f64> {
        let l = self.factors[i].l();
        &l * l.transpose()
    }

    /// Lower Cholesky factor `L_i` of `[D_E]_ii = L_i L_i^T`.
    pub fn lower_factor(&self, i: usize) -> DMatrix<f64> {
        self.factors[i].l()
    }

    pub fn solve_block(&self, i: usize, rhs: &DVector<f64>) -> DVector<f64> {
        self.factors[i].solve(rhs)
    }

    /// One ESOM iteration. From `d = 0` it yields `-D_E^{-1} g`.
    pub fn step(&self, network: &Network, d: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        let n = self.dim;
        let blocks: Vec<DVector<f64>> = (0..network.len())
            .into_par_iter()
            .map(|i| {
                let mut acc = d.rows(i * n, n) * (self.alpha * (1.0 - network.weight(i, i))) - g.rows(i * n, n);
                for &j in network.neighbors(i) {
                    acc.axpy(self.alpha * network.weight(i, j), &d.rows(j * n, n), 1.0);
                }
                self.factors[i].solve(&acc)
            })
            .collect();
        stack(&blocks, n)
    }
}

#[derive(Debug, Clone)]
pub enum Splitting {
    Jor(JorSplitting),
    Esom(EsomSplitting),
}

impl Splitting {
    pub fn step(&self, network: &Network, d: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        match self {
            Splitting::Jor(s) => s.step(network, d, g),
            Splitting::Esom(s) => s.step(network, d, g),
        }
    }
}

/// Result of one inner solve.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub direction: DVector<f64>,
    /// `H d + g`.
    pub residual: DVector<f64>,
    /// Inner iterations performed (ESOM's start from `d = 0` is not counted).
    pub steps: usize,
}

impl InnerSolution {
    pub fn residual_norm(&self) -> f64 {
        self.residual.norm()
    }
}

/// Runs the inner iteration for `H d = -g`.
///
/// JOR starts from `start`; ESOM ignores it and starts from `-D_E^{-1} g`.
pub fn inner_solve(
    splitting: &Splitting,
    system: &NewtonSystem<'_>,
    g: &DVector<f64>,
    policy: InnerPolicy,
    start: &DVector<f64>,
    norm: ResidualNorm,
) -> Result<InnerSolution, InnerError> {
    let network = system.network();
    let mut d = match splitting {
        Splitting::Jor(_) => start.clone(),
        Splitting::Esom(s) => s.step(network, &DVector::zeros(g.len()), g),
    };
    let mut steps = 0;
    match policy {
        InnerPolicy::FixedCount(count) => {
            for _ in 0..count {
                d = splitting.step(network, &d, g);
            }
            steps = count;
        }
        InnerPolicy::Forcing { eta, cap } => {
            let target = eta * norm.of(g);
            loop {
                let r = norm.of(&(system.apply(&d) + g));
                if r <= target {
                    break;
                }
                if steps >= cap || !r.is_finite() {
                    return Err(InnerError::CapExceeded { cap, residual: r, target });
                }
                d = splitting.step(network, &d, g);
                steps += 1;
            }
        }
    }
    let residual = system.apply(&d) + g;
    Ok(InnerSolution { direction: d, residual, steps })
}

/// JOR iterations from `d = 0` until `||H d + g||_inf <= ||g||_inf`, with at
/// least one step. Returns the direction and the number of steps.
pub fn initial_direction(
    splitting: &JorSplitting,
    system: &NewtonSystem<'_>,
    g: &DVector<f64>,
    cap: usize,
) -> Result<(DVector<f64>, usize), InnerError> {
    let network = system.network();
    let target = g.amax();
    let mut d = DVector::zeros(g.len());
    for step in 1..=cap.max(1) {
        d = splitting.step(network, &d, g);
        let r = (system.apply(&d) + g).amax();
        if r <= target {
            return Ok((d, step));
        }
        if !r.is_finite() {
            return Err(InnerError::CapExceeded { cap, residual: r, target });
        }
    }
    let residual = (system.apply(&d) + g).amax();
    Err(InnerError::CapExceeded { cap, residual, target })
}

pub(crate) fn stack(blocks: &[DVector<f64>], n: usize) -> DVector<f64> {
    let mut out = DVector::zeros(blocks.len() * n);
    for (i, b) in blocks.iter().enumerate() {
        out.rows_mut(i * n, n).copy_from(b);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Network;
    use crate::objectives::{quadratic_generate, ProblemInstance};
    use nalgebra::DMatrix;

    fn ring(nodes: usize) -> Network {
        let adj = (0..nodes).map(|i| vec![(i + nodes - 1) % nodes, (i + 1) % nodes]).collect();
        Network::from_adjacency(adj).unwrap()
    }

    /// Dense `H` written out entry by entry.
    fn dense_h(instance: &ProblemInstance, network: &Network, alpha: f64, eps: f64) -> DMatrix<f64> {
        let n = instance.dim();
        let size = n * network.len();
        let x = DVector::zeros(size);
        let mut h = DMatrix::zeros(size, size);
        for i in 0..network.len() {
            let hi = instance.hessian(i, &x.rows(i * n, n).into_owned());
            for a in 0..n {
                for b in 0..n {
                    h[(i * n + a, i * n + b)] = hi[(a, b)];
                }
            }
            for j in 0..network.len() {
                let coupling = if i == j { 1.0 - network.weight(i, i) } else { -network.weight(i, j) };
                for a in 0..n {
                    h[(i * n + a, j * n + a)] += alpha * coupling;
                }
            }
        }
        h + DMatrix::identity(size, size) * eps
    }

    fn setup(seed: u64) -> (ProblemInstance, Network) {
        (quadratic_generate(3, 4, seed).unwrap(), ring(4))
    }

    #[test]
    fn system_apply_matches_dense_matrix() {
        let (instance, network) = setup(1);
        let x = DVector::zeros(12);
        let system = NewtonSystem::at(&instance, &network, &x, 2.0, 0.5);
        let h = dense_h(&instance, &network, 2.0, 0.5);
        let v = DVector::from_fn(12, |r, _| (r as f64 * 0.7).sin());
        assert!((system.apply(&v) - &h * &v).amax() < 1e-10);
    }

    #[test]
    fn jor_step_matches_dense_splitting() {
        let (instance, network) = setup(2);
        let (alpha, eps, gamma) = (50.0, 10.0, 0.8);
        let system = NewtonSystem::at(&instance, &network, &DVector::zeros(12), alpha, eps);
        let jor = JorSplitting::build(&system, gamma).unwrap();
        let h = dense_h(&instance, &network, alpha, eps);
        let d_inv = DMatrix::from_diagonal(&h.diagonal().map(|v| 1.0 / v));
        let g_mat = DMatrix::from_diagonal(&h.diagonal()) - &h;
        let d = DVector::from_fn(12, |r, _| 1.0 + r as f64);
        let g = DVector::from_fn(12, |r, _| (r as f64).cos());
        let expected = (&d_inv * (&g_mat * &d - &g)) * gamma + &d * (1.0 - gamma);
        assert!((jor.step(&network, &d, &g) - expected).amax() < 1e-10);
    }

    #[test]
    fn esom_directions_are_truncated_series() {
        let (instance, network) = setup(3);
        let (alpha, eps) = (30.0, 5.0);
        let system = NewtonSystem::at(&instance, &network, &DVector::zeros(12), alpha, eps);
        let esom = EsomSplitting::build(&system).unwrap();
        let h = dense_h(&instance, &network, alpha, eps);
        let mut d_e = DMatrix::zeros(12, 12);
        for i in 0..4 {
            let mut block = h.view((i * 3, i * 3), (3, 3)).into_owned();
            for r in 0..3 {
                block[(r, r)] += alpha * (1.0 - network.weight(i, i));
            }
            d_e.view_mut((i * 3, i * 3), (3, 3)).copy_from(&block);
        }
        let d_e_inv = d_e.clone().try_inverse().unwrap();
        let b = &d_e - &h;
        let g = DVector::from_fn(12, |r, _| 1.0 - 0.3 * r as f64);
        let splitting = Splitting::Esom(esom);
        for ell in 0..4 {
            let mut series = DVector::zeros(12);
            let mut term = &d_e_inv * &g;
            for _ in 0..=ell {
                series += &term;
                term = &d_e_inv * (&b * &term);
            }
            let sol = inner_solve(
                &splitting,
                &system,
                &g,
                InnerPolicy::FixedCount(ell),
                &DVector::zeros(12),
                ResidualNorm::Two,
            )
            .unwrap();
            assert!((sol.direction + &series).amax() < 1e-10, "ell = {ell}");
            assert_eq!(sol.steps, ell);
        }
    }

    #[test]
    fn forcing_policy_meets_target_and_reports_residual() {
        let (instance, network) = setup(4);
        let system = NewtonSystem::at(&instance, &network, &DVector::zeros(12), 101.0, 101.0);
        let jor = Splitting::Jor(JorSplitting::build(&system, 0.7).unwrap());
        let g = DVector::from_element(12, 1.0);
        let policy = InnerPolicy::Forcing { eta: 1e-6, cap: 10_000 };
        let sol = inner_solve(&jor, &system, &g, policy, &DVector::zeros(12), ResidualNorm::Two).unwrap();
        assert!(sol.residual_norm() <= 1e-6 * g.norm());
        assert!((sol.residual.clone() - (system.apply(&sol.direction) + &g)).amax() < 1e-14);
    }

    #[test]
    fn forcing_cap_reports_divergence() {
        let (instance, network) = setup(5);
        let system = NewtonSystem::at(&instance, &network, &DVector::zeros(12), 1.0, 1.0);
        let jor = Splitting::Jor(JorSplitting::build(&system, 5.0).unwrap());
        let g = DVector::from_element(12, 1.0);
        let policy = InnerPolicy::Forcing { eta: 0.1, cap: 200 };
        let err = inner_solve(&jor, &system, &g, policy, &DVector::zeros(12), ResidualNorm::Two).unwrap_err();
        assert!(matches!(err, InnerError::CapExceeded { cap: 200, .. }));
    }

    #[test]
    fn initial_direction_takes_at_least_one_step() {
        let (instance, network) = setup(6);
        let system = NewtonSystem::at(&instance, &network, &DVector::zeros(12), 10.0, 10.0);
        let jor = JorSplitting::build(&system, 0.5).unwrap();
        let g = DVector::from_fn(12, |r, _| r as f64 - 5.0);
        let (d, steps) = initial_direction(&jor, &system, &g, 100).unwrap();
        assert!(steps >= 1);
        assert!(d.norm() > 0.0);
        assert!((system.apply(&d) + &g).amax() <= g.amax());
    }

    #[test]
    fn rejects_nonpositive_gamma() {
        let (instance, network) = setup(7);
        let system = NewtonSystem::at(&instance, &network, &DVector::zeros(12), 1.0, 1.0);
        assert_eq!(JorSplitting::build(&system, 0.0).unwrap_err(), InnerError::NonPositiveGamma(0.0));
    }

    #[test]
    fn block_infinity_norm_is_max_abs() {
        let v = DVector::from_vec(vec![1.0, -4.0, 2.0]);
        assert_eq!(ResidualNorm::BlockInf.of(&v), 4.0);
        assert!((ResidualNorm::Two.of(&v) - 21f64.sqrt()).abs() < 1e-15);
    }
}
