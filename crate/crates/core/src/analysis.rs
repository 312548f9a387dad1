//! Convergence-factor analysis: relaxation intervals, splitting norms and
//! spectral radii, inner iteration bounds, outer contraction constants, and
//! monitors that evaluate the error recursions along a run.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::cost::Variant;
use crate::inner::{EsomSplitting, InnerError, JorSplitting, Splitting};
use crate::network::{Network, ZERO_EIGENVALUE_THRESHOLD};
use crate::objectives::{ObjectiveError, ProblemInstance};
use crate::pmm::{laplacian_apply, IterationView, Monitor, NewtonSystem, SolverConfig};

/// Dense iteration matrices are only assembled up to this size `nN`.
pub const DENSE_LIMIT: usize = 2000;

/// Relative rounding allowance of the inequality checks.
pub const INEQUALITY_SLACK: f64 = 1e-10;

/// Tolerance on the range condition for the optimal dual variable.
pub const RANGE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("dense assembly of a {size} x {size} matrix exceeds the limit of {limit}")]
    TooLarge { size: usize, limit: usize },
    #[error("spectral radius {sigma} >= 1 admits no finite inner iteration bound")]
    NoFiniteBound { sigma: f64 },
    #[error("zeta interval ({lower}, {upper}) is empty; it needs eps > 4M(m+M)/m = {required}")]
    InfeasibleZeta { lower: f64, upper: f64, required: f64 },
    #[error("zeta = {zeta} lies outside ({lower}, {upper})")]
    ZetaOutside { zeta: f64, lower: f64, upper: f64 },
    #[error("delta = {delta} is not positive for the chosen constants")]
    NonPositiveDelta { delta: f64 },
    #[error("invalid analysis input: {0}")]
    InvalidInput(String),
    #[error("gradient at the reference point has a consensus component {norm:e}; it is not a minimizer")]
    NotOptimal { norm: f64 },
    #[error(transparent)]
    Inner(#[from] InnerError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Upper end of the JOR relaxation interval `(0, gamma_max)`.
pub fn gamma_interval(m: f64, big_m: f64, alpha: f64, eps: f64, w_d: f64, w_m: f64) -> f64 {
    2.0 * (m + alpha * (1.0 - w_d) + eps) / (big_m + eps + alpha * (1.0 - w_m) + alpha * (1.0 - w_d))
}

/// Relaxation parameter used in practice; never above [`gamma_interval`].
pub fn practical_gamma(m: f64, big_m: f64, alpha: f64, eps: f64, w_d: f64) -> f64 {
    2.0 * (m + eps + alpha * (1.0 - w_d)) / (big_m + 2.0 * alpha + eps)
}

fn spectral_norm(block: &DMatrix<f64>) -> f64 {
    if block.is_empty() {
        return 0.0;
    }
    block.clone().svd(false, false).singular_values.max()
}

/// `max_i sum_j ||T_ij||_2` over the `n x n` blocks of `t`.
pub fn block_norm(t: &DMatrix<f64>, dim: usize) -> f64 {
    assert!(dim > 0 && t.nrows().is_multiple_of(dim) && t.is_square(), "matrix is not a grid of {dim} x {dim} blocks");
    let nodes = t.nrows() / dim;
    (0..nodes)
        .map(|i| (0..nodes).map(|j| spectral_norm(&t.view((i * dim, j * dim), (dim, dim)).into_owned())).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Closed-form block-norm bounds for graphs whose self weights all equal `w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplittingBounds {
    pub esom: f64,
    /// Bound for JOR with `gamma = 1`.
    pub indo: f64,
    /// Whether `eps > max(M - 2m, 0)`, the regime where `indo < 1`.
    pub indo_valid: bool,
}

pub fn splitting_bounds(m: f64, big_m: f64, alpha: f64, eps: f64, w: f64) -> SplittingBounds {
    let a = alpha * (1.0 - w);
    SplittingBounds {
        esom: 2.0 * a / (2.0 * a + eps + m),
        indo: (big_m - m + a) / (a + eps + m),
        indo_valid: eps > (big_m - 2.0 * m).max(0.0),
    }
}

/// Constant `c` with `||H d^l + g|| <= c sigma^l ||g||` for JOR from `d = 0`.
pub fn ell_constant(m: f64, big_m: f64, alpha: f64, eps: f64, w_d: f64, w_m: f64) -> f64 {
    ((big_m + 2.0 + eps) / (m + eps)) * ((eps + big_m + alpha * (1.0 - w_m)) / (eps + m + alpha * (1.0 - w_d))).sqrt()
}

/// Number of JOR iterations from `d = 0` that guarantees forcing level `eta`.
#[allow(clippy::too_many_arguments)]
pub fn ell_bound(
    eta: f64,
    m: f64,
    big_m: f64,
    alpha: f64,
    eps: f64,
    w_d: f64,
    w_m: f64,
    sigma: f64,
) -> Result<usize, AnalysisError> {
    if !(eta > 0.0) {
        return Err(AnalysisError::InvalidInput(format!("eta must be positive, got {eta}")));
    }
    if !(sigma < 1.0) {
        return Err(AnalysisError::NoFiniteBound { sigma });
    }
    if sigma <= 0.0 {
        return Ok(1);
    }
    let c = ell_constant(m, big_m, alpha, eps, w_d, w_m);
    let ratio = (eta / c).ln() / sigma.ln().abs();
    // ln(eta / c) < 0 whenever a bound above one is needed.
    Ok((-ratio).ceil().max(1.0) as usize)
}

/// Dense `H`.
pub fn assemble_hessian(system: &NewtonSystem<'_>) -> Result<DMatrix<f64>, AnalysisError> {
    let network = system.network();
    let n = system.dim();
    let size = n * network.len();
    if size > DENSE_LIMIT {
        return Err(AnalysisError::TooLarge { size, limit: DENSE_LIMIT });
    }
    let (alpha, eps) = (system.alpha(), system.eps());
    let mut h = DMatrix::zeros(size, size);
    for (i, hess) in system.hessians().iter().enumerate() {
        let mut block = h.view_mut((i * n, i * n), (n, n));
        block.copy_from(hess);
        for r in 0..n {
            block[(r, r)] += alpha * (1.0 - network.weight(i, i)) + eps;
        }
        for &j in network.neighbors(i) {
            let w = network.weight(i, j);
            for r in 0..n {
                h[(i * n + r, j * n + r)] = -alpha * w;
            }
        }
    }
    Ok(h)
}

/// Dense `T_gamma = I - gamma D^{-1} H = gamma D^{-1} G + (1 - gamma) I`.
pub fn jor_iteration_matrix(system: &NewtonSystem<'_>, gamma: f64) -> Result<DMatrix<f64>, AnalysisError> {
    let h = assemble_hessian(system)?;
    let size = h.nrows();
    let mut t = DMatrix::identity(size, size);
    for r in 0..size {
        let scale = gamma / h[(r, r)];
        for c in 0..size {
            t[(r, c)] -= scale * h[(r, c)];
        }
    }
    Ok(t)
}

/// Dense ESOM iteration matrix `D_E^{-1} B` with `B = D_E - H`.
pub fn esom_iteration_matrix(system: &NewtonSystem<'_>) -> Result<DMatrix<f64>, AnalysisError> {
    let h = assemble_hessian(system)?;
    let network = system.network();
    let n = system.dim();
    let mut d_e = DMatrix::zeros(h.nrows(), h.ncols());
    for i in 0..network.len() {
        let mut block = h.view((i * n, i * n), (n, n)).into_owned();
        for r in 0..n {
            block[(r, r)] += system.alpha() * (1.0 - network.weight(i, i));
        }
        d_e.view_mut((i * n, i * n), (n, n)).copy_from(&block);
    }
    let b = &d_e - &h;
    let factor = d_e.cholesky().ok_or(InnerError::FactorizationFailed { node: 0 })?;
    Ok(factor.solve(&b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerOptions {
    pub tolerance: f64,
    pub max_steps: usize,
}

impl Default for PowerOptions {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_steps: 100_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RadiusEstimate {
    pub value: f64,
    /// Power iterations used; zero for a direct eigensolve.
    pub steps: usize,
    /// False when power iteration hit its step cap.
    pub converged: bool,
}

/// Power iteration estimate `||A v||` of the dominant eigenvalue modulus of
/// an operator with real spectrum, from a fixed pseudo-random start.
pub fn power_iteration<F>(dim: usize, apply: F, options: PowerOptions) -> RadiusEstimate
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = DVector::from_fn(dim, |_, _| 0.5 + rng.random::<f64>());
    v.normalize_mut();
    let mut previous = f64::INFINITY;
    for step in 1..=options.max_steps {
        let w = apply(&v);
        let estimate = w.norm();
        if estimate == 0.0 || !estimate.is_finite() {
            return RadiusEstimate { value: estimate, steps: step, converged: estimate == 0.0 };
        }
        if (estimate - previous).abs() <= options.tolerance * estimate {
            return RadiusEstimate { value: estimate, steps: step, converged: true };
        }
        previous = estimate;
        v = w / estimate;
    }
    RadiusEstimate { value: previous, steps: options.max_steps, converged: false }
}

/// Largest eigenvalue modulus of a dense symmetric matrix.
fn symmetric_radius(s: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(s).eigenvalues.iter().fold(0.0f64, |acc, &l| acc.max(l.abs()))
}

/// Spectral radius of the inner iteration matrix.
///
/// JOR: `T_gamma` is similar to `I - gamma D^{-1/2} H D^{-1/2}`, solved
/// directly when small and by power iteration otherwise. ESOM: `D_E^{-1} B`
/// is similar to `L^{-1} B L^{-T}` with `D_E = L L^T`, by power iteration.
pub fn spectral_radius(
    splitting: &Splitting,
    system: &NewtonSystem<'_>,
    options: PowerOptions,
) -> Result<RadiusEstimate, AnalysisError> {
    let n = system.dim();
    let nodes = system.network().len();
    let size = n * nodes;
    match splitting {
        Splitting::Jor(jor) => {
            let mut inv_sqrt = DVector::zeros(size);
            for i in 0..nodes {
                inv_sqrt.rows_mut(i * n, n).copy_from(&jor.diagonal(i).map(|d| 1.0 / d.sqrt()));
            }
            let gamma = jor.gamma();
            if size <= DENSE_LIMIT {
                let h = assemble_hessian(system)?;
                let mut s = DMatrix::identity(size, size);
                for r in 0..size {
                    for c in 0..size {
                        s[(r, c)] -= gamma * inv_sqrt[r] * h[(r, c)] * inv_sqrt[c];
                    }
                }
                Ok(RadiusEstimate { value: symmetric_radius(s), steps: 0, converged: true })
            } else {
                let apply = |v: &DVector<f64>| {
                    let hv = system.apply(&v.component_mul(&inv_sqrt));
                    v - hv.component_mul(&inv_sqrt) * gamma
                };
                Ok(power_iteration(size, apply, options))
            }
        }
        Splitting::Esom(esom) => {
            let factors: Vec<DMatrix<f64>> = (0..nodes).map(|i| esom.lower_factor(i)).collect();
            let blocks: Vec<DMatrix<f64>> = (0..nodes).map(|i| esom.block(i)).collect();
            let apply = |v: &DVector<f64>| esom_symmetric_apply(&blocks, &factors, system, v);
            Ok(power_iteration(size, apply, options))
        }
    }
}

fn esom_symmetric_apply(
    blocks: &[DMatrix<f64>],
    factors: &[DMatrix<f64>],
    system: &NewtonSystem<'_>,
    v: &DVector<f64>,
) -> DVector<f64> {
    let n = system.dim();
    let mut w = DVector::zeros(v.len());
    for (i, l) in factors.iter().enumerate() {
        let block = l
            .tr_solve_lower_triangular(&v.rows(i * n, n).into_owned())
            .expect("Cholesky factor has a positive diagonal");
        w.rows_mut(i * n, n).copy_from(&block);
    }
    let hw = system.apply(&w);
    let mut out = DVector::zeros(v.len());
    for (i, l) in factors.iter().enumerate() {
        let bw = &blocks[i] * w.rows(i * n, n) - hw.rows(i * n, n);
        let block = l.solve_lower_triangular(&bw).expect("Cholesky factor has a positive diagonal");
        out.rows_mut(i * n, n).copy_from(&block);
    }
    out
}

/// `max_i ||Hess f_i(x_i) - diag(Hess f_i(x_i))||_2`, which must stay below `M - m`.
pub fn local_offdiagonal_norm(instance: &ProblemInstance, x: &DVector<f64>) -> f64 {
    let n = instance.dim();
    (0..instance.nodes())
        .map(|i| {
            let mut h = instance.hessian(i, &x.rows(i * n, n).into_owned());
            h.fill_diagonal(0.0);
            symmetric_radius(h)
        })
        .fold(0.0, f64::max)
}

/// Free constants of the outer contraction argument.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremInputs {
    pub m: f64,
    pub big_m: f64,
    pub alpha: f64,
    pub eps: f64,
    pub lambda2: f64,
    pub zeta: f64,
    pub beta: f64,
    pub phi: f64,
    /// `delta_tilde = ratio * delta`, in `(0, 1)`.
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremConstants {
    pub zeta: f64,
    pub beta: f64,
    pub phi: f64,
    pub delta_a: f64,
    pub delta_b: f64,
    pub delta: f64,
    pub delta_tilde: f64,
    /// Largest forcing level covered by the contraction guarantee.
    pub eta_bar: f64,
    /// `(1 + delta_tilde) / (1 + delta)`.
    pub contraction: f64,
}

/// The admissible `zeta` interval `((m+M)/(2mM), eps/(8M^2))`.
pub fn zeta_interval(m: f64, big_m: f64, eps: f64) -> Result<(f64, f64), AnalysisError> {
    let lower = (m + big_m) / (2.0 * m * big_m);
    let upper = eps / (8.0 * big_m * big_m);
    if lower < upper {
        Ok((lower, upper))
    } else {
        Err(AnalysisError::InfeasibleZeta { lower, upper, required: 4.0 * big_m * (m + big_m) / m })
    }
}

pub fn theorem_constants(inputs: &TheoremInputs) -> Result<TheoremConstants, AnalysisError> {
    let TheoremInputs { m, big_m, alpha, eps, lambda2, zeta, beta, phi, ratio } = *inputs;
    if !(beta > 1.0 && phi > 1.0) {
        return Err(AnalysisError::InvalidInput(format!("beta and phi must exceed 1, got {beta}, {phi}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(AnalysisError::InvalidInput(format!("delta ratio must lie in (0, 1), got {ratio}")));
    }
    let (lower, upper) = zeta_interval(m, big_m, eps)?;
    if !(zeta > lower && zeta < upper) {
        return Err(AnalysisError::ZetaOutside { zeta, lower, upper });
    }
    let m2 = big_m * big_m;
    let delta_a = 2.0 * m * big_m / ((m + big_m) * eps) - 1.0 / (eps * zeta);
    let first = (alpha * eps - 8.0 * m2 * alpha * zeta) * (phi - 1.0) * (beta - 1.0) * lambda2
        / (beta * eps * eps * (phi - 1.0) + 8.0 * m2 * beta * (beta - 1.0) * phi);
    let second = 2.0 * alpha * lambda2 / ((m + big_m) * phi * beta);
    let delta_b = first.min(second);
    let delta = delta_a.min(delta_b);
    if !(delta > 0.0) {
        return Err(AnalysisError::NonPositiveDelta { delta });
    }
    let delta_tilde = ratio * delta;
    let common = alpha * zeta + delta * beta * phi / ((phi - 1.0) * lambda2);
    let eta_sq =
        (delta_tilde * alpha * eps / (4.0 * (big_m + 2.0 * alpha).powi(2) * common)).min(delta_tilde / (8.0 * common));
    Ok(TheoremConstants {
        zeta,
        beta,
        phi,
        delta_a,
        delta_b,
        delta,
        delta_tilde,
        eta_bar: eta_sq.sqrt(),
        contraction: (1.0 + delta_tilde) / (1.0 + delta),
    })
}

/// Grid search over `zeta` (19 interior points), `beta` and `phi`, keeping
/// the feasible choice with the largest `delta`.
pub fn search_theorem_constants(
    m: f64,
    big_m: f64,
    alpha: f64,
    eps: f64,
    lambda2: f64,
    ratio: f64,
) -> Result<TheoremConstants, AnalysisError> {
    let (lower, upper) = zeta_interval(m, big_m, eps)?;
    const FACTORS: [f64; 7] = [1.1, 1.25, 1.5, 2.0, 3.0, 4.0, 8.0];
    let mut best: Option<TheoremConstants> = None;
    let mut last_err = None;
    for step in 1..20 {
        let zeta = lower + (upper - lower) * step as f64 / 20.0;
        for &beta in &FACTORS {
            for &phi in &FACTORS {
                let inputs = TheoremInputs { m, big_m, alpha, eps, lambda2, zeta, beta, phi, ratio };
                match theorem_constants(&inputs) {
                    Ok(c) if best.is_none_or(|b| c.delta > b.delta) => best = Some(c),
                    Ok(_) => {}
                    Err(e) => last_err = Some(e),
                }
            }
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(AnalysisError::NonPositiveDelta { delta: 0.0 }))
}

/// Optimal primal-dual pair and the maps needed to evaluate
/// `||u - u*||_G^2 = ||v - v*||^2 + alpha eps ||x - x*||^2`.
#[derive(Debug, Clone)]
pub struct LyapunovReference {
    dim: usize,
    alpha: f64,
    eps: f64,
    x_star: DVector<f64>,
    grad_star: DVector<f64>,
    v_star: DVector<f64>,
    /// Pseudo-inverse of `(I - W)^{1/2}` at node level.
    pinv_sqrt: DMatrix<f64>,
}

impl LyapunovReference {
    pub fn new(
        instance: &ProblemInstance,
        network: &Network,
        y_star: &DVector<f64>,
        alpha: f64,
        eps: f64,
    ) -> Result<Self, AnalysisError> {
        let n = instance.dim();
        let nodes = network.len();
        if y_star.len() != n || instance.nodes() != nodes {
            return Err(AnalysisError::InvalidInput("reference point does not match the problem".into()));
        }
        let laplacian = DMatrix::identity(nodes, nodes) - network.weights();
        let eig = SymmetricEigen::new(laplacian);
        let mut pinv_sqrt = DMatrix::zeros(nodes, nodes);
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda > ZERO_EIGENVALUE_THRESHOLD {
                let u = eig.eigenvectors.column(k);
                pinv_sqrt += (u * u.transpose()) / lambda.sqrt();
            }
        }
        let x_star = DVector::from_fn(n * nodes, |r, _| y_star[r % n]);
        let grad_star = instance.stacked_gradient(&x_star);
        let consensus =
            (0..n).map(|j| (0..nodes).map(|i| grad_star[i * n + j]).sum::<f64>().powi(2)).sum::<f64>().sqrt()
                / (nodes as f64).sqrt();
        if consensus > RANGE_TOLERANCE * grad_star.norm().max(1.0) {
            return Err(AnalysisError::NotOptimal { norm: consensus });
        }
        let v_star = -node_apply(&pinv_sqrt, &grad_star, n);
        Ok(Self { dim: n, alpha, eps, x_star, grad_star, v_star, pinv_sqrt })
    }

    pub fn x_star(&self) -> &DVector<f64> {
        &self.x_star
    }

    pub fn v_star(&self) -> &DVector<f64> {
        &self.v_star
    }

    /// Stacked `grad f(x*)`.
    pub fn grad_star(&self) -> &DVector<f64> {
        &self.grad_star
    }

    /// `v` with `q = (I - W)^{1/2} v` and `v` orthogonal to consensus.
    pub fn dual_of(&self, q: &DVector<f64>) -> DVector<f64> {
        node_apply(&self.pinv_sqrt, q, self.dim)
    }

    pub fn value(&self, x: &DVector<f64>, q: &DVector<f64>) -> f64 {
        (self.dual_of(q) - &self.v_star).norm_squared() + self.alpha * self.eps * (x - &self.x_star).norm_squared()
    }
}

/// `(A (x) I_n) v` for an `N x N` matrix `A` and node-major `v`.
fn node_apply(a: &DMatrix<f64>, v: &DVector<f64>, dim: usize) -> DVector<f64> {
    let nodes = a.nrows();
    let blocks = DMatrix::from_row_slice(nodes, dim, v.as_slice());
    let mixed = a * blocks;
    DVector::from_column_slice(mixed.transpose().as_slice())
}

/// Records the Lyapunov value after every outer iteration.
#[derive(Debug, Clone)]
pub struct LyapunovMonitor {
    reference: LyapunovReference,
    /// Value at the start of the run followed by one value per iteration.
    pub values: Vec<f64>,
}

impl LyapunovMonitor {
    pub fn new(reference: LyapunovReference) -> Self {
        Self { reference, values: Vec::new() }
    }

    /// Successive ratios `V_{k+1} / V_k`.
    pub fn ratios(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

impl Monitor for LyapunovMonitor {
    fn observe(&mut self, view: &IterationView<'_>) {
        if self.values.is_empty() {
            self.values.push(self.reference.value(view.x_prev, view.q_prev));
        }
        self.values.push(self.reference.value(view.x_next, view.q_next));
    }

    fn lyapunov(&self) -> Option<f64> {
        self.values.last().copied()
    }
}

/// One evaluated inequality `lhs <= rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bound {
    pub lhs: f64,
    pub rhs: f64,
    /// Magnitude of the terms involved, for the rounding allowance.
    pub scale: f64,
}

impl Bound {
    fn new(lhs: f64, rhs: f64, scale: f64) -> Self {
        Self { lhs, rhs, scale: scale.max(lhs.abs()).max(rhs.abs()) }
    }

    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs + INEQUALITY_SLACK * self.scale
    }

    pub fn margin(&self) -> f64 {
        self.rhs - self.lhs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityRecord {
    pub k: usize,
    /// Second-order Taylor remainder of the gradient.
    pub taylor: Bound,
    /// Inner forcing test, when the policy imposes one.
    pub forcing: Option<Bound>,
    /// Linearization error against remainder plus residual.
    pub error: Bound,
    /// Squared error bound in terms of the primal and dual errors.
    pub error_squared: Bound,
    /// One-step change of the Lyapunov function.
    pub descent: Bound,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub k: usize,
    pub check: &'static str,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityReport {
    pub iterations: usize,
    pub violations: Vec<Violation>,
}

impl InequalityReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Evaluates the error recursion behind the outer convergence proof at
/// every iteration.
#[derive(Debug, Clone)]
pub struct InequalityMonitor {
    reference: LyapunovReference,
    m: f64,
    big_m: f64,
    lipschitz: f64,
    zeta: f64,
    pub records: Vec<InequalityRecord>,
}

impl InequalityMonitor {
    /// `zeta > 0` is the free constant of the descent inequality.
    pub fn new(reference: LyapunovReference, instance: &ProblemInstance, zeta: f64) -> Self {
        Self {
            reference,
            m: instance.strong_convexity(),
            big_m: instance.smoothness(),
            lipschitz: instance.hessian_lipschitz(),
            zeta,
            records: Vec::new(),
        }
    }

    pub fn report(&self) -> InequalityReport {
        let mut violations = Vec::new();
        for r in &self.records {
            let checks = [
                ("taylor", Some(r.taylor)),
                ("forcing", r.forcing),
                ("error", Some(r.error)),
                ("error_squared", Some(r.error_squared)),
                ("descent", Some(r.descent)),
            ];
            for (check, bound) in checks {
                if let Some(b) = bound.filter(|b| !b.holds()) {
                    violations.push(Violation { k: r.k, check, lhs: b.lhs, rhs: b.rhs });
                }
            }
        }
        InequalityReport { iterations: self.records.len(), violations }
    }
}

impl Monitor for InequalityMonitor {
    fn observe(&mut self, view: &IterationView<'_>) {
        let (m, big_m, alpha, eps, zeta) = (self.m, self.big_m, view.alpha, view.eps, self.zeta);
        let n = view.instance.dim();
        let d = view.direction;
        let d_norm = d.norm();
        let hd = view.system.apply_local_hessian(d);

        let remainder = view.grad_prev - view.grad_next + &hd;
        let taylor_factor = (2.0 * big_m).min(0.5 * self.lipschitz * d_norm) * d_norm;
        let taylor =
            Bound::new(remainder.norm(), taylor_factor, view.grad_prev.norm() + view.grad_next.norm() + hd.norm());

        let g_norm = view.g.norm();
        let r_norm = view.residual.norm();
        let eta = view.forcing.unwrap_or(if g_norm > 0.0 { r_norm / g_norm } else { 0.0 });
        let forcing = view.forcing.map(|eta| Bound::new(r_norm, eta * g_norm, g_norm));

        let e = &remainder - view.residual;
        let e_norm = e.norm();
        let error = Bound::new(e_norm, taylor_factor + eta * g_norm, remainder.norm() + r_norm);

        let x_err_prev = (view.x_prev - self.reference.x_star()).norm();
        let v_err_prev = (self.reference.dual_of(view.q_prev) - self.reference.v_star()).norm();
        let error_squared = Bound::new(
            e_norm * e_norm,
            8.0 * big_m * big_m * d_norm * d_norm
                + 4.0 * eta * eta * (big_m + 2.0 * alpha).powi(2) * x_err_prev * x_err_prev
                + 8.0 * eta * eta * v_err_prev * v_err_prev,
            (remainder.norm() + r_norm).powi(2),
        );

        let before = self.reference.value(view.x_prev, view.q_prev);
        let after = self.reference.value(view.x_next, view.q_next);
        let x_err = view.x_next - self.reference.x_star();
        let grad_gap = (view.grad_next - self.reference.grad_star()).norm_squared();
        let x_sq = x_err.norm_squared();
        let x_lap = x_err.dot(&laplacian_apply(view.network, n, &x_err));
        let terms = [
            -2.0 * alpha / (m + big_m) * grad_gap,
            -(2.0 * alpha * m * big_m / (m + big_m) - alpha / zeta) * x_sq,
            -alpha * alpha * x_lap,
            -alpha * eps * d_norm * d_norm,
            alpha * zeta * e_norm * e_norm,
        ];
        let scale = before + after + terms.iter().map(|t| t.abs()).sum::<f64>();
        let descent = Bound::new(after - before, terms.iter().sum(), scale);

        self.records.push(InequalityRecord { k: view.k, taylor, forcing, error, error_squared, descent });
    }
}

/// Inner iteration bound for one forcing level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EllBound {
    pub eta: f64,
    /// `None` when the spectral radius admits no finite bound.
    pub ell: Option<usize>,
}

/// Analytical summary of one solver configuration on one instance, with the
/// Newton system linearized at `x = 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub variant: Variant,
    pub gamma: Option<f64>,
    pub gamma_max: f64,
    pub practical_gamma: f64,
    pub sigma_t: Option<f64>,
    pub sigma_steps: usize,
    pub sigma_converged: bool,
    pub block_norm_t: Option<f64>,
    /// Closed-form block-norm bounds; only defined for equal self weights.
    pub splitting_bounds: Option<SplittingBounds>,
    pub ell_bounds: Vec<EllBound>,
    pub theorem: Option<TheoremConstants>,
    pub theorem_status: String,
    pub offdiagonal_norm: f64,
    pub offdiagonal_limit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub power: PowerOptions,
    pub etas: Vec<f64>,
    /// Explicit `(zeta, beta, phi)`; searched on a grid when absent.
    pub theorem: Option<(f64, f64, f64)>,
    pub delta_ratio: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { power: PowerOptions::default(), etas: vec![0.5, 0.1, 0.01], theorem: None, delta_ratio: 0.5 }
    }
}

pub fn rate_report(
    instance: &ProblemInstance,
    network: &Network,
    config: &SolverConfig,
    options: &ReportOptions,
) -> Result<RateReport, AnalysisError> {
    let (m, big_m) = (instance.strong_convexity(), instance.smoothness());
    let (alpha, eps) = (config.alpha, config.eps);
    let s = network.spectrum();
    let gamma = config.resolved_gamma(instance, network);
    let x0 = DVector::zeros(instance.dim() * instance.nodes());
    let system = NewtonSystem::at(instance, network, &x0, alpha, eps);
    let splitting = match config.variant {
        Variant::Indo => Splitting::Jor(JorSplitting::build(&system, gamma)?),
        Variant::Esom => Splitting::Esom(EsomSplitting::build(&system)?),
    };
    let radius = spectral_radius(&splitting, &system, options.power)?;
    let block_norm_t = match config.variant {
        Variant::Indo => jor_iteration_matrix(&system, gamma),
        Variant::Esom => esom_iteration_matrix(&system),
    }
    .ok()
    .map(|t| block_norm(&t, instance.dim()));

    let ell_bounds = if config.variant == Variant::Indo {
        options
            .etas
            .iter()
            .map(|&eta| EllBound { eta, ell: ell_bound(eta, m, big_m, alpha, eps, s.w_d, s.w_m, radius.value).ok() })
            .collect()
    } else {
        Vec::new()
    };

    let theorem = match options.theorem {
        Some((zeta, beta, phi)) => theorem_constants(&TheoremInputs {
            m,
            big_m,
            alpha,
            eps,
            lambda2: s.lambda2,
            zeta,
            beta,
            phi,
            ratio: options.delta_ratio,
        }),
        None => search_theorem_constants(m, big_m, alpha, eps, s.lambda2, options.delta_ratio),
    };
    let (theorem, theorem_status) = match theorem {
        Ok(c) => (Some(c), "feasible".to_string()),
        Err(e) => (None, e.to_string()),
    };

    Ok(RateReport {
        variant: config.variant,
        gamma: (config.variant == Variant::Indo).then_some(gamma),
        gamma_max: gamma_interval(m, big_m, alpha, eps, s.w_d, s.w_m),
        practical_gamma: practical_gamma(m, big_m, alpha, eps, s.w_d),
        sigma_t: Some(radius.value),
        sigma_steps: radius.steps,
        sigma_converged: radius.converged,
        block_norm_t,
        splitting_bounds: network.has_equal_self_weights().then(|| splitting_bounds(m, big_m, alpha, eps, s.w_d)),
        ell_bounds,
        theorem,
        theorem_status,
        offdiagonal_norm: local_offdiagonal_norm(instance, &x0),
        offdiagonal_limit: big_m - m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inner::ResidualNorm;
    use crate::objectives::quadratic_generate;

    fn ring(nodes: usize) -> Network {
        let adj = (0..nodes).map(|i| vec![(i + nodes - 1) % nodes, (i + 1) % nodes]).collect();
        Network::from_adjacency(adj).unwrap()
    }

    /// `sqrt(lambda_max(A^T A))`, independent of the SVD route.
    fn gram_norm(a: &DMatrix<f64>) -> f64 {
        SymmetricEigen::new(a.transpose() * a).eigenvalues.max().max(0.0).sqrt()
    }

    #[test]
    fn gamma_interval_reference_value() {
        let g = gamma_interval(1.0, 101.0, 101.0, 101.0, 0.5, 0.5);
        assert!((g - 305.0 / 303.0).abs() < 1e-15);
        let (m, a, e, w) = (3.0, 2.0, 0.5, 0.25);
        let same = gamma_interval(m, m, a, e, w, w);
        assert!((same - 2.0 * (m + a * (1.0 - w) + e) / (m + e + 2.0 * a * (1.0 - w))).abs() < 1e-15);
    }

    #[test]
    fn block_norm_examples() {
        assert_eq!(block_norm(&DMatrix::identity(6, 6), 2), 1.0);
        let mut t = DMatrix::zeros(6, 6);
        t[(0, 2)] = 3.0;
        t[(1, 3)] = -4.0;
        assert!((block_norm(&t, 2) - 4.0).abs() < 1e-14);
        let t = DMatrix::from_fn(4, 4, |r, c| ((r * 4 + c) as f64 * 1.3).sin());
        let oracle = (0..2)
            .map(|i| (0..2).map(|j| gram_norm(&t.view((2 * i, 2 * j), (2, 2)).into_owned())).sum::<f64>())
            .fold(0.0, f64::max);
        assert!((block_norm(&t, 2) - oracle).abs() < 1e-12);
    }

    #[test]
    fn splitting_bounds_on_scaled_logistic_constants() {
        let b = splitting_bounds(1e-4, 1.0001, 1.0001, 1.0001, 0.5);
        assert!(b.esom < 1.0 && b.indo < 1.0 && b.indo_valid);
        let equal = splitting_bounds(2.0, 2.0, 4.0, 1.0, 0.5);
        assert!((equal.indo - 2.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn ell_bound_limits() {
        assert_eq!(ell_bound(1e6, 1.0, 2.0, 1.0, 1.0, 0.5, 0.5, 0.5).unwrap(), 1);
        assert!(matches!(ell_bound(0.1, 1.0, 2.0, 1.0, 1.0, 0.5, 0.5, 1.0), Err(AnalysisError::NoFiniteBound { .. })));
        let mut previous = 0;
        for sigma in [0.1, 0.5, 0.9, 0.99, 0.999] {
            let l = ell_bound(0.1, 1.0, 2.0, 1.0, 1.0, 0.5, 0.5, sigma).unwrap();
            assert!(l > previous);
            previous = l;
        }
    }

    #[test]
    fn jor_matrix_matches_matrix_free_step() {
        let instance = quadratic_generate(3, 4, 2).unwrap();
        let network = ring(4);
        let system = NewtonSystem::at(&instance, &network, &DVector::zeros(12), 7.0, 3.0);
        let jor = JorSplitting::build(&system, 0.6).unwrap();
        let t = jor_iteration_matrix(&system, 0.6).unwrap();
        let zero = DVector::zeros(12);
        for c in 0..12 {
            let mut e = DVector::zeros(12);
            e[c] = 1.0;
            assert!((jor.step(&network, &e, &zero) - t.column(c)).amax() < 1e-12);
        }
        let esom = EsomSplitting::build(&system).unwrap();
        let te = esom_iteration_matrix(&system).unwrap();
        for c in 0..12 {
            let mut e = DVector::zeros(12);
            e[c] = 1.0;
            assert!((esom.step(&network, &e, &zero) - te.column(c)).amax() < 1e-12);
        }
    }

    #[test]
    fn radius_special_cases() {
        // With alpha = 0 and scalar local costs H is diagonal, so T = 0 at gamma = 1.
        let instance = quadratic_generate(1, 3, 3).unwrap();
        let network = ring(3);
        let system = NewtonSystem::at(&instance, &network, &DVector::zeros(3), 0.0, 1.0);
        let jor = Splitting::Jor(JorSplitting::build(&system, 1.0).unwrap());
        assert!(spectral_radius(&jor, &system, PowerOptions::default()).unwrap().value < 1e-15);
        let t = jor_iteration_matrix(&system, 0.0).unwrap();
        assert_eq!(t, DMatrix::identity(3, 3));
    }

    #[test]
    fn radius_estimates_agree_with_dense_eigenvalues() {
        let instance = quadratic_generate(3, 5, 8).unwrap();
        let network = ring(5);
        let system = NewtonSystem::at(&instance, &network, &DVector::zeros(15), 20.0, 4.0);
        let options = PowerOptions { tolerance: 1e-13, max_steps: 100_000 };
        let cases = [
            (Splitting::Jor(JorSplitting::build(&system, 0.5).unwrap()), jor_iteration_matrix(&system, 0.5).unwrap()),
            (Splitting::Esom(EsomSplitting::build(&system).unwrap()), esom_iteration_matrix(&system).unwrap()),
        ];
        for (splitting, t) in cases {
            let dense = t.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
            let est = spectral_radius(&splitting, &system, options).unwrap();
            assert!(est.converged);
            assert!((est.value - dense).abs() < 1e-6 * dense.max(1e-3), "{} vs {dense}", est.value);
            assert!(est.value <= block_norm(&t, 3) + 1e-8);
        }
    }

    #[test]
    fn theorem_constants_reference_instance() {
        let inputs = TheoremInputs {
            m: 1.0,
            big_m: 2.0,
            alpha: 1000.0,
            eps: 1000.0,
            lambda2: 1.0,
            zeta: 10.0,
            beta: 2.0,
            phi: 2.0,
            ratio: 0.5,
        };
        let c = theorem_constants(&inputs).unwrap();
        assert!((c.delta_a - (4.0 / 3000.0 - 1.0 / 10_000.0)).abs() < 1e-15);
        assert!((c.delta_b - 680_000.0 / 2_000_128.0).abs() < 1e-12);
        assert_eq!(c.delta, c.delta_a);
        assert!(c.eta_bar > 0.0 && c.contraction < 1.0);
    }

    #[test]
    fn theorem_constants_boundaries_and_infeasibility() {
        let base = TheoremInputs {
            m: 1.0,
            big_m: 2.0,
            alpha: 1000.0,
            eps: 1000.0,
            lambda2: 1.0,
            zeta: 10.0,
            beta: 2.0,
            phi: 2.0,
            ratio: 0.5,
        };
        let near_lower = TheoremInputs { zeta: 0.75 + 1e-9, ..base };
        let c = theorem_constants(&near_lower).unwrap();
        assert!(c.delta_a > 0.0 && c.delta_a < 1e-9);
        let near_upper = TheoremInputs { zeta: 31.25 * (1.0 - 1e-9), ..base };
        let c = theorem_constants(&near_upper).unwrap();
        assert!(c.delta_b < 1e-6);
        let infeasible = TheoremInputs { eps: 20.0, zeta: 1.0, ..base };
        assert!(matches!(theorem_constants(&infeasible), Err(AnalysisError::InfeasibleZeta { .. })));
        let outside = TheoremInputs { zeta: 60.0, ..base };
        assert!(matches!(theorem_constants(&outside), Err(AnalysisError::ZetaOutside { .. })));
        assert!(search_theorem_constants(1.0, 2.0, 1000.0, 1000.0, 1.0, 0.5).unwrap().delta >= 0.00123);
    }

    #[test]
    fn lyapunov_vanishes_at_the_saddle_point() {
        let instance = quadratic_generate(2, 4, 5).unwrap();
        let network = ring(4);
        let y = instance.reference_solution().unwrap();
        let reference = LyapunovReference::new(&instance, &network, &y, 2.0, 3.0).unwrap();
        let q_star = -reference.grad_star();
        assert!(reference.value(reference.x_star(), &q_star) < 1e-12);
        let expected = reference.v_star().norm_squared();
        let at_zero_dual = reference.value(reference.x_star(), &DVector::zeros(8));
        assert!((at_zero_dual - expected).abs() < 1e-10 * expected);
        let wrong = &y + DVector::from_element(2, 1.0);
        assert!(matches!(
            LyapunovReference::new(&instance, &network, &wrong, 2.0, 3.0),
            Err(AnalysisError::NotOptimal { .. })
        ));
    }

    #[test]
    fn local_offdiagonal_norm_below_curvature_gap() {
        let instance = quadratic_generate(6, 3, 10).unwrap();
        let x = DVector::zeros(18);
        assert!(local_offdiagonal_norm(&instance, &x) <= instance.smoothness() - instance.strong_convexity());
    }

    #[test]
    fn inequality_monitor_is_clean_on_quadratic_run() {
        let instance = quadratic_generate(2, 4, 6).unwrap();
        let network = ring(4);
        let big_m = instance.smoothness();
        let y = instance.reference_solution().unwrap();
        let reference = LyapunovReference::new(&instance, &network, &y, big_m, big_m).unwrap();
        let mut monitor = InequalityMonitor::new(reference, &instance, 1.0);
        let mut config =
            SolverConfig::indo(big_m, big_m).with_inner(crate::inner::InnerPolicy::Forcing { eta: 0.1, cap: 10_000 });
        config.residual_norm = ResidualNorm::Two;
        crate::pmm::run(config, &instance, &network, 30, &mut [&mut monitor]).unwrap();
        let report = monitor.report();
        assert_eq!(report.iterations, 30);
        assert!(report.is_clean(), "{:?}", report.violations);
        assert!(monitor.records.iter().all(|r| r.taylor.lhs < 1e-9 * (1.0 + r.taylor.scale)));
    }
}
