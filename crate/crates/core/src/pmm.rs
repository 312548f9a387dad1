//! Proximal method of multipliers outer loop shared by INDO and ESOM.
//!
//! With `L = (I - W) (x) I_n` the iteration is
//!
//! ```text
//! g^k     = grad f(x^k) + q^k + alpha L x^k
//! H^k d^k = -g^k + r^k                (inner solver)
//! x^{k+1} = x^k + d^k
//! q^{k+1} = q^k + alpha L x^{k+1}
//! ```
//!
//! where `q = L^{1/2} v` is the neighbor-sparse image of the dual variable.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{gamma_interval, practical_gamma};
use crate::cost::{jor_step_cost, sp_cost, Variant};
use crate::inner::{
    initial_direction, inner_solve, stack, EsomSplitting, InnerError, InnerPolicy, JorSplitting, ResidualNorm,
    Splitting,
};
use crate::network::Network;
use crate::objectives::{error_e, error_v, ObjectiveError, ProblemInstance, ProblemKind};

/// Runs abort once the error metric exceeds this value.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Error)]
pub enum PmmError {
    #[error("invalid solver parameter: {0}")]
    InvalidParameter(String),
    #[error("gamma = {gamma} lies outside the JOR convergence interval (0, {upper})")]
    GammaOutsideInterval { gamma: f64, upper: f64 },
    #[error("state has {got} entries, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("inner solve failed at outer iteration {k}: {source}")]
    Inner {
        k: usize,
        #[source]
        source: InnerError,
    },
    #[error("error metric {metric:e} exceeded the divergence threshold at outer iteration {k}")]
    Diverged { k: usize, metric: f64 },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// How the inner iteration is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartPolicy {
    /// Always from zero.
    Zero,
    /// From the previous outer direction (zero at `k = 0`).
    #[default]
    Warm,
    /// Warm start, with the `k = 0` start obtained by JOR steps from zero
    /// until `||H d + g||_inf <= ||g||_inf`.
    InitialSolve,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverConfig {
    pub variant: Variant,
    pub alpha: f64,
    pub eps: f64,
    /// JOR relaxation; `None` selects the practical value. Ignored by ESOM.
    pub gamma: Option<f64>,
    pub inner: InnerPolicy,
    /// Applies to INDO only; ESOM always restarts from `d = 0`.
    pub start: StartPolicy,
    pub residual_norm: ResidualNorm,
    /// Reject relaxation parameters outside the guaranteed JOR interval.
    pub checked: bool,
    /// Iteration cap of the initial direction solve.
    pub initial_solve_cap: usize,
}

impl SolverConfig {
    pub fn new(variant: Variant, alpha: f64, eps: f64) -> Self {
        Self {
            variant,
            alpha,
            eps,
            gamma: None,
            inner: InnerPolicy::FixedCount(1),
            start: StartPolicy::Warm,
            residual_norm: ResidualNorm::Two,
            checked: false,
            initial_solve_cap: 1000,
        }
    }

    pub fn indo(alpha: f64, eps: f64) -> Self {
        Self::new(Variant::Indo, alpha, eps)
    }

    pub fn esom(alpha: f64, eps: f64) -> Self {
        Self::new(Variant::Esom, alpha, eps)
    }

    pub fn with_inner(mut self, inner: InnerPolicy) -> Self {
        self.inner = inner;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn with_start(mut self, start: StartPolicy) -> Self {
        self.start = start;
        self
    }

    pub fn checked(mut self) -> Self {
        self.checked = true;
        self
    }

    /// The relaxation parameter in effect for this instance.
    pub fn resolved_gamma(&self, instance: &ProblemInstance, network: &Network) -> f64 {
        self.gamma.unwrap_or_else(|| {
            let s = network.spectrum();
            practical_gamma(instance.strong_convexity(), instance.smoothness(), self.alpha, self.eps, s.w_d)
        })
    }

    pub fn validate(&self, instance: &ProblemInstance, network: &Network) -> Result<(), PmmError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(PmmError::InvalidParameter(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(PmmError::InvalidParameter(format!("eps must be positive, got {}", self.eps)));
        }
        match self.inner {
            InnerPolicy::FixedCount(0) => {
                return Err(PmmError::InvalidParameter("at least one inner iteration is required".into()))
            }
            InnerPolicy::Forcing { eta, cap } if !(eta > 0.0) || cap == 0 => {
                return Err(PmmError::InvalidParameter(format!(
                    "forcing needs eta > 0 and a positive cap, got eta = {eta}, cap = {cap}"
                )))
            }
            _ => {}
        }
        if instance.nodes() != network.len() {
            return Err(PmmError::InvalidParameter(format!(
                "problem has {} nodes but the network has {}",
                instance.nodes(),
                network.len()
            )));
        }
        if self.variant == Variant::Indo {
            let gamma = self.resolved_gamma(instance, network);
            if !(gamma > 0.0) {
                return Err(PmmError::InvalidParameter(format!("gamma must be positive, got {gamma}")));
            }
            if self.checked {
                let s = network.spectrum();
                let upper = gamma_interval(
                    instance.strong_convexity(),
                    instance.smoothness(),
                    self.alpha,
                    self.eps,
                    s.w_d,
                    s.w_m,
                );
                if gamma >= upper {
                    return Err(PmmError::GammaOutsideInterval { gamma, upper });
                }
            }
        }
        Ok(())
    }
}

/// Iterates of the outer loop plus cumulative cost counters.
#[derive(Debug, Clone, PartialEq)]
pub struct PmmState {
    /// Completed outer iterations.
    pub k: usize,
    pub x: DVector<f64>,
    pub q: DVector<f64>,
    /// Direction of the last outer iteration, used for warm starts.
    pub d_warm: DVector<f64>,
    /// Neighbor exchanges of `n`-vectors per node so far.
    pub comm_rounds: u64,
    /// Scalar products per node so far.
    pub sp_cost: f64,
}

impl PmmState {
    pub fn new(x0: DVector<f64>) -> Self {
        let len = x0.len();
        Self { k: 0, x: x0, q: DVector::zeros(len), d_warm: DVector::zeros(len), comm_rounds: 0, sp_cost: 0.0 }
    }

    pub fn zeros(dim: usize, nodes: usize) -> Self {
        Self::new(DVector::zeros(dim * nodes))
    }

    /// `max_j |sum_i q_i[j]| / (1 + ||q||)`; zero whenever `q` lies in the
    /// range of `I - W`.
    pub fn dual_imbalance(&self, dim: usize) -> f64 {
        let nodes = self.q.len() / dim;
        let mut worst = 0.0f64;
        for j in 0..dim {
            let s: f64 = (0..nodes).map(|i| self.q[i * dim + j]).sum();
            worst = worst.max(s.abs());
        }
        worst / (1.0 + self.q.norm())
    }
}

/// `(I - W) v` applied blockwise: `(1 - w_ii) v_i - sum_j w_ij v_j`.
pub fn laplacian_apply(network: &Network, dim: usize, v: &DVector<f64>) -> DVector<f64> {
    let blocks: Vec<DVector<f64>> = (0..network.len())
        .map(|i| {
            let mut acc = v.rows(i * dim, dim) * (1.0 - network.weight(i, i));
            for &j in network.neighbors(i) {
                acc.axpy(-network.weight(i, j), &v.rows(j * dim, dim), 1.0);
            }
            acc
        })
        .collect();
    stack(&blocks, dim)
}

/// Stacked local gradients, evaluated in parallel over nodes.
pub fn stacked_gradient(instance: &ProblemInstance, x: &DVector<f64>) -> DVector<f64> {
    let n = instance.dim();
    let blocks: Vec<DVector<f64>> =
        (0..instance.nodes()).into_par_iter().map(|i| instance.gradient(i, &x.rows(i * n, n).into_owned())).collect();
    stack(&blocks, n)
}

/// `g = grad f(x) + q + alpha (I - W) x`.
pub fn compute_g(state: &PmmState, instance: &ProblemInstance, network: &Network, alpha: f64) -> DVector<f64> {
    gradient_of_lagrangian(&stacked_gradient(instance, &state.x), state, network, instance.dim(), alpha)
}

fn gradient_of_lagrangian(
    grad: &DVector<f64>,
    state: &PmmState,
    network: &Network,
    dim: usize,
    alpha: f64,
) -> DVector<f64> {
    grad + &state.q + laplacian_apply(network, dim, &state.x) * alpha
}

/// The augmented Hessian `H = blockdiag(Hess f_i(x_i)) + alpha (I - W) (x) I + eps I`
/// at a fixed linearization point, applied matrix-free.
#[derive(Debug, Clone)]
pub struct NewtonSystem<'a> {
    network: &'a Network,
    alpha: f64,
    eps: f64,
    hessians: Vec<DMatrix<f64>>,
}

impl<'a> NewtonSystem<'a> {
    pub fn at(instance: &ProblemInstance, network: &'a Network, x: &DVector<f64>, alpha: f64, eps: f64) -> Self {
        let n = instance.dim();
        let hessians = (0..instance.nodes())
            .into_par_iter()
            .map(|i| instance.hessian(i, &x.rows(i * n, n).into_owned()))
            .collect();
        Self::from_hessians(network, hessians, alpha, eps)
    }

    pub fn from_hessians(network: &'a Network, hessians: Vec<DMatrix<f64>>, alpha: f64, eps: f64) -> Self {
        Self { network, alpha, eps, hessians }
    }

    pub fn network(&self) -> &'a Network {
        self.network
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn dim(&self) -> usize {
        self.hessians.first().map_or(0, |h| h.nrows())
    }

    pub fn hessians(&self) -> &[DMatrix<f64>] {
        &self.hessians
    }

    /// `H v`; one neighbor exchange of `v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let blocks: Vec<DVector<f64>> = (0..self.network.len())
            .into_par_iter()
            .map(|i| {
                let vi = v.rows(i * n, n);
                let diag = self.alpha * (1.0 - self.network.weight(i, i)) + self.eps;
                let mut acc = &self.hessians[i] * vi + vi * diag;
                for &j in self.network.neighbors(i) {
                    acc.axpy(-self.alpha * self.network.weight(i, j), &v.rows(j * n, n), 1.0);
                }
                acc
            })
            .collect();
        stack(&blocks, n)
    }

    /// `blockdiag(Hess f_i) v`.
    pub fn apply_local_hessian(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let blocks: Vec<DVector<f64>> = self.hessians.iter().enumerate().map(|(i, h)| h * v.rows(i * n, n)).collect();
        stack(&blocks, n)
    }
}

/// `H v` at linearization point `x_point`.
pub fn apply_h(
    instance: &ProblemInstance,
    network: &Network,
    alpha: f64,
    eps: f64,
    x_point: &DVector<f64>,
    v: &DVector<f64>,
) -> DVector<f64> {
    NewtonSystem::at(instance, network, x_point, alpha, eps).apply(v)
}

/// `x <- x + d` (unit step).
pub fn primal_update(state: &mut PmmState, d: &DVector<f64>) {
    state.x += d;
}

/// `q <- q + alpha (I - W) x`, with `x` already advanced.
pub fn dual_update(state: &mut PmmState, network: &Network, dim: usize, alpha: f64) {
    let lx = laplacian_apply(network, dim, &state.x);
    state.q.axpy(alpha, &lx, 1.0);
}

/// Error measure written to traces.
#[derive(Debug, Clone)]
pub enum Metric {
    /// Mean relative distance to a known minimizer.
    RelativeError(DVector<f64>),
    /// Average aggregate objective at the node estimates.
    AverageObjective,
}

impl Metric {
    /// Relative error for quadratics (minimizer solved directly), average
    /// objective otherwise.
    pub fn default_for(instance: &ProblemInstance) -> Result<Self, ObjectiveError> {
        Ok(match instance.kind() {
            ProblemKind::Quadratic => Metric::RelativeError(instance.reference_solution()?),
            ProblemKind::Logistic => Metric::AverageObjective,
        })
    }

    pub fn evaluate(&self, x: &DVector<f64>, instance: &ProblemInstance) -> Result<f64, ObjectiveError> {
        match self {
            Metric::RelativeError(y) => error_e(x, y),
            Metric::AverageObjective => Ok(error_v(x, instance)),
        }
    }
}

/// One row of a run trace, recorded after outer iteration `k` (1-based).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub k: usize,
    pub metric: f64,
    /// `||H d + g||_2` of the direction used in this iteration.
    pub residual: f64,
    pub comm_rounds: u64,
    pub sp_cost: f64,
    pub lyapunov: Option<f64>,
    pub inner_steps: usize,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub state: PmmState,
}

/// A run that stopped early; the records up to the failure are kept.
#[derive(Debug)]
pub struct RunFailure {
    pub error: PmmError,
    pub trace: Trace,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} recorded iterations)", self.error, self.trace.records.len())
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Everything a monitor may inspect about one outer iteration.
pub struct IterationView<'a> {
    /// 0-based index of the iteration just completed.
    pub k: usize,
    pub instance: &'a ProblemInstance,
    pub network: &'a Network,
    pub alpha: f64,
    pub eps: f64,
    pub x_prev: &'a DVector<f64>,
    pub x_next: &'a DVector<f64>,
    pub q_prev: &'a DVector<f64>,
    pub q_next: &'a DVector<f64>,
    pub direction: &'a DVector<f64>,
    /// `g^k`.
    pub g: &'a DVector<f64>,
    /// `r^k = H^k d^k + g^k`.
    pub residual: &'a DVector<f64>,
    pub grad_prev: &'a DVector<f64>,
    pub grad_next: &'a DVector<f64>,
    /// Newton system at `x^k`.
    pub system: &'a NewtonSystem<'a>,
    /// Forcing level when the inner policy imposes one.
    pub forcing: Option<f64>,
}

/// Observer invoked after every outer iteration.
pub trait Monitor {
    fn observe(&mut self, view: &IterationView<'_>);

    /// Value for the trace's Lyapunov column after the latest observation.
    fn lyapunov(&self) -> Option<f64> {
        None
    }
}

/// Tracks the worst relative violation of `sum_i q_i = 0`.
#[derive(Debug, Default, Clone)]
pub struct DualRangeMonitor {
    pub worst: f64,
    pub per_iteration: Vec<f64>,
}

impl Monitor for DualRangeMonitor {
    fn observe(&mut self, view: &IterationView<'_>) {
        let n = view.instance.dim();
        let nodes = view.q_next.len() / n;
        let mut worst = 0.0f64;
        for j in 0..n {
            let s: f64 = (0..nodes).map(|i| view.q_next[i * n + j]).sum();
            worst = worst.max(s.abs());
        }
        let rel = worst / (1.0 + view.q_next.norm());
        self.worst = self.worst.max(rel);
        self.per_iteration.push(rel);
    }
}

/// A configured solver bound to one problem and network.
pub struct Solver<'a> {
    config: SolverConfig,
    instance: &'a ProblemInstance,
    network: &'a Network,
    metric: Metric,
    gamma: f64,
    mean_samples: f64,
}

impl<'a> Solver<'a> {
    pub fn new(
        config: SolverConfig,
        instance: &'a ProblemInstance,
        network: &'a Network,
        metric: Metric,
    ) -> Result<Self, PmmError> {
        config.validate(instance, network)?;
        let gamma = config.resolved_gamma(instance, network);
        let counts = instance.sample_counts();
        let mean_samples =
            if counts.is_empty() { 0.0 } else { counts.iter().sum::<usize>() as f64 / counts.len() as f64 };
        Ok(Self { config, instance, network, metric, gamma, mean_samples })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_state(&self) -> PmmState {
        PmmState::zeros(self.instance.dim(), self.instance.nodes())
    }

    /// Runs `iterations` outer iterations from `x = 0`, `q = 0`.
    pub fn run(&self, iterations: usize, monitors: &mut [&mut dyn Monitor]) -> Result<Trace, RunFailure> {
        self.run_from(self.initial_state(), iterations, monitors)
    }

    pub fn build_splitting(&self, system: &NewtonSystem<'_>) -> Result<Splitting, InnerError> {
        Ok(match self.config.variant {
            Variant::Indo => Splitting::Jor(JorSplitting::build(system, self.gamma)?),
            Variant::Esom => Splitting::Esom(EsomSplitting::build(system)?),
        })
    }

    pub fn run_from(
        &self,
        mut state: PmmState,
        iterations: usize,
        monitors: &mut [&mut dyn Monitor],
    ) -> Result<Trace, RunFailure> {
        let instance = self.instance;
        let network = self.network;
        let n = instance.dim();
        let nodes = instance.nodes();
        let (alpha, eps) = (self.config.alpha, self.config.eps);
        let expected = n * nodes;
        let mut records = Vec::with_capacity(iterations);

        macro_rules! fail {
            ($err:expr) => {
                return Err(RunFailure { error: $err, trace: Trace { records, state } })
            };
        }

        for (name, len) in [("x", state.x.len()), ("q", state.q.len()), ("d_warm", state.d_warm.len())] {
            if len != expected {
                let _ = name;
                fail!(PmmError::DimensionMismatch { expected, got: len });
            }
        }

        let constant_hessian = instance.has_constant_hessian();
        let mut cached: Option<(NewtonSystem<'_>, Splitting)> = None;
        let mut grad = stacked_gradient(instance, &state.x);
        let forcing = match self.config.inner {
            InnerPolicy::Forcing { eta, .. } => Some(eta),
            InnerPolicy::FixedCount(_) => None,
        };

        for _ in 0..iterations {
            let k = state.k;
            let first = records.is_empty() && k == 0;
            // The x exchange feeding g^k is the one made by the previous dual
            // update, except before the very first iteration.
            let mut comm = u64::from(first);

            if cached.is_none() || !constant_hessian {
                let system = NewtonSystem::at(instance, network, &state.x, alpha, eps);
                match self.build_splitting(&system) {
                    Ok(splitting) => cached = Some((system, splitting)),
                    Err(source) => fail!(PmmError::Inner { k, source }),
                }
            }
            let (system, splitting) = cached.as_ref().expect("splitting built above");
            let g = gradient_of_lagrangian(&grad, &state, network, n, alpha);

            let mut extra_sp = 0.0;
            let start = match (self.config.start, splitting) {
                (StartPolicy::Zero, _) | (_, Splitting::Esom(_)) => DVector::zeros(expected),
                (StartPolicy::InitialSolve, Splitting::Jor(jor)) if first => {
                    match initial_direction(jor, system, &g, self.config.initial_solve_cap) {
                        Ok((d0, steps)) => {
                            // The first step acts on d = 0 and needs no neighbor data.
                            comm += (steps - 1) as u64;
                            extra_sp = jor_step_cost(n, nodes, steps);
                            d0
                        }
                        Err(source) => fail!(PmmError::Inner { k, source }),
                    }
                }
                _ => state.d_warm.clone(),
            };

            let solution =
                match inner_solve(splitting, system, &g, self.config.inner, &start, self.config.residual_norm) {
                    Ok(s) => s,
                    Err(source) => fail!(PmmError::Inner { k, source }),
                };

            let x_prev = state.x.clone();
            let q_prev = state.q.clone();
            primal_update(&mut state, &solution.direction);
            dual_update(&mut state, network, n, alpha);
            let grad_next = stacked_gradient(instance, &state.x);

            comm += solution.steps as u64 + 1;
            state.comm_rounds += comm;
            state.sp_cost += extra_sp
                + sp_cost(self.config.variant, instance.kind(), self.mean_samples, n, nodes, solution.steps, first);
            state.k += 1;
            state.d_warm = solution.direction.clone();

            let metric = match self.metric.evaluate(&state.x, instance) {
                Ok(v) => v,
                Err(e) => fail!(e.into()),
            };

            let view = IterationView {
                k,
                instance,
                network,
                alpha,
                eps,
                x_prev: &x_prev,
                x_next: &state.x,
                q_prev: &q_prev,
                q_next: &state.q,
                direction: &solution.direction,
                g: &g,
                residual: &solution.residual,
                grad_prev: &grad,
                grad_next: &grad_next,
                system,
                forcing,
            };
            let mut lyapunov = None;
            for monitor in monitors.iter_mut() {
                monitor.observe(&view);
                lyapunov = lyapunov.or(monitor.lyapunov());
            }

            records.push(TraceRecord {
                k: state.k,
                metric,
                residual: solution.residual_norm(),
                comm_rounds: state.comm_rounds,
                sp_cost: state.sp_cost,
                lyapunov,
                inner_steps: solution.steps,
            });
            grad = grad_next;

            if !(metric.abs() <= DIVERGENCE_THRESHOLD) {
                fail!(PmmError::Diverged { k: state.k, metric });
            }
        }
        Ok(Trace { records, state })
    }
}

/// Runs `iterations` outer iterations from zero with the default metric for
/// the problem kind.
pub fn run(
    config: SolverConfig,
    instance: &ProblemInstance,
    network: &Network,
    iterations: usize,
    monitors: &mut [&mut dyn Monitor],
) -> Result<Trace, RunFailure> {
    let setup = Metric::default_for(instance)
        .map_err(PmmError::from)
        .and_then(|metric| Solver::new(config, instance, network, metric));
    match setup {
        Ok(solver) => solver.run(iterations, monitors),
        Err(error) => Err(RunFailure {
            error,
            trace: Trace { records: Vec::new(), state: PmmState::zeros(instance.dim(), instance.nodes()) },
        }),
    }
}
