//! Experiment configuration, orchestration and trace output.
//!
//! An experiment is a TOML file with `[problem]`, `[network]`, optional
//! `[monitors]` and one `[[runs]]` table per solver run. Every run writes
//! `<label>.csv` (one row per outer iteration) and `<label>.json` (resolved
//! parameters, rate report, status) into the output directory, next to the
//! shared `graph.txt` edge list.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    rate_report, search_theorem_constants, InequalityMonitor, InequalityReport, LyapunovMonitor, LyapunovReference,
    PowerOptions, RateReport, ReportOptions,
};
use crate::cost::Variant;
use crate::inner::{InnerPolicy, ResidualNorm};
use crate::network::{generate_rgg, Network, NetworkError, SpectralSummary};
use crate::numfmt::g17;
use crate::objectives::{logistic_load, quadratic_generate, ObjectiveError, ProblemInstance, ProblemKind};
use crate::pmm::{DualRangeMonitor, Metric, Monitor, PmmState, Solver, SolverConfig, StartPolicy, Trace};

/// Environment variable naming the directory that holds LIBSVM datasets.
pub const DATA_DIR_ENV: &str = "INDO_DATA_DIR";

pub const CSV_HEADER: &str = "k,metric,residual_2norm,comm_rounds_cum,sp_cost_cum,lyapunov,ell_used";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{}", config_message(*line, message))]
    Config { line: Option<usize>, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(
        "dataset {path} not found; place the LIBSVM file there, or point {DATA_DIR_ENV} \
         (or --data) at the directory containing it"
    )]
    DatasetMissing { path: PathBuf },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

fn config_message(line: Option<usize>, message: &str) -> String {
    match line {
        Some(line) => format!("config line {line}: {message}"),
        None => format!("config: {message}"),
    }
}

fn config_error(line: Option<usize>, message: impl Into<String>) -> HarnessError {
    HarnessError::Config { line, message: message.into() }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProblemSpec {
    Quadratic {
        dim: usize,
        seed: u64,
    },
    Logistic {
        /// LIBSVM file; relative paths resolve against the data directory.
        dataset: PathBuf,
        regularization: f64,
        /// Shuffle seed for the node partition.
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub nodes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorSpec {
    pub lyapunov: bool,
    pub inequalities: bool,
    pub rate_report: bool,
    /// Free constant of the descent inequality; defaults to the searched
    /// contraction constants, or `(m + M) / (m M)` when those are infeasible.
    pub zeta: Option<f64>,
    /// Step cap of power-iteration spectral radius estimates.
    pub power_steps: usize,
}

impl Default for MonitorSpec {
    fn default() -> Self {
        Self { lyapunov: false, inequalities: false, rate_report: true, zeta: None, power_steps: 100_000 }
    }
}

/// A number, or a multiple of `m` or `M` such as `"M"` or `"0.01M"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Value(f64),
    Expr(String),
}

impl Scalar {
    /// Parses into `(coefficient, symbol)` where symbol is `'m'`, `'M'` or `'1'`.
    fn parse(&self) -> Result<(f64, char), String> {
        let text = match self {
            Scalar::Value(v) => return Ok((*v, '1')),
            Scalar::Expr(text) => text.trim(),
        };
        let (coefficient, symbol) = match text.chars().last() {
            Some(c @ ('m' | 'M')) => (text[..text.len() - 1].trim().trim_end_matches('*').trim(), c),
            _ => (text, '1'),
        };
        let value = if coefficient.is_empty() && symbol != '1' {
            1.0
        } else {
            coefficient
                .parse::<f64>()
                .map_err(|_| format!("cannot read {text:?} as a number or a multiple of m or M"))?
        };
        Ok((value, symbol))
    }

    pub fn resolve(&self, m: f64, big_m: f64) -> Result<f64, String> {
        let (c, s) = self.parse()?;
        Ok(match s {
            'm' => c * m,
            'M' => c * big_m,
            _ => c,
        })
    }

    fn label(&self) -> String {
        match self {
            Scalar::Value(v) => format!("{v}"),
            Scalar::Expr(text) => text.trim().replace('*', ""),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaSpec {
    Value(f64),
    /// Only `"practical"` is accepted.
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// Output file stem; derived from the parameters when absent.
    pub name: Option<String>,
    pub variant: Variant,
    pub alpha: Scalar,
    pub eps: Scalar,
    pub gamma: Option<GammaSpec>,
    /// Fixed inner iteration count; mutually exclusive with `eta`.
    pub inner: Option<usize>,
    /// Forcing level of the inner solve.
    pub eta: Option<f64>,
    /// Inner iteration cap under a forcing level.
    #[serde(default = "default_cap")]
    pub cap: usize,
    #[serde(default = "default_true")]
    pub warm_start: bool,
    #[serde(default)]
    pub initial_solve: bool,
    #[serde(default)]
    pub checked: bool,
    #[serde(default)]
    pub residual_norm: ResidualNorm,
    pub iterations: usize,
}

fn default_cap() -> usize {
    1000
}

fn default_true() -> bool {
    true
}

impl RunSpec {
    pub fn inner_policy(&self) -> InnerPolicy {
        match self.eta {
            Some(eta) => InnerPolicy::Forcing { eta, cap: self.cap },
            None => InnerPolicy::FixedCount(self.inner.unwrap_or(1)),
        }
    }

    pub fn start_policy(&self) -> StartPolicy {
        match (self.warm_start, self.initial_solve) {
            (_, true) => StartPolicy::InitialSolve,
            (true, false) => StartPolicy::Warm,
            (false, false) => StartPolicy::Zero,
        }
    }

    /// `INDO-l`, `ESOM-l-alpha-eps`, or `...-eta<value>` under forcing.
    pub fn label(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        let inner = match self.eta {
            Some(eta) => format!("eta{eta}"),
            None => self.inner.unwrap_or(1).to_string(),
        };
        match self.variant {
            Variant::Indo => format!("INDO-{inner}"),
            Variant::Esom => format!("ESOM-{inner}-{}-{}", self.alpha.label(), self.eps.label()),
        }
    }

    fn check(&self) -> Result<(), String> {
        if self.iterations == 0 {
            return Err("iterations must be at least 1".into());
        }
        match (self.inner, self.eta) {
            (Some(_), Some(_)) => return Err("give either inner or eta, not both".into()),
            (Some(0), None) => return Err("inner must be at least 1".into()),
            (None, Some(eta)) if !(eta > 0.0 && eta < 1.0) => return Err(format!("eta must lie in (0, 1), got {eta}")),
            _ => {}
        }
        if self.eta.is_some() && self.cap == 0 {
            return Err("cap must be at least 1".into());
        }
        for (key, scalar) in [("alpha", &self.alpha), ("eps", &self.eps)] {
            let (c, _) = scalar.parse()?;
            if !(c > 0.0 && c.is_finite()) {
                return Err(format!("{key} must be positive, got {}", scalar.label()));
            }
        }
        match &self.gamma {
            Some(GammaSpec::Value(g)) if !(*g > 0.0) => Err(format!("gamma must be positive, got {g}")),
            Some(GammaSpec::Named(name)) if name != "practical" => {
                Err(format!("gamma must be a number or \"practical\", got {name:?}"))
            }
            _ => Ok(()),
        }
    }

    /// Solver configuration with `m` and `M` substituted.
    pub fn solver_config(&self, m: f64, big_m: f64) -> Result<SolverConfig, String> {
        let mut config = SolverConfig::new(self.variant, self.alpha.resolve(m, big_m)?, self.eps.resolve(m, big_m)?)
            .with_inner(self.inner_policy())
            .with_start(self.start_policy());
        if let Some(GammaSpec::Value(g)) = self.gamma {
            config = config.with_gamma(g);
        }
        config.checked = self.checked;
        config.residual_norm = self.residual_norm;
        Ok(config)
    }
}

/// A run entry together with the config line it starts on.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub line: usize,
    pub spec: RunSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub output_dir: Option<PathBuf>,
    pub problem: ProblemSpec,
    pub network: NetworkSpec,
    pub monitors: MonitorSpec,
    pub runs: Vec<RunEntry>,
    /// Directory of the config file; fallback base for relative dataset paths.
    pub base_dir: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    output_dir: Option<PathBuf>,
    problem: ProblemSpec,
    network: NetworkSpec,
    #[serde(default)]
    monitors: MonitorSpec,
    runs: Vec<toml::Spanned<RunSpec>>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config_str(&text, &base)
}

pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<ExperimentConfig, HarnessError> {
    let raw: RawConfig = toml::from_str(text)
        .map_err(|e| config_error(e.span().map(|s| line_of(text, s.start)), e.message().trim().to_string()))?;
    if raw.network.nodes < 2 {
        return Err(config_error(None, "network needs at least 2 nodes"));
    }
    match &raw.problem {
        ProblemSpec::Quadratic { dim: 0, .. } => return Err(config_error(None, "problem dim must be positive")),
        ProblemSpec::Logistic { regularization, .. } if !(*regularization > 0.0) => {
            return Err(config_error(None, "regularization must be positive"))
        }
        _ => {}
    }
    if raw.runs.is_empty() {
        return Err(config_error(None, "at least one [[runs]] entry is required"));
    }
    let mut labels = BTreeSet::new();
    let mut runs = Vec::with_capacity(raw.runs.len());
    for spanned in raw.runs {
        let line = line_of(text, spanned.span().start);
        let spec = spanned.into_inner();
        spec.check().map_err(|m| config_error(Some(line), m))?;
        if !labels.insert(spec.label()) {
            return Err(config_error(Some(line), format!("duplicate run label {}", spec.label())));
        }
        runs.push(RunEntry { line, spec });
    }
    Ok(ExperimentConfig {
        output_dir: raw.output_dir,
        problem: raw.problem,
        network: raw.network,
        monitors: raw.monitors,
        runs,
        base_dir: base_dir.to_path_buf(),
    })
}

/// Built-in experiment grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Fig1,
    Fig2,
    Fig3,
    Fig4,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig1 => "fig1",
            Preset::Fig2 => "fig2",
            Preset::Fig3 => "fig3",
            Preset::Fig4 => "fig4",
        }
    }

    pub fn source(self) -> &'static str {
        match self {
            Preset::Fig1 => include_str!("../presets/fig1.toml"),
            Preset::Fig2 => include_str!("../presets/fig2.toml"),
            Preset::Fig3 => include_str!("../presets/fig3.toml"),
            Preset::Fig4 => include_str!("../presets/fig4.toml"),
        }
    }

    /// The preset config, optionally with every run's iteration count replaced.
    pub fn config(self, iterations: Option<usize>) -> Result<ExperimentConfig, HarnessError> {
        let mut config = parse_config_str(self.source(), Path::new(""))?;
        if let Some(k) = iterations {
            if k == 0 {
                return Err(config_error(None, "iterations must be at least 1"));
            }
            for run in &mut config.runs {
                run.spec.iterations = k;
            }
        }
        Ok(config)
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fig1" => Ok(Preset::Fig1),
            "fig2" => Ok(Preset::Fig2),
            "fig3" => Ok(Preset::Fig3),
            "fig4" => Ok(Preset::Fig4),
            _ => Err(format!("unknown preset {s:?}; expected fig1, fig2, fig3 or fig4")),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Problem, network and resolved runs of a validated config.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub network: Network,
    pub instance: ProblemInstance,
    pub runs: Vec<ResolvedRun>,
}

#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub label: String,
    pub line: usize,
    pub spec: RunSpec,
    pub solver: SolverConfig,
}

/// Resolves a dataset path: absolute paths are kept, relative ones are
/// looked up in `data_dir`, then `$INDO_DATA_DIR`, then the config directory.
pub fn resolve_dataset(path: &Path, data_dir: Option<&Path>, base_dir: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    let root = data_dir
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| base_dir.to_path_buf());
    root.join(path)
}

/// Builds network and problem and validates every run against them.
pub fn prepare(config: &ExperimentConfig, data_dir: Option<&Path>) -> Result<Experiment, HarnessError> {
    let network = generate_rgg(config.network.nodes, config.network.seed)?;
    let instance = match &config.problem {
        ProblemSpec::Quadratic { dim, seed } => quadratic_generate(*dim, network.len(), *seed)?,
        ProblemSpec::Logistic { dataset, regularization, seed } => {
            let path = resolve_dataset(dataset, data_dir, &config.base_dir);
            if !path.is_file() {
                return Err(HarnessError::DatasetMissing { path });
            }
            logistic_load(&path, network.len(), *regularization, *seed)?
        }
    };
    let (m, big_m) = (instance.strong_convexity(), instance.smoothness());
    let mut runs = Vec::with_capacity(config.runs.len());
    for entry in &config.runs {
        let line = Some(entry.line);
        let solver = entry.spec.solver_config(m, big_m).map_err(|msg| config_error(line, msg))?;
        solver.validate(&instance, &network).map_err(|e| config_error(line, e.to_string()))?;
        runs.push(ResolvedRun { label: entry.spec.label(), line: entry.line, spec: entry.spec.clone(), solver });
    }
    Ok(Experiment { config: config.clone(), network, instance, runs })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProblemSummary {
    pub kind: ProblemKind,
    pub dim: usize,
    pub nodes: usize,
    pub strong_convexity: f64,
    pub smoothness: f64,
    pub hessian_lipschitz: f64,
    pub samples: Vec<usize>,
}

impl ProblemSummary {
    pub fn of(instance: &ProblemInstance) -> Self {
        Self {
            kind: instance.kind(),
            dim: instance.dim(),
            nodes: instance.nodes(),
            strong_convexity: instance.strong_convexity(),
            smoothness: instance.smoothness(),
            hessian_lipschitz: instance.hessian_lipschitz(),
            samples: instance.sample_counts(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkSummary {
    pub nodes: usize,
    pub seed: u64,
    pub edges: usize,
    pub spectrum: SpectralSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedParameters {
    pub variant: Variant,
    pub alpha: f64,
    pub eps: f64,
    pub alpha_spec: Scalar,
    pub eps_spec: Scalar,
    pub gamma: Option<f64>,
    pub inner: InnerPolicy,
    pub start: StartPolicy,
    pub residual_norm: ResidualNorm,
    pub checked: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed,
}

/// Contents of a run's JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSidecar {
    pub label: String,
    pub parameters: ResolvedParameters,
    pub problem: ProblemSummary,
    pub network: NetworkSummary,
    pub rate_report: Option<RateReport>,
    pub rate_report_error: Option<String>,
    pub inequalities: Option<InequalityReport>,
    /// Why Lyapunov or inequality monitoring could not be set up.
    pub monitor_error: Option<String>,
    pub max_dual_imbalance: f64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub iterations_completed: usize,
    pub final_metric: Option<f64>,
}

/// What a run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub label: String,
    pub csv: PathBuf,
    pub sidecar: RunSidecar,
}

/// Writes the trace as CSV with `%.17g` numbers; an absent Lyapunov value
/// is an empty field.
pub fn write_trace_csv<W: Write>(trace: &Trace, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in &trace.records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.k,
            g17(r.metric),
            g17(r.residual),
            r.comm_rounds,
            g17(r.sp_cost),
            r.lyapunov.map(g17).unwrap_or_default(),
            r.inner_steps
        )?;
    }
    out.flush()
}

fn report_options(monitors: &MonitorSpec) -> ReportOptions {
    ReportOptions {
        power: PowerOptions { max_steps: monitors.power_steps, ..PowerOptions::default() },
        ..ReportOptions::default()
    }
}

/// Rate reports for every run, without running the solver.
pub fn analyze(experiment: &Experiment) -> Vec<(String, Result<RateReport, String>)> {
    let options = report_options(&experiment.config.monitors);
    experiment
        .runs
        .par_iter()
        .map(|run| {
            let report = rate_report(&experiment.instance, &experiment.network, &run.solver, &options)
                .map_err(|e| e.to_string());
            (run.label.clone(), report)
        })
        .collect()
}

fn reference_point(instance: &ProblemInstance, metric: &Metric) -> Result<DVector<f64>, ObjectiveError> {
    match metric {
        Metric::RelativeError(y) => Ok(y.clone()),
        Metric::AverageObjective => instance.reference_solution(),
    }
}

/// Runs every entry of a prepared experiment and writes its outputs to `out_dir`.
pub fn run_prepared(experiment: &Experiment, out_dir: &Path) -> Result<Vec<RunOutcome>, HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_error(out_dir))?;
    let graph_path = out_dir.join("graph.txt");
    let file = File::create(&graph_path).map_err(io_error(&graph_path))?;
    experiment.network.write_edge_list(BufWriter::new(file)).map_err(io_error(&graph_path))?;

    let instance = &experiment.instance;
    let metric = Metric::default_for(instance)?;
    let monitors = &experiment.config.monitors;
    let reference =
        if monitors.lyapunov || monitors.inequalities { Some(reference_point(instance, &metric)?) } else { None };
    let network_summary = NetworkSummary {
        nodes: experiment.network.len(),
        seed: experiment.config.network.seed,
        edges: experiment.network.edge_count(),
        spectrum: *experiment.network.spectrum(),
    };
    let problem_summary = ProblemSummary::of(instance);

    experiment
        .runs
        .par_iter()
        .map(|run| {
            execute_run(experiment, run, &metric, reference.as_ref(), &problem_summary, &network_summary, out_dir)
        })
        .collect()
}

/// Prepares and runs a parsed config: the library form of `run <config>`.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
    data_dir: Option<&Path>,
) -> Result<Vec<RunOutcome>, HarnessError> {
    let experiment = prepare(config, data_dir)?;
    run_prepared(&experiment, out_dir)
}

#[allow(clippy::too_many_arguments)]
fn execute_run(
    experiment: &Experiment,
    run: &ResolvedRun,
    metric: &Metric,
    reference: Option<&DVector<f64>>,
    problem: &ProblemSummary,
    network_summary: &NetworkSummary,
    out_dir: &Path,
) -> Result<RunOutcome, HarnessError> {
    let instance = &experiment.instance;
    let network = &experiment.network;
    let monitors = &experiment.config.monitors;
    let solver_config = &run.solver;
    let (m, big_m) = (instance.strong_convexity(), instance.smoothness());

    let (rate, rate_report_error) = if monitors.rate_report {
        match rate_report(instance, network, solver_config, &report_options(monitors)) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };

    let lyapunov_ref = reference
        .map(|y| LyapunovReference::new(instance, network, y, solver_config.alpha, solver_config.eps))
        .transpose();
    let (lyapunov_ref, monitor_error) = match lyapunov_ref {
        Ok(r) => (r, None),
        Err(e) => (None, Some(e.to_string())),
    };
    let zeta = monitors.zeta.unwrap_or_else(|| {
        search_theorem_constants(m, big_m, solver_config.alpha, solver_config.eps, network.spectrum().lambda2, 0.5)
            .map(|c| c.zeta)
            .unwrap_or((m + big_m) / (m * big_m))
    });
    let mut lyapunov = lyapunov_ref.as_ref().filter(|_| monitors.lyapunov).map(|r| LyapunovMonitor::new(r.clone()));
    let mut inequalities = lyapunov_ref
        .as_ref()
        .filter(|_| monitors.inequalities)
        .map(|r| InequalityMonitor::new(r.clone(), instance, zeta));
    let mut dual = DualRangeMonitor::default();

    let result = {
        let mut observers: Vec<&mut dyn Monitor> = vec![&mut dual];
        if let Some(l) = lyapunov.as_mut() {
            observers.push(l);
        }
        if let Some(i) = inequalities.as_mut() {
            observers.push(i);
        }
        Solver::new(solver_config.clone(), instance, network, metric.clone())
            .map_err(|e| (e, None))
            .and_then(|solver| solver.run(run.spec.iterations, &mut observers).map_err(|f| (f.error, Some(f.trace))))
    };
    let (trace, error) = match result {
        Ok(trace) => (trace, None),
        Err((error, partial)) => {
            let trace = partial.unwrap_or_else(|| Trace {
                records: Vec::new(),
                state: PmmState::zeros(instance.dim(), instance.nodes()),
            });
            (trace, Some(error.to_string()))
        }
    };

    let csv = out_dir.join(format!("{}.csv", run.label));
    let file = File::create(&csv).map_err(io_error(&csv))?;
    write_trace_csv(&trace, BufWriter::new(file)).map_err(io_error(&csv))?;

    let sidecar = RunSidecar {
        label: run.label.clone(),
        parameters: ResolvedParameters {
            variant: solver_config.variant,
            alpha: solver_config.alpha,
            eps: solver_config.eps,
            alpha_spec: run.spec.alpha.clone(),
            eps_spec: run.spec.eps.clone(),
            gamma: (solver_config.variant == Variant::Indo).then(|| solver_config.resolved_gamma(instance, network)),
            inner: solver_config.inner,
            start: solver_config.start,
            residual_norm: solver_config.residual_norm,
            checked: solver_config.checked,
            iterations: run.spec.iterations,
        },
        problem: problem.clone(),
        network: network_summary.clone(),
        rate_report: rate,
        rate_report_error,
        inequalities: inequalities.as_ref().map(InequalityMonitor::report),
        max_dual_imbalance: dual.worst,
        monitor_error,
        status: if error.is_some() { RunStatus::Failed } else { RunStatus::Completed },
        error,
        iterations_completed: trace.records.len(),
        final_metric: trace.records.last().map(|r| r.metric),
    };
    let json_path = out_dir.join(format!("{}.json", run.label));
    let mut json = serde_json::to_string_pretty(&sidecar)?;
    json.push('\n');
    fs::write(&json_path, json).map_err(io_error(&json_path))?;
    Ok(RunOutcome { label: run.label.clone(), csv, sidecar })
}
