//! Trial execution, certificate checks and output files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use sketchsolve::certificate::{
    theta_for_distribution, validate_run, BoundKind, Quantity, RateCertificate, ValidationReport, Verdict, MIN_TRIALS,
};
use sketchsolve::data::{build_instance, import_instance, MetricRule, MetricSpec};
use sketchsolve::dual::run_dual_solver;
use sketchsolve::inner::InnerMethod;
use sketchsolve::primal::{
    reference_solution, run_solver, ErrorBound, InexactnessModel, SolverConfig, SolverTrace, Termination,
};
use sketchsolve::spectral::{spectral_summary, SpectralMode, SpectralSummary};
use sketchsolve::{Error, LinearSystemInstance, SketchDistribution};

use crate::config::{ExperimentConfig, Method, SketchChoice};

/// Solver streams start here so they never coincide with the generator streams.
const TRIAL_STREAM_OFFSET: u64 = 1 << 32;

pub fn load_system(cfg: &ExperimentConfig) -> Result<LinearSystemInstance> {
    let data = match &cfg.container {
        Some(path) => {
            let mut data = import_instance(path).with_context(|| format!("importing {}", path.display()))?;
            match cfg.metric_override {
                Some(MetricRule::Identity) => data.metric = MetricSpec::Identity,
                Some(MetricRule::EqualToA) => data.metric = MetricSpec::EqualToA,
                None => {}
            }
            data
        }
        None => {
            let mut recipe = cfg.recipe.clone();
            if let Some(rule) = cfg.metric_override {
                recipe.metric = rule;
            }
            build_instance(&recipe).context("building problem instance")?.data
        }
    };
    data.to_system().map_err(|e| match e {
        Error::NotPositiveDefinite(_) | Error::NotSymmetric { .. } => anyhow::anyhow!(
            "method `{}` needs a symmetric positive definite A for the metric B = A: {e}",
            cfg.method
        ),
        other => other.into(),
    })
}

pub fn distribution(cfg: &ExperimentConfig, sys: &LinearSystemInstance) -> Result<SketchDistribution> {
    Ok(match cfg.sketch {
        SketchChoice::Coordinate => SketchDistribution::single_coordinate(sys.m())?,
        SketchChoice::Block => {
            let d = cfg.d.expect("validated");
            SketchDistribution::block_identity(sys.m(), d).with_context(|| format!("solver.d = {d}"))?
        }
        SketchChoice::Gaussian => SketchDistribution::gaussian(sys.m(), None)?,
    })
}

pub fn solver_config(cfg: &ExperimentConfig, sys: &LinearSystemInstance) -> Result<SolverConfig> {
    let mut sc = SolverConfig::new(distribution(cfg, sys)?);
    sc.omega = cfg.omega;
    sc.max_iters = cfg.max_iters;
    sc.rel_error_tol = cfg.tol;
    sc.inexactness = match cfg.inner {
        Some(inner) => InexactnessModel::Structured(inner),
        None => cfg.inexactness.clone(),
    };
    sc.track_inexactness = cfg.track_inexactness;
    sc.rng_seed = cfg.seed;
    sc.validate(sys)?;
    Ok(sc)
}

#[derive(Debug)]
pub struct TrialOutcome {
    pub trial: usize,
    pub result: std::result::Result<SolverTrace, Error>,
}

impl TrialOutcome {
    fn status(&self) -> &'static str {
        match &self.result {
            Ok(t) if t.termination == Termination::TolReached => "tol_reached",
            Ok(_) => "max_iters",
            Err(Error::Diverged { .. }) => "diverged",
            Err(_) => "failed",
        }
    }
}

/// Runs every trial on the worker pool; each trial owns its RNG stream.
pub fn run_trials(cfg: &ExperimentConfig, sys: &LinearSystemInstance, base: &SolverConfig) -> Result<Vec<TrialOutcome>> {
    let x0 = DVector::zeros(sys.n());
    let x_star = reference_solution(sys, &x0, None)?;
    let mut outcomes: Vec<TrialOutcome> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let mut sc = base.clone();
            sc.rng_stream = TRIAL_STREAM_OFFSET + trial as u64;
            let result = if cfg.method.is_dual() {
                run_dual_solver(sys, &sc, &x0, Some(&x_star)).map(|d| d.trace)
            } else {
                run_solver(sys, &sc, &x0, Some(&x_star))
            };
            TrialOutcome { trial, result }
        })
        .collect();
    outcomes.sort_by_key(|o| o.trial);
    Ok(outcomes)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Columns `trial,k,rel_error,wall_clock_s,eps_norm`; wall clock is
/// cumulative, `eps_norm` is empty when not tracked.
pub fn write_trace_csv(path: &Path, outcomes: &[TrialOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["trial", "k", "rel_error", "wall_clock_s", "eps_norm"])?;
    for o in outcomes {
        let Ok(trace) = &o.result else { continue };
        let mut clock = 0.0;
        for (k, rel) in trace.rel_errors.iter().enumerate() {
            clock += trace.wall_clock[k];
            let eps = trace.eps_norms[k].map(|e| e.to_string()).unwrap_or_default();
            w.write_record([o.trial.to_string(), k.to_string(), rel.to_string(), clock.to_string(), eps])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrialRecord {
    record: &'static str,
    trial: usize,
    status: &'static str,
    iterations: Option<usize>,
    final_rel_error: Option<f64>,
    wall_clock_s: Option<f64>,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct ValidationSummary {
    pub verdict: Verdict,
    pub bound_kind: &'static str,
    pub quantity: Quantity,
    pub horizon: usize,
    pub trials: usize,
    pub confidence_slack: f64,
    pub first_violation: Option<usize>,
    /// Largest `mean / (bound (1 + slack) + 3 stderr)` over the horizon.
    pub worst_ratio: f64,
    pub lambda_min_plus: f64,
    pub rho: f64,
    pub theta: Option<f64>,
    pub spectrum_enumerated: bool,
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub record: &'static str,
    pub name: String,
    pub method: &'static str,
    pub m: usize,
    pub n: usize,
    pub problem_note: Option<String>,
    pub trials: usize,
    pub tol: f64,
    pub tol_reached: usize,
    pub max_iters_reached: usize,
    pub diverged: usize,
    pub failed: usize,
    pub mean_iterations_to_tol: Option<f64>,
    pub median_iterations_to_tol: Option<f64>,
    pub total_wall_clock_s: f64,
    pub wall_clock_note: &'static str,
    pub validation: Option<ValidationSummary>,
}

impl RunSummary {
    /// Exit-status rule: every trial terminated, every validation passed.
    pub fn success(&self) -> bool {
        self.diverged == 0
            && self.failed == 0
            && self.validation.as_ref().is_none_or(|v| v.verdict == Verdict::Pass)
    }
}

fn median(sorted: &[usize]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2] as f64),
        _ => Some((sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0),
    }
}

pub fn summarize(
    cfg: &ExperimentConfig,
    sys: &LinearSystemInstance,
    outcomes: &[TrialOutcome],
    validation: Option<ValidationSummary>,
) -> RunSummary {
    let count = |s: &str| outcomes.iter().filter(|o| o.status() == s).count();
    let mut iters: Vec<usize> = outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().ok())
        .filter(|t| t.termination == Termination::TolReached)
        .map(|t| t.iterations)
        .collect();
    iters.sort_unstable();
    let mean = (!iters.is_empty()).then(|| iters.iter().sum::<usize>() as f64 / iters.len() as f64);
    RunSummary {
        record: "summary",
        name: cfg.name.clone(),
        method: cfg.method.name(),
        m: sys.m(),
        n: sys.n(),
        problem_note: cfg.problem_note.clone(),
        trials: outcomes.len(),
        tol: cfg.tol,
        tol_reached: count("tol_reached"),
        max_iters_reached: count("max_iters"),
        diverged: count("diverged"),
        failed: count("failed"),
        mean_iterations_to_tol: mean,
        median_iterations_to_tol: median(&iters),
        total_wall_clock_s: outcomes
            .iter()
            .filter_map(|o| o.result.as_ref().ok())
            .map(SolverTrace::total_wall_clock)
            .sum(),
        wall_clock_note: "environment-dependent",
        validation,
    }
}

/// One `trial` record per trial, then the `summary` record.
pub fn write_summary_jsonl(path: &Path, outcomes: &[TrialOutcome], summary: &RunSummary) -> Result<()> {
    let mut w = create(path)?;
    for o in outcomes {
        let (iterations, final_rel_error, wall_clock_s, error) = match &o.result {
            Ok(t) => (Some(t.iterations), t.rel_errors.last().copied(), Some(t.total_wall_clock()), None),
            Err(e) => (None, None, None, Some(e.to_string())),
        };
        let rec = TrialRecord {
            record: "trial",
            trial: o.trial,
            status: o.status(),
            iterations,
            final_rel_error,
            wall_clock_s,
            error,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    serde_json::to_writer(&mut w, summary)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn spectrum(cfg: &ExperimentConfig, sys: &LinearSystemInstance, dist: &SketchDistribution) -> Result<SpectralSummary> {
    let mode = SpectralMode::Auto {
        samples: cfg.samples,
        seed: cfg.seed,
    };
    Ok(spectral_summary(sys, dist, mode)?)
}

/// Certificate matching the configured method and error model.
pub fn certificate_kind(
    cfg: &ExperimentConfig,
    sys: &LinearSystemInstance,
    dist: &SketchDistribution,
    horizon: usize,
) -> Result<(BoundKind, Option<f64>)> {
    if cfg.method.is_structured() {
        if cfg.omega != 1.0 {
            bail!("certificate validation of structured method `{}` requires solver.omega = 1", cfg.method);
        }
        return Ok(match cfg.inner.expect("validated") {
            InnerMethod::Exact => (BoundKind::ProportionalDistance { q: 0.0 }, None),
            InnerMethod::Cg(opts) => {
                let mode = SpectralMode::Auto {
                    samples: cfg.samples,
                    seed: cfg.seed,
                };
                let est = theta_for_distribution(sys, dist, mode)?;
                (
                    BoundKind::StructuredInner {
                        theta: est.theta,
                        r: opts.iterations,
                    },
                    Some(est.theta),
                )
            }
            InnerMethod::NestedSketch { .. } => {
                bail!("no inner contraction estimate is available for inner.kind = \"nested-sp\"; use cg")
            }
        });
    }
    let kind = match (&cfg.inexactness, cfg.method) {
        (InexactnessModel::Exact, Method::Sdsa) => BoundKind::DualProportional { q: 0.0 },
        (InexactnessModel::Exact, _) => BoundKind::ProportionalDistance { q: 0.0 },
        (InexactnessModel::Abstract { bound, orthogonal, .. }, Method::Isdsa) => match (bound, orthogonal) {
            (ErrorBound::ProportionalDistance(q), false) => BoundKind::DualProportional { q: *q },
            _ => bail!("isdsa validation supports inexactness.bound = \"proportional-distance\" without orthogonality only"),
        },
        (InexactnessModel::Abstract { bound, orthogonal, .. }, _) => match (bound, *orthogonal) {
            (ErrorBound::Fixed(sigma), false) => BoundKind::ConstantSigmaPlateau { sigma: *sigma },
            (ErrorBound::Fixed(sigma), true) => BoundKind::OrthogonalSigmaSequence {
                sigmas: vec![*sigma; horizon],
            },
            (ErrorBound::Sequence(seq), false) => BoundKind::SigmaSequence { sigmas: seq.take(horizon) },
            (ErrorBound::Sequence(seq), true) => BoundKind::OrthogonalSigmaSequence { sigmas: seq.take(horizon) },
            (ErrorBound::ProportionalDistance(q), false) => BoundKind::ProportionalDistance { q: *q },
            (ErrorBound::ProportionalDistance(q), true) => BoundKind::OrthogonalProportionalDistance { q: *q },
            (ErrorBound::ProportionalFValue(q), true) => BoundKind::OrthogonalProportionalFValue { q: *q },
            (ErrorBound::ProportionalFValue(_), false) => {
                bail!("f-value proportional errors are only certified when inexactness.orthogonal = true")
            }
            (ErrorBound::Custom(_), _) => bail!("custom error bounds cannot be validated"),
        },
        (InexactnessModel::Structured(_), _) => unreachable!("structured methods handled above"),
    };
    Ok((kind, None))
}

/// Extends traces that hit the solution exactly before the horizon.
fn pad_to_horizon(traces: &mut [SolverTrace], horizon: usize) {
    for t in traces {
        while t.rel_errors.len() < horizon + 1 && t.rel_errors.last() == Some(&0.0) {
            t.rel_errors.push(0.0);
            t.wall_clock.push(0.0);
            t.eps_norms.push(None);
        }
    }
}

pub fn validate(
    cfg: &ExperimentConfig,
    sys: &LinearSystemInstance,
    dist: &SketchDistribution,
    outcomes: &[TrialOutcome],
) -> Result<ValidationSummary> {
    let horizon = cfg.max_iters;
    let mut traces: Vec<SolverTrace> = outcomes.iter().filter_map(|o| o.result.as_ref().ok().cloned()).collect();
    if traces.len() < MIN_TRIALS {
        bail!(
            "validation needs at least {MIN_TRIALS} terminated trials, got {} (set trials >= {MIN_TRIALS})",
            traces.len()
        );
    }
    pad_to_horizon(&mut traces, horizon);
    let spec = spectrum(cfg, sys, dist)?;
    let (kind, theta) = certificate_kind(cfg, sys, dist, horizon)?;
    let e0_sq = traces[0].initial_error_sq;
    let initial = match kind.quantity() {
        Quantity::Distance => e0_sq.sqrt(),
        Quantity::SquaredDistance => e0_sq,
        Quantity::DualGap => 0.5 * e0_sq,
    };
    let cert = RateCertificate::from_spectrum(kind, cfg.omega, &spec, initial)
        .context("the configured parameters admit no certificate")?;
    let report = validate_run(&traces, &cert, cfg.slack)?;
    Ok(validation_summary(&report, &cert, theta, spec.enumerated, horizon))
}

fn validation_summary(
    report: &ValidationReport,
    cert: &RateCertificate,
    theta: Option<f64>,
    enumerated: bool,
    horizon: usize,
) -> ValidationSummary {
    let worst_ratio = (0..report.means.len())
        .map(|k| {
            let allowed = report.bounds[k] * (1.0 + report.confidence_slack) + 3.0 * report.standard_errors[k];
            if allowed > 0.0 {
                report.means[k] / allowed
            } else if report.means[k] > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    ValidationSummary {
        verdict: report.verdict,
        bound_kind: report.bound_kind,
        quantity: report.quantity,
        horizon,
        trials: report.trials,
        confidence_slack: report.confidence_slack,
        first_violation: report.first_violation,
        worst_ratio,
        lambda_min_plus: cert.lambda_min_plus,
        rho: cert.rho,
        theta,
        spectrum_enumerated: enumerated,
    }
}

/// Runs an experiment end to end and writes both output files.
pub fn run_experiment(cfg: &ExperimentConfig, with_validation: bool) -> Result<RunSummary> {
    let sys = load_system(cfg)?;
    let mut sc = solver_config(cfg, &sys)?;
    if with_validation {
        if cfg.trials < MIN_TRIALS {
            bail!("validate needs trials >= {MIN_TRIALS}, got {}", cfg.trials);
        }
        // fixed horizon: run every trial for max_iters steps
        sc.rel_error_tol = 0.0;
    }
    let outcomes = run_trials(cfg, &sys, &sc)?;
    let validation = if with_validation {
        Some(validate(cfg, &sys, &sc.dist, &outcomes)?)
    } else {
        None
    };
    let summary = summarize(cfg, &sys, &outcomes, validation);
    write_trace_csv(&cfg.trace_path, &outcomes)?;
    write_summary_jsonl(&cfg.summary_path, &outcomes, &summary)?;
    Ok(summary)
}

pub const OMEGA_GRID: [f64; 7] = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75];

pub fn spectrum_report(cfg: &ExperimentConfig) -> Result<String> {
    use std::fmt::Write as _;
    let sys = load_system(cfg)?;
    let dist = distribution(cfg, &sys)?;
    let spec = spectrum(cfg, &sys, &dist)?;
    let mut out = String::new();
    writeln!(out, "lambda_min_plus {:.12e}", spec.lambda_min_plus)?;
    writeln!(out, "lambda_max      {:.12e}", spec.lambda_max)?;
    writeln!(out, "rank            {}", spec.rank)?;
    writeln!(out, "exactness       {}", spec.exactness)?;
    match spec.standard_error {
        Some(se) if !spec.enumerated => {
            writeln!(out, "source          monte-carlo ({} samples, stderr {se:.3e})", spec.samples)?
        }
        _ => writeln!(out, "source          enumerated ({} support elements)", spec.samples)?,
    }
    writeln!(out, "omega  rho")?;
    for omega in OMEGA_GRID {
        writeln!(out, "{omega:<6} {:.12}", spec.rho(omega))?;
    }
    Ok(out)
}
