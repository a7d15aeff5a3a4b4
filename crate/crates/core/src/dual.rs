//! iSDSA: stochastic dual subspace ascent on
//! `D(y) = (b − Ax₀)ᵀy − ½‖Aᵀy‖²_{B⁻¹}`, whose primal images
//! `x(y) = x₀ + B⁻¹Aᵀy` reproduce the iBasic iterates.

use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::inner::InnerMethod;
use crate::linalg::LinearSystemInstance;
use crate::primal::{
    ibasic_step, reference_solution, relative, ErrorContext, ErrorMagnitude, InexactnessModel, SolverConfig,
    SolverState, SolverTrace, Termination, DIVERGENCE_THRESHOLD,
};
use crate::rng::{standard_normal_vector, SolverRng};
use crate::sketch::{draw_sketch, SketchSample};

/// Relative tolerance of the primal/dual correspondence check.
pub const CORRESPONDENCE_TOL: f64 = 1e-8;

/// `D(y) = (b − Ax₀)ᵀy − ½‖Aᵀy‖²_{B⁻¹}`
pub fn dual_objective(y: &DVector<f64>, sys: &LinearSystemInstance, x0: &DVector<f64>) -> Result<f64> {
    check_dim("dual point", sys.m(), y.len())?;
    check_dim("primal anchor", sys.n(), x0.len())?;
    let aty = sys.a_t() * y;
    Ok(sys.residual(x0).dot(y) - 0.5 * aty.dot(&sys.lift(y)))
}

/// `x(y) = x₀ + B⁻¹Aᵀy`
pub fn primal_image(y: &DVector<f64>, sys: &LinearSystemInstance, x0: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("dual point", sys.m(), y.len())?;
    check_dim("primal anchor", sys.n(), x0.len())?;
    Ok(x0 + sys.lift(y))
}

#[derive(Clone, Debug)]
pub struct DualState {
    pub y: DVector<f64>,
    pub x0: DVector<f64>,
    /// `x₀ + B⁻¹Aᵀy`, updated incrementally.
    pub primal_image: DVector<f64>,
    pub iteration: usize,
    pub x_star: DVector<f64>,
    pub rng: SolverRng,
}

impl DualState {
    /// Starts from `y₀ = 0`.
    pub fn new(sys: &LinearSystemInstance, x0: DVector<f64>, x_star: DVector<f64>, rng: SolverRng) -> Self {
        Self {
            y: DVector::zeros(sys.m()),
            primal_image: x0.clone(),
            x0,
            iteration: 0,
            x_star,
            rng,
        }
    }

    /// Rebuilds the cached primal image from `y`.
    pub fn refresh_primal_image(&mut self, sys: &LinearSystemInstance) {
        self.primal_image = &self.x0 + sys.lift(&self.y);
    }
}

#[derive(Clone, Debug)]
pub struct DualStepInfo {
    pub lambda: DVector<f64>,
    pub lambda_star: Option<DVector<f64>>,
    /// `ε^d_k`
    pub dual_error: Option<DVector<f64>>,
    /// `ε_k = B⁻¹Aᵀε^d_k`
    pub primal_error: Option<DVector<f64>>,
    /// `‖ε_k‖_B`
    pub epsilon_norm: Option<f64>,
}

fn check_state(state: &DualState, sys: &LinearSystemInstance) -> Result<()> {
    check_dim("dual iterate", sys.m(), state.y.len())?;
    check_dim("primal anchor", sys.n(), state.x0.len())?;
    check_dim("reference solution", sys.n(), state.x_star.len())
}

/// `ε^d = c g`, `g ~ N(0, I_m)`, scaled so that `‖B⁻¹Aᵀε^d‖_B` hits the
/// target. With `against = Some(v)`, `g` is first made orthogonal to `Av`,
/// which makes `B⁻¹Aᵀε^d` `B`-orthogonal to `v`.
fn dual_error<R: Rng + ?Sized>(
    sys: &LinearSystemInstance,
    rng: &mut R,
    target: f64,
    against: Option<&DVector<f64>>,
) -> (DVector<f64>, DVector<f64>) {
    let mut g = standard_normal_vector(rng, sys.m());
    if let Some(v) = against {
        let av = sys.a() * v;
        let avav = av.norm_squared();
        if avav > 0.0 {
            let coef = g.dot(&av) / avav;
            g.axpy(-coef, &av, 1.0);
        }
    }
    let lifted = sys.lift(&g);
    let norm = sys.metric().norm(&lifted);
    if !(target > 0.0 && norm > 0.0 && norm.is_finite()) {
        return (DVector::zeros(sys.m()), DVector::zeros(sys.n()));
    }
    let c = target / norm;
    (g * c, lifted * c)
}

/// One iSDSA step: `y ← y + ωS M† Sᵀ(b − A x(y)) + ε^d`.
pub fn isdsa_step(
    state: &mut DualState,
    sample: &SketchSample,
    cfg: &SolverConfig,
    sys: &LinearSystemInstance,
) -> Result<DualStepInfo> {
    if let InexactnessModel::Structured(inner) = &cfg.inexactness {
        return isdsa_structured_step(state, sample, inner, cfg, sys);
    }
    check_state(state, sys)?;
    let d = sample.sketched_residual(sys, &state.primal_image);
    let lambda_star = sample.least_norm(&d);
    let scaled = &lambda_star * cfg.omega;
    let primal_step = sample.lift(sys, &scaled);

    let errors = match &cfg.inexactness {
        InexactnessModel::Abstract {
            bound,
            orthogonal,
            magnitude,
        } => {
            let error = &state.primal_image - &state.x_star;
            let ctx = ErrorContext {
                iteration: state.iteration,
                x: &state.primal_image,
                x_star: &state.x_star,
                distance: sys.metric().norm(&error),
                f_value: (0.5 * d.dot(&lambda_star)).max(0.0),
            };
            let mut target = bound.target(&ctx);
            if *magnitude == ErrorMagnitude::Uniform {
                target *= state.rng.random::<f64>();
            }
            let against = orthogonal.then(|| error + &primal_step);
            Some(dual_error(sys, &mut state.rng, target, against.as_ref()))
        }
        _ => None,
    };

    state.y += sample.sketch().apply(&scaled, sys.m());
    state.primal_image += primal_step;
    let (dual_err, primal_err) = match errors {
        Some((ed, e)) => {
            state.y += &ed;
            state.primal_image += &e;
            (Some(ed), Some(e))
        }
        None => (None, None),
    };
    state.iteration += 1;
    Ok(DualStepInfo {
        epsilon_norm: Some(primal_err.as_ref().map_or(0.0, |e| sys.metric().norm(e))),
        lambda: lambda_star.clone(),
        lambda_star: Some(lambda_star),
        dual_error: dual_err,
        primal_error: primal_err,
    })
}

/// One step with the inner system solved by `inner`: `y ← y + ωSλ≈`.
pub fn isdsa_structured_step(
    state: &mut DualState,
    sample: &SketchSample,
    inner: &InnerMethod,
    cfg: &SolverConfig,
    sys: &LinearSystemInstance,
) -> Result<DualStepInfo> {
    check_state(state, sys)?;
    let d = sample.sketched_residual(sys, &state.primal_image);
    let report = inner.solve(sample, &d, &mut state.rng)?;
    let report = if cfg.track_inexactness {
        report.with_reference(sample, &d)
    } else {
        report
    };
    let scaled = &report.lambda * cfg.omega;
    state.y += sample.sketch().apply(&scaled, sys.m());
    state.primal_image += sample.lift(sys, &scaled);
    state.iteration += 1;

    let gap = report.exact_lambda.as_ref().map(|star| (&report.lambda - star) * cfg.omega);
    let dual_err = gap.as_ref().map(|g| sample.sketch().apply(g, sys.m()));
    let primal_err = gap.as_ref().map(|g| sample.lift(sys, g));
    Ok(DualStepInfo {
        epsilon_norm: primal_err.as_ref().map(|e| sys.metric().norm(e)),
        lambda: report.lambda,
        lambda_star: report.exact_lambda,
        dual_error: dual_err,
        primal_error: primal_err,
    })
}

#[derive(Clone, Debug)]
pub struct DualTrace {
    /// `rel_errors` hold `[D(y*) − D(y_k)] / [D(y*) − D(y₀)]`;
    /// `initial_error_sq` is `‖x₀ − x*‖²_B = 2[D(y*) − D(y₀)]`.
    pub trace: SolverTrace,
    pub dual_values: Vec<f64>,
    pub optimal_value: f64,
    pub final_y: DVector<f64>,
    pub y_history: Option<Vec<DVector<f64>>>,
}

/// Runs iSDSA from `y₀ = 0` until the relative dual gap reaches
/// `cfg.rel_error_tol` or `cfg.max_iters` steps are taken.
pub fn run_dual_solver(
    sys: &LinearSystemInstance,
    cfg: &SolverConfig,
    x0: &DVector<f64>,
    x_star_ref: Option<&DVector<f64>>,
) -> Result<DualTrace> {
    cfg.validate(sys)?;
    check_dim("starting point", sys.n(), x0.len())?;
    let x_star = reference_solution(sys, x0, x_star_ref)?;
    sys.warm_caches();
    let y_star = sys.dual_optimum(x0)?;
    let optimal_value = dual_objective(&y_star, sys, x0)?;
    let initial_error_sq = sys.metric().norm_squared(&(x0 - &x_star));
    let initial_gap = optimal_value;

    let mut state = DualState::new(sys, x0.clone(), x_star, cfg.rng());
    let mut dual_values = vec![0.0];
    let mut rel_errors = vec![relative(initial_gap, initial_gap)];
    let mut wall_clock = vec![0.0];
    let mut eps_norms = vec![None];
    let mut history = cfg.record_history.then(|| vec![x0.clone()]);
    let mut y_history = cfg.record_history.then(|| vec![state.y.clone()]);
    let mut termination = Termination::MaxIters;

    let converged = |rel: f64| initial_gap <= 0.0 || rel <= cfg.rel_error_tol;
    if converged(rel_errors[0]) {
        termination = Termination::TolReached;
    } else {
        while state.iteration < cfg.max_iters {
            let start = Instant::now();
            let sample = draw_sketch(&cfg.dist, sys, &mut state.rng)?;
            let info = isdsa_step(&mut state, &sample, cfg, sys)?;
            wall_clock.push(start.elapsed().as_secs_f64());

            let value = dual_objective(&state.y, sys, x0)?;
            let rel = relative((optimal_value - value).max(0.0), initial_gap);
            dual_values.push(value);
            rel_errors.push(rel);
            eps_norms.push(info.epsilon_norm);
            if let Some(h) = history.as_mut() {
                h.push(state.primal_image.clone());
            }
            if let Some(h) = y_history.as_mut() {
                h.push(state.y.clone());
            }
            if !(rel <= DIVERGENCE_THRESHOLD) {
                return Err(Error::Diverged {
                    iteration: state.iteration,
                    rel_error: rel,
                });
            }
            if converged(rel) {
                termination = Termination::TolReached;
                break;
            }
        }
    }

    Ok(DualTrace {
        trace: SolverTrace {
            rel_errors,
            wall_clock,
            eps_norms,
            termination,
            initial_error_sq,
            iterations: state.iteration,
            history,
            final_x: state.primal_image,
        },
        dual_values,
        optimal_value,
        final_y: state.y,
        y_history,
    })
}

#[derive(Clone, Debug)]
pub struct CorrespondenceReport {
    pub horizon: usize,
    /// `max_k ‖x_k − (x₀ + B⁻¹Aᵀy_k)‖₂`
    pub max_deviation: f64,
    pub tolerance: f64,
}

/// Runs iBasic and iSDSA side by side on the same random stream and checks
/// `x_k = x₀ + B⁻¹Aᵀy_k` for every `k ≤ horizon`.
pub fn verify_correspondence(
    sys: &LinearSystemInstance,
    cfg: &SolverConfig,
    x0: &DVector<f64>,
    horizon: usize,
) -> Result<CorrespondenceReport> {
    cfg.validate(sys)?;
    check_dim("starting point", sys.n(), x0.len())?;
    if matches!(cfg.inexactness, InexactnessModel::Abstract { .. }) {
        return Err(Error::invalid(
            "correspondence needs matched primal and dual errors; use exact or structured inexactness",
        ));
    }
    let x_star = reference_solution(sys, x0, None)?;
    let tolerance = CORRESPONDENCE_TOL * (1.0 + x0.norm());
    let mut primal = SolverState::new(x0.clone(), x_star.clone(), cfg.rng());
    let mut dual = DualState::new(sys, x0.clone(), x_star, cfg.rng());
    let mut max_deviation = 0.0f64;
    for k in 0..=horizon {
        let image = primal_image(&dual.y, sys, x0)?;
        let deviation = (&primal.x - image).norm();
        max_deviation = max_deviation.max(deviation);
        if !(deviation <= tolerance) {
            return Err(Error::CorrespondenceViolation {
                iteration: k,
                deviation,
                tolerance,
            });
        }
        if k == horizon {
            break;
        }
        let sample = draw_sketch(&cfg.dist, sys, &mut primal.rng)?;
        let dual_sample = draw_sketch(&cfg.dist, sys, &mut dual.rng)?;
        ibasic_step(&mut primal, &sample, cfg, sys)?;
        isdsa_step(&mut dual, &dual_sample, cfg, sys)?;
    }
    Ok(CorrespondenceReport {
        horizon,
        max_deviation,
        tolerance,
    })
}
