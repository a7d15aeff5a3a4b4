//! iBasic: sketch-and-project with injected or structured inexactness.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::inner::InnerMethod;
use crate::linalg::LinearSystemInstance;
use crate::rng::{standard_normal_vector, substream, SolverRng};
use crate::sketch::{draw_sketch, SketchDistribution, SketchSample};

/// Runs abort once the relative error exceeds this.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// A start this close (relative, `B`-norm) to `x*` counts as `x₀ = x*`.
pub const START_AT_SOLUTION_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum SigmaSequence {
    /// `σ_k = initial · ratio^k`
    Geometric { initial: f64, ratio: f64 },
    /// Explicit values; the last one is repeated past the end.
    Explicit(Vec<f64>),
}

impl SigmaSequence {
    pub fn at(&self, k: usize) -> f64 {
        match self {
            SigmaSequence::Geometric { initial, ratio } => initial * ratio.powi(k as i32),
            SigmaSequence::Explicit(v) => v.get(k).or(v.last()).copied().unwrap_or(0.0),
        }
    }

    pub fn take(&self, len: usize) -> Vec<f64> {
        (0..len).map(|k| self.at(k)).collect()
    }
}

/// What an error-norm callback gets to see.
#[derive(Clone, Copy, Debug)]
pub struct ErrorContext<'a> {
    pub iteration: usize,
    pub x: &'a DVector<f64>,
    pub x_star: &'a DVector<f64>,
    /// `‖x_k − x*‖_B`
    pub distance: f64,
    /// `f_{S_k}(x_k)`
    pub f_value: f64,
}

pub type ErrorNormFn = Arc<dyn Fn(&ErrorContext) -> f64 + Send + Sync>;

/// Target `‖ε_k‖_B` of an abstract error injector.
#[derive(Clone)]
pub enum ErrorBound {
    Fixed(f64),
    Sequence(SigmaSequence),
    /// `‖ε_k‖_B = q ‖x_k − x*‖_B`
    ProportionalDistance(f64),
    /// `‖ε_k‖²_B = 2 q² f_{S_k}(x_k)`
    ProportionalFValue(f64),
    Custom(ErrorNormFn),
}

impl fmt::Debug for ErrorBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorBound::Fixed(s) => f.debug_tuple("Fixed").field(s).finish(),
            ErrorBound::Sequence(s) => f.debug_tuple("Sequence").field(s).finish(),
            ErrorBound::ProportionalDistance(q) => f.debug_tuple("ProportionalDistance").field(q).finish(),
            ErrorBound::ProportionalFValue(q) => f.debug_tuple("ProportionalFValue").field(q).finish(),
            ErrorBound::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl ErrorBound {
    pub fn validate(&self) -> Result<()> {
        let bad = |v: f64| !(v.is_finite() && v >= 0.0);
        match self {
            ErrorBound::Fixed(s) if bad(*s) => Err(Error::invalid(format!("error norm must be finite and nonnegative, got {s}"))),
            ErrorBound::ProportionalDistance(q) | ErrorBound::ProportionalFValue(q) if bad(*q) => {
                Err(Error::invalid(format!("inexactness parameter q must be finite and nonnegative, got {q}")))
            }
            ErrorBound::Sequence(SigmaSequence::Geometric { initial, ratio }) if bad(*initial) || bad(*ratio) => {
                Err(Error::invalid("geometric error sequence needs nonnegative initial value and ratio"))
            }
            ErrorBound::Sequence(SigmaSequence::Explicit(v)) if v.iter().any(|&s| bad(s)) => {
                Err(Error::invalid("error sequence entries must be finite and nonnegative"))
            }
            _ => Ok(()),
        }
    }

    pub fn target(&self, ctx: &ErrorContext) -> f64 {
        match self {
            ErrorBound::Fixed(s) => *s,
            ErrorBound::Sequence(seq) => seq.at(ctx.iteration),
            ErrorBound::ProportionalDistance(q) => q * ctx.distance,
            ErrorBound::ProportionalFValue(q) => q * (2.0 * ctx.f_value).sqrt(),
            ErrorBound::Custom(f) => f(ctx).max(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ErrorMagnitude {
    /// `‖ε_k‖_B` equals the target.
    #[default]
    Boundary,
    /// `‖ε_k‖_B` uniform in `[0, target]`.
    Uniform,
}

#[derive(Clone, Debug, Default)]
pub enum InexactnessModel {
    #[default]
    Exact,
    /// Random direction, norm from `bound`. With `orthogonal` the direction is
    /// `B`-orthogonal to the exact step's error `(I − ωB⁻¹Z_k)(x_k − x*)`.
    Abstract {
        bound: ErrorBound,
        orthogonal: bool,
        magnitude: ErrorMagnitude,
    },
    /// Inner system solved approximately.
    Structured(InnerMethod),
}

impl InexactnessModel {
    pub fn abstract_bound(bound: ErrorBound) -> Self {
        InexactnessModel::Abstract {
            bound,
            orthogonal: false,
            magnitude: ErrorMagnitude::Boundary,
        }
    }

    pub fn orthogonal(bound: ErrorBound) -> Self {
        InexactnessModel::Abstract {
            bound,
            orthogonal: true,
            magnitude: ErrorMagnitude::Boundary,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub omega: f64,
    pub max_iters: usize,
    pub rel_error_tol: f64,
    pub dist: SketchDistribution,
    pub inexactness: InexactnessModel,
    /// Keep every iterate in the trace.
    pub record_history: bool,
    /// Compute `‖ε_k‖_B` in structured mode (needs `λ*` every step).
    pub track_inexactness: bool,
    pub rng_seed: u64,
    pub rng_stream: u64,
}

impl SolverConfig {
    pub fn new(dist: SketchDistribution) -> Self {
        Self {
            omega: 1.0,
            max_iters: 10_000,
            rel_error_tol: 1e-5,
            dist,
            inexactness: InexactnessModel::Exact,
            record_history: false,
            track_inexactness: false,
            rng_seed: 0,
            rng_stream: 0,
        }
    }

    pub fn validate(&self, sys: &LinearSystemInstance) -> Result<()> {
        if !(self.omega > 0.0 && self.omega < 2.0) {
            return Err(Error::invalid(format!("stepsize omega must lie in (0, 2), got {}", self.omega)));
        }
        if !(self.rel_error_tol >= 0.0) {
            return Err(Error::invalid("relative error tolerance must be nonnegative"));
        }
        check_dim("sketch distribution rows", sys.m(), self.dist.m())?;
        if let InexactnessModel::Abstract { bound, .. } = &self.inexactness {
            bound.validate()?;
        }
        Ok(())
    }

    pub fn rng(&self) -> SolverRng {
        substream(self.rng_seed, self.rng_stream)
    }
}

#[derive(Clone, Debug)]
pub struct SolverState {
    pub x: DVector<f64>,
    pub iteration: usize,
    pub x_star: DVector<f64>,
    pub rng: SolverRng,
}

impl SolverState {
    pub fn new(x0: DVector<f64>, x_star: DVector<f64>, rng: SolverRng) -> Self {
        Self {
            x: x0,
            iteration: 0,
            x_star,
            rng,
        }
    }
}

/// What one step did.
#[derive(Clone, Debug)]
pub struct StepInfo {
    /// Inner solution actually used.
    pub lambda: DVector<f64>,
    /// `λ* = M† d`, when it was computed.
    pub lambda_star: Option<DVector<f64>>,
    /// `ε_k`, when known.
    pub epsilon: Option<DVector<f64>>,
    pub epsilon_norm: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    TolReached,
    MaxIters,
}

#[derive(Clone, Debug)]
pub struct SolverTrace {
    /// `‖x_k − x*‖²_B / ‖x₀ − x*‖²_B` for `k = 0..=iterations` (0 throughout
    /// when `x₀ = x*`).
    pub rel_errors: Vec<f64>,
    /// Seconds spent in step `k` (sketch draw plus update); entry 0 is 0.
    pub wall_clock: Vec<f64>,
    /// `‖ε_k‖_B` for the step that produced iterate `k`; entry 0 is `None`.
    pub eps_norms: Vec<Option<f64>>,
    pub termination: Termination,
    /// `‖x₀ − x*‖²_B`
    pub initial_error_sq: f64,
    pub iterations: usize,
    pub history: Option<Vec<DVector<f64>>>,
    pub final_x: DVector<f64>,
}

impl SolverTrace {
    pub fn total_wall_clock(&self) -> f64 {
        self.wall_clock.iter().sum()
    }

    /// Absolute `‖x_k − x*‖²_B`.
    pub fn squared_errors(&self) -> Vec<f64> {
        self.rel_errors.iter().map(|r| r * self.initial_error_sq).collect()
    }
}

/// Random direction of unit `B`-norm, optionally `B`-orthogonal to `against`.
/// `None` when nothing is left after the orthogonalization.
fn random_b_unit<R: Rng + ?Sized>(
    sys: &LinearSystemInstance,
    rng: &mut R,
    against: Option<&DVector<f64>>,
) -> Option<DVector<f64>> {
    let g = standard_normal_vector(rng, sys.n());
    // covariance B⁻¹
    let mut u = sys.metric().solve_lower_transpose(&g);
    if let Some(v) = against {
        let vv = sys.metric().norm_squared(v);
        if vv > 0.0 {
            let coef = sys.metric().inner(&u, v) / vv;
            u.axpy(-coef, v, 1.0);
        }
    }
    let norm = sys.metric().norm(&u);
    (norm > 0.0 && norm.is_finite()).then(|| u / norm)
}

fn check_iterate(state: &SolverState, sys: &LinearSystemInstance) -> Result<()> {
    check_dim("iterate", sys.n(), state.x.len())?;
    check_dim("reference solution", sys.n(), state.x_star.len())
}

/// One iBasic step: `x ← x + ω B⁻¹AᵀS M† Sᵀ(b − Ax) + ε`, with `ε` from the
/// configured inexactness model. Structured models are delegated to
/// [`ibasic_structured_step`].
pub fn ibasic_step(
    state: &mut SolverState,
    sample: &SketchSample,
    cfg: &SolverConfig,
    sys: &LinearSystemInstance,
) -> Result<StepInfo> {
    if let InexactnessModel::Structured(inner) = &cfg.inexactness {
        return ibasic_structured_step(state, sample, inner, cfg, sys);
    }
    check_iterate(state, sys)?;
    let d = sample.sketched_residual(sys, &state.x);
    let lambda_star = sample.least_norm(&d);
    let step = sample.lift(sys, &lambda_star) * cfg.omega;

    let epsilon = match &cfg.inexactness {
        InexactnessModel::Abstract {
            bound,
            orthogonal,
            magnitude,
        } => {
            let error = &state.x - &state.x_star;
            let ctx = ErrorContext {
                iteration: state.iteration,
                x: &state.x,
                x_star: &state.x_star,
                distance: sys.metric().norm(&error),
                f_value: (0.5 * d.dot(&lambda_star)).max(0.0),
            };
            let mut target = bound.target(&ctx);
            if *magnitude == ErrorMagnitude::Uniform {
                target *= state.rng.random::<f64>();
            }
            let against = orthogonal.then(|| error + &step);
            let direction = random_b_unit(sys, &mut state.rng, against.as_ref());
            Some(match direction {
                Some(u) if target > 0.0 => u * target,
                _ => DVector::zeros(sys.n()),
            })
        }
        _ => None,
    };

    state.x += step;
    let epsilon_norm = match &epsilon {
        Some(eps) => {
            state.x += eps;
            Some(sys.metric().norm(eps))
        }
        None => Some(0.0),
    };
    state.iteration += 1;
    Ok(StepInfo {
        lambda: lambda_star.clone(),
        lambda_star: Some(lambda_star),
        epsilon,
        epsilon_norm,
    })
}

/// One step with the inner system `M λ = Sᵀ(b − Ax)` solved by `inner`:
/// `x ← x + ω B⁻¹AᵀS λ≈`.
pub fn ibasic_structured_step(
    state: &mut SolverState,
    sample: &SketchSample,
    inner: &InnerMethod,
    cfg: &SolverConfig,
    sys: &LinearSystemInstance,
) -> Result<StepInfo> {
    check_iterate(state, sys)?;
    let d = sample.sketched_residual(sys, &state.x);
    let report = inner.solve(sample, &d, &mut state.rng)?;
    let report = if cfg.track_inexactness {
        report.with_reference(sample, &d)
    } else {
        report
    };
    state.x += sample.lift(sys, &report.lambda) * cfg.omega;
    state.iteration += 1;

    let epsilon = report
        .exact_lambda
        .as_ref()
        .map(|star| sample.lift(sys, &(&report.lambda - star)) * cfg.omega);
    Ok(StepInfo {
        epsilon_norm: epsilon.as_ref().map(|e| sys.metric().norm(e)),
        epsilon,
        lambda: report.lambda,
        lambda_star: report.exact_lambda,
    })
}

/// Randomized block Kaczmarz step; needs `B = I`.
pub fn irbk_step(
    state: &mut SolverState,
    sample: &SketchSample,
    cfg: &SolverConfig,
    sys: &LinearSystemInstance,
) -> Result<StepInfo> {
    if !sys.metric().is_identity() {
        return Err(Error::invalid("block Kaczmarz requires the identity metric B = I"));
    }
    ibasic_step(state, sample, cfg, sys)
}

/// Randomized block coordinate descent step; needs SPD `A` and `B = A`.
pub fn irbcd_step(
    state: &mut SolverState,
    sample: &SketchSample,
    cfg: &SolverConfig,
    sys: &LinearSystemInstance,
) -> Result<StepInfo> {
    if !sys.metric().equals_system_matrix() {
        return Err(Error::invalid(
            "block coordinate descent requires a symmetric positive definite A with metric B = A",
        ));
    }
    ibasic_step(state, sample, cfg, sys)
}

/// Resolves the reference solution: the given one, or `Π_{L,B}(x₀)`.
pub fn reference_solution(
    sys: &LinearSystemInstance,
    x0: &DVector<f64>,
    x_star_ref: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    match x_star_ref {
        Some(x) => {
            check_dim("reference solution", sys.n(), x.len())?;
            Ok(x.clone())
        }
        None => Ok(sys.project_onto_solutions(x0)?.point),
    }
}

pub(crate) fn relative(value: f64, initial: f64) -> f64 {
    if initial > 0.0 {
        value / initial
    } else {
        0.0
    }
}

/// Iterates from `x₀` until the relative error drops to `cfg.rel_error_tol`
/// or `cfg.max_iters` steps are taken.
pub fn run_solver(
    sys: &LinearSystemInstance,
    cfg: &SolverConfig,
    x0: &DVector<f64>,
    x_star_ref: Option<&DVector<f64>>,
) -> Result<SolverTrace> {
    cfg.validate(sys)?;
    check_dim("starting point", sys.n(), x0.len())?;
    let x_star = reference_solution(sys, x0, x_star_ref)?;
    sys.warm_caches();
    let mut initial_error_sq = sys.metric().norm_squared(&(x0 - &x_star));
    if initial_error_sq.sqrt() <= START_AT_SOLUTION_TOL * (1.0 + sys.metric().norm(&x_star)) {
        initial_error_sq = 0.0;
    }
    let mut state = SolverState::new(x0.clone(), x_star, cfg.rng());

    let mut rel_errors = vec![relative(initial_error_sq, initial_error_sq)];
    let mut wall_clock = vec![0.0];
    let mut eps_norms = vec![None];
    let mut history = cfg.record_history.then(|| vec![x0.clone()]);
    let mut termination = Termination::MaxIters;

    let converged = |rel: f64| initial_error_sq == 0.0 || rel <= cfg.rel_error_tol;
    if converged(rel_errors[0]) {
        termination = Termination::TolReached;
    } else {
        while state.iteration < cfg.max_iters {
            let start = Instant::now();
            let sample = draw_sketch(&cfg.dist, sys, &mut state.rng)?;
            let info = ibasic_step(&mut state, &sample, cfg, sys)?;
            wall_clock.push(start.elapsed().as_secs_f64());

            let rel = relative(sys.metric().norm_squared(&(&state.x - &state.x_star)), initial_error_sq);
            rel_errors.push(rel);
            eps_norms.push(info.epsilon_norm);
            if let Some(h) = history.as_mut() {
                h.push(state.x.clone());
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

    Ok(SolverTrace {
        rel_errors,
        wall_clock,
        eps_norms,
        termination,
        initial_error_sq,
        iterations: state.iteration,
        history,
        final_x: state.x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inner::CgOptions;
    use crate::linalg::project_affine;
    use crate::rng::standard_normal_matrix;
    use crate::sketch::{stochastic_f_value, Sketch};
    use nalgebra::DMatrix;

    fn gaussian_system(m: usize, n: usize, seed: u64) -> LinearSystemInstance {
        let mut rng = substream(seed, 0);
        let a = standard_normal_matrix(&mut rng, m, n);
        let b = &a * standard_normal_vector(&mut rng, n);
        LinearSystemInstance::with_identity(a, b).unwrap()
    }

    fn spd_system(n: usize, seed: u64) -> LinearSystemInstance {
        let mut rng = substream(seed, 0);
        let p = standard_normal_matrix(&mut rng, n + 3, n);
        let a = p.tr_mul(&p);
        let b = &a * standard_normal_vector(&mut rng, n);
        LinearSystemInstance::with_metric_equal_to_a(a, b).unwrap()
    }

    fn start(sys: &LinearSystemInstance, x0: DVector<f64>, seed: u64) -> SolverState {
        let x_star = sys.project_onto_solutions(&x0).unwrap().point;
        SolverState::new(x0, x_star, substream(seed, 1))
    }

    #[test]
    fn full_sketch_solves_square_system_in_one_step() {
        let sys = gaussian_system(5, 5, 1);
        let cfg = SolverConfig::new(SketchDistribution::block_identity(5, 5).unwrap());
        let mut state = start(&sys, DVector::zeros(5), 1);
        let sample = SketchSample::new(Sketch::Rows((0..5).collect()), &sys).unwrap();
        ibasic_step(&mut state, &sample, &cfg, &sys).unwrap();
        assert!((&state.x - &state.x_star).norm() < 1e-10);
        assert!(sys.residual(&state.x).norm() < 1e-9);
    }

    #[test]
    fn exact_unit_step_is_a_sketched_projection() {
        let sys = gaussian_system(8, 5, 2);
        let cfg = SolverConfig::new(SketchDistribution::block_identity(8, 3).unwrap());
        let mut state = start(&sys, standard_normal_vector(&mut substream(2, 5), 5), 2);
        for _ in 0..20 {
            let sample = draw_sketch(&cfg.dist, &sys, &mut state.rng).unwrap();
            let Sketch::Rows(rows) = sample.sketch().clone() else { unreachable!() };
            let a_sub = sys.a().select_rows(&rows);
            let b_sub = DVector::from_iterator(rows.len(), rows.iter().map(|&i| sys.b()[i]));
            let expected = project_affine(&state.x, &a_sub, &b_sub, &sys).unwrap();
            ibasic_step(&mut state, &sample, &cfg, &sys).unwrap();
            assert!((&state.x - expected.point).norm() < 1e-12 * (1.0 + state.x.norm()));
        }
    }

    #[test]
    fn exact_step_decrease_identity() {
        // ‖x_{k+1} − x*‖²_B = ‖x_k − x*‖²_B − 2ω(2−ω) f_S(x_k)
        let sys = gaussian_system(6, 4, 3);
        let mut cfg = SolverConfig::new(SketchDistribution::block_identity(6, 2).unwrap());
        cfg.omega = 0.5;
        let mut state = start(&sys, standard_normal_vector(&mut substream(3, 5), 4), 3);
        for _ in 0..30 {
            let sample = draw_sketch(&cfg.dist, &sys, &mut state.rng).unwrap();
            let before = sys.metric().norm_squared(&(&state.x - &state.x_star));
            let f = stochastic_f_value(&sample, &state.x, &sys).unwrap();
            ibasic_step(&mut state, &sample, &cfg, &sys).unwrap();
            let after = sys.metric().norm_squared(&(&state.x - &state.x_star));
            let predicted = before - 2.0 * cfg.omega * (2.0 - cfg.omega) * f;
            assert!((after - predicted).abs() <= 1e-10 * (1.0 + before));
        }
    }

    #[test]
    fn structured_exact_matches_exact_trajectory() {
        let sys = gaussian_system(12, 6, 4);
        let mut cfg = SolverConfig::new(SketchDistribution::block_identity(12, 4).unwrap());
        cfg.max_iters = 40;
        cfg.rel_error_tol = 0.0;
        cfg.record_history = true;
        let x0 = DVector::zeros(6);
        let exact = run_solver(&sys, &cfg, &x0, None).unwrap();
        cfg.inexactness = InexactnessModel::Structured(InnerMethod::Exact);
        let structured = run_solver(&sys, &cfg, &x0, None).unwrap();
        // CG with r ≥ q finishes exactly
        cfg.inexactness = InexactnessModel::Structured(InnerMethod::cg(4));
        let cg = run_solver(&sys, &cfg, &x0, None).unwrap();
        for ((a, b), c) in exact.history.unwrap().iter().zip(structured.history.unwrap().iter()).zip(cg.history.unwrap().iter()) {
            assert!((a - b).norm() <= 1e-10 * (1.0 + a.norm()));
            assert!((a - c).norm() <= 1e-8 * (1.0 + a.norm()));
        }
    }

    #[test]
    fn structured_error_is_orthogonal_to_exact_step_error() {
        // 100×50, B = I, block size 20, CG with r = 2
        let sys = gaussian_system(100, 50, 5);
        let mut cfg = SolverConfig::new(SketchDistribution::block_identity(100, 20).unwrap());
        cfg.track_inexactness = true;
        let inner = InnerMethod::cg(2);
        let mut state = start(&sys, DVector::zeros(50), 5);
        for _ in 0..50 {
            let sample = draw_sketch(&cfg.dist, &sys, &mut state.rng).unwrap();
            let e = &state.x - &state.x_star;
            let projected_error = &e - sys.metric().solve(&sample.z_apply(&sys, &e));
            let before = state.x.clone();
            let info = ibasic_structured_step(&mut state, &sample, &inner, &cfg, &sys).unwrap();
            let eps = info.epsilon.unwrap();
            let inner_product = sys.metric().inner(&projected_error, &eps);
            let scale = 1.0 + sys.metric().norm_squared(&e);
            assert!(inner_product.abs() <= 1e-9 * scale, "{inner_product}");
            // Pythagoras: x_{k+1} − x* = (x_k^p − x*) + ε
            let after = sys.metric().norm_squared(&(&state.x - &state.x_star));
            let pieces = sys.metric().norm_squared(&projected_error) + sys.metric().norm_squared(&eps);
            assert!((after - pieces).abs() <= 1e-9 * scale);
            assert!((&state.x - &before - sample.lift(&sys, &info.lambda)).norm() < 1e-10 * scale);
        }
    }

    #[test]
    fn injectors_respect_their_bounds() {
        let sys = gaussian_system(10, 6, 6);
        let dist = SketchDistribution::block_identity(10, 3).unwrap();
        let q = 0.3;
        for (bound, orthogonal) in [
            (ErrorBound::ProportionalDistance(q), false),
            (ErrorBound::ProportionalFValue(q), false),
            (ErrorBound::ProportionalDistance(q), true),
            (ErrorBound::ProportionalFValue(q), true),
        ] {
            let mut cfg = SolverConfig::new(dist.clone());
            cfg.inexactness = InexactnessModel::Abstract {
                bound: bound.clone(),
                orthogonal,
                magnitude: ErrorMagnitude::Boundary,
            };
            let mut state = start(&sys, standard_normal_vector(&mut substream(6, 3), 6), 6);
            for _ in 0..30 {
                let sample = draw_sketch(&cfg.dist, &sys, &mut state.rng).unwrap();
                let e = &state.x - &state.x_star;
                let dist_sq = sys.metric().norm_squared(&e);
                let f = stochastic_f_value(&sample, &state.x, &sys).unwrap();
                let exact_next_err = &e + sample.lift(&sys, &sample.least_norm(&sample.sketched_residual(&sys, &state.x)));
                let info = ibasic_step(&mut state, &sample, &cfg, &sys).unwrap();
                let eps = info.epsilon.unwrap();
                let eps_sq = sys.metric().norm_squared(&eps);
                let limit = match bound {
                    ErrorBound::ProportionalDistance(_) => q * q * dist_sq,
                    _ => 2.0 * q * q * f,
                };
                assert!(eps_sq <= limit * (1.0 + 1e-10) + 1e-300, "{bound:?}");
                if orthogonal {
                    let ip = sys.metric().inner(&exact_next_err, &eps);
                    assert!(ip.abs() <= 1e-10 * (1.0 + dist_sq));
                }
            }
        }
    }

    #[test]
    fn fixed_and_uniform_magnitudes() {
        let sys = gaussian_system(10, 6, 7);
        let mut cfg = SolverConfig::new(SketchDistribution::single_coordinate(10).unwrap());
        cfg.inexactness = InexactnessModel::abstract_bound(ErrorBound::Fixed(0.25));
        let mut state = start(&sys, DVector::zeros(6), 7);
        let sample = draw_sketch(&cfg.dist, &sys, &mut state.rng).unwrap();
        let info = ibasic_step(&mut state, &sample, &cfg, &sys).unwrap();
        assert!((info.epsilon_norm.unwrap() - 0.25).abs() < 1e-12);

        cfg.inexactness = InexactnessModel::Abstract {
            bound: ErrorBound::Sequence(SigmaSequence::Geometric { initial: 1.0, ratio: 0.5 }),
            orthogonal: false,
            magnitude: ErrorMagnitude::Uniform,
        };
        for _ in 0..10 {
            let k = state.iteration;
            let sample = draw_sketch(&cfg.dist, &sys, &mut state.rng).unwrap();
            let info = ibasic_step(&mut state, &sample, &cfg, &sys).unwrap();
            assert!(info.epsilon_norm.unwrap() <= 0.5f64.powi(k as i32) + 1e-12);
        }
    }

    #[test]
    fn custom_bound_callback_is_used() {
        let sys = gaussian_system(6, 4, 8);
        let mut cfg = SolverConfig::new(SketchDistribution::single_coordinate(6).unwrap());
        cfg.inexactness = InexactnessModel::abstract_bound(ErrorBound::Custom(Arc::new(|ctx| 0.1 / (1.0 + ctx.iteration as f64))));
        let mut state = start(&sys, DVector::zeros(4), 8);
        for k in 0..5 {
            let sample = draw_sketch(&cfg.dist, &sys, &mut state.rng).unwrap();
            let info = ibasic_step(&mut state, &sample, &cfg, &sys).unwrap();
            assert!((info.epsilon_norm.unwrap() - 0.1 / (1.0 + k as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_row_kaczmarz_is_row_projection() {
        let sys = gaussian_system(7, 4, 9);
        let cfg = SolverConfig::new(SketchDistribution::single_coordinate(7).unwrap());
        let mut state = start(&sys, DVector::zeros(4), 9);
        for _ in 0..10 {
            let sample = draw_sketch(&cfg.dist, &sys, &mut state.rng).unwrap();
            let Sketch::Rows(rows) = sample.sketch().clone() else { unreachable!() };
            let row = sys.a().row(rows[0]).transpose();
            let x = state.x.clone();
            let expected = &x + &row * ((sys.b()[rows[0]] - row.dot(&x)) / row.norm_squared());
            irbk_step(&mut state, &sample, &cfg, &sys).unwrap();
            assert!((&state.x - expected).norm() < 1e-12 * (1.0 + x.norm()));
        }
    }

    #[test]
    fn coordinate_descent_matches_generic_step() {
        let sys = spd_system(6, 10);
        let generic = LinearSystemInstance::with_metric(sys.a().clone(), sys.b().clone(), sys.a().clone()).unwrap();
        let mut cfg = SolverConfig::new(SketchDistribution::block_identity(6, 2).unwrap());
        cfg.omega = 0.8;
        let x0 = standard_normal_vector(&mut substream(10, 4), 6);
        let mut fast = start(&sys, x0.clone(), 10);
        let mut slow = start(&generic, x0, 10);
        for _ in 0..20 {
            let sample = draw_sketch(&cfg.dist, &sys, &mut fast.rng).unwrap();
            let slow_sample = draw_sketch(&cfg.dist, &generic, &mut slow.rng).unwrap();
            let Sketch::Rows(rows) = sample.sketch().clone() else { unreachable!() };
            // x − ω I_C (A_CC)† (A x − b)_C
            let a_cc = sys.a().select_rows(&rows).select_columns(&rows);
            let r = DVector::from_iterator(rows.len(), rows.iter().map(|&i| (sys.a() * &fast.x)[i] - sys.b()[i]));
            let delta = a_cc.cholesky().unwrap().solve(&r);
            let mut expected = fast.x.clone();
            for (j, &i) in rows.iter().enumerate() {
                expected[i] -= cfg.omega * delta[j];
            }
            irbcd_step(&mut fast, &sample, &cfg, &sys).unwrap();
            ibasic_step(&mut slow, &slow_sample, &cfg, &generic).unwrap();
            assert!((&fast.x - &expected).norm() < 1e-12 * (1.0 + expected.norm()));
            assert!((&fast.x - &slow.x).norm() < 1e-10 * (1.0 + expected.norm()));
        }
    }

    #[test]
    fn full_block_coordinate_descent_is_newton() {
        let sys = spd_system(5, 11);
        let cfg = SolverConfig::new(SketchDistribution::block_identity(5, 5).unwrap());
        let mut state = start(&sys, DVector::zeros(5), 11);
        let sample = draw_sketch(&cfg.dist, &sys, &mut state.rng).unwrap();
        irbcd_step(&mut state, &sample, &cfg, &sys).unwrap();
        assert!(sys.residual(&state.x).norm() < 1e-9 * (1.0 + sys.b().norm()));
    }

    #[test]
    fn facades_check_metric() {
        let plain = gaussian_system(5, 5, 12);
        let spd = spd_system(5, 12);
        let cfg = SolverConfig::new(SketchDistribution::single_coordinate(5).unwrap());
        let mut state = start(&spd, DVector::zeros(5), 12);
        let sample = draw_sketch(&cfg.dist, &spd, &mut state.rng).unwrap();
        assert!(irbk_step(&mut state, &sample, &cfg, &spd).is_err());
        let mut state = start(&plain, DVector::zeros(5), 12);
        let sample = draw_sketch(&cfg.dist, &plain, &mut state.rng).unwrap();
        assert!(irbcd_step(&mut state, &sample, &cfg, &plain).is_err());
    }

    #[test]
    fn run_from_solution_stops_immediately() {
        let sys = gaussian_system(8, 5, 13);
        let cfg = SolverConfig::new(SketchDistribution::single_coordinate(8).unwrap());
        let x_star = sys.project_onto_solutions(&DVector::zeros(5)).unwrap().point;
        let trace = run_solver(&sys, &cfg, &x_star, None).unwrap();
        assert_eq!(trace.iterations, 0);
        assert_eq!(trace.termination, Termination::TolReached);
        assert_eq!(trace.rel_errors, vec![0.0]);
    }

    #[test]
    fn run_with_zero_budget_reports_unit_error() {
        let sys = gaussian_system(8, 5, 14);
        let mut cfg = SolverConfig::new(SketchDistribution::single_coordinate(8).unwrap());
        cfg.max_iters = 0;
        let trace = run_solver(&sys, &cfg, &DVector::zeros(5), None).unwrap();
        assert_eq!(trace.rel_errors, vec![1.0]);
        assert_eq!(trace.termination, Termination::MaxIters);
    }

    #[test]
    fn runs_are_reproducible_and_converge() {
        let sys = gaussian_system(40, 20, 15);
        let mut cfg = SolverConfig::new(SketchDistribution::block_identity(40, 5).unwrap());
        cfg.rng_seed = 42;
        let x0 = DVector::zeros(20);
        let a = run_solver(&sys, &cfg, &x0, None).unwrap();
        let b = run_solver(&sys, &cfg, &x0, None).unwrap();
        assert_eq!(a.termination, Termination::TolReached);
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.rel_errors, b.rel_errors);
        assert_eq!(a.rel_errors[0], 1.0);
        assert!(*a.rel_errors.last().unwrap() <= 1e-5);
        cfg.rng_stream = 1;
        let c = run_solver(&sys, &cfg, &x0, None).unwrap();
        assert_ne!(a.rel_errors, c.rel_errors);
    }

    #[test]
    fn huge_injected_error_triggers_divergence_guard() {
        let sys = gaussian_system(8, 5, 16);
        let mut cfg = SolverConfig::new(SketchDistribution::single_coordinate(8).unwrap());
        cfg.inexactness = InexactnessModel::abstract_bound(ErrorBound::Sequence(SigmaSequence::Geometric { initial: 1.0, ratio: 100.0 }));
        let err = run_solver(&sys, &cfg, &DVector::zeros(5), None).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let sys = gaussian_system(8, 5, 17);
        let x0 = DVector::zeros(5);
        let mut cfg = SolverConfig::new(SketchDistribution::single_coordinate(8).unwrap());
        cfg.omega = 2.0;
        assert!(run_solver(&sys, &cfg, &x0, None).is_err());
        cfg.omega = 1.0;
        cfg.inexactness = InexactnessModel::abstract_bound(ErrorBound::ProportionalDistance(-0.1));
        assert!(run_solver(&sys, &cfg, &x0, None).is_err());
        let cfg = SolverConfig::new(SketchDistribution::single_coordinate(9).unwrap());
        assert!(run_solver(&sys, &cfg, &x0, None).is_err());
    }

    #[test]
    fn cg_on_singular_blocks_is_refused_unless_allowed() {
        // 6 rows in 3 unknowns: a full-row block is rank deficient
        let sys = gaussian_system(6, 3, 18);
        let mut cfg = SolverConfig::new(SketchDistribution::block_identity(6, 6).unwrap());
        cfg.inexactness = InexactnessModel::Structured(InnerMethod::cg(2));
        let x0 = DVector::zeros(3);
        assert!(matches!(run_solver(&sys, &cfg, &x0, None), Err(Error::SingularInnerSystem { .. })));
        let mut opts = CgOptions::new(3);
        opts.check_definite = false;
        cfg.inexactness = InexactnessModel::Structured(InnerMethod::Cg(opts));
        cfg.max_iters = 5;
        let trace = run_solver(&sys, &cfg, &x0, None).unwrap();
        assert!(trace.rel_errors.last().unwrap() < &1e-8);
    }

    #[test]
    fn planted_solution_can_be_supplied() {
        let sys = gaussian_system(10, 4, 19);
        let cfg = SolverConfig::new(SketchDistribution::single_coordinate(10).unwrap());
        let x_star = sys.project_onto_solutions(&DVector::zeros(4)).unwrap().point;
        let trace = run_solver(&sys, &cfg, &DVector::zeros(4), Some(&x_star)).unwrap();
        assert_eq!(trace.termination, Termination::TolReached);
        let bad = DMatrix::<f64>::zeros(1, 1);
        assert!(run_solver(&sys, &cfg, &DVector::zeros(4), Some(&bad.column(0).into_owned())).is_err());
    }
}
