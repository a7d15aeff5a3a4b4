//! Closed-form expected-rate bounds and Monte-Carlo validation against them.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::LinearSystemInstance;
use crate::primal::SolverTrace;
use crate::rng::substream;
use crate::sketch::{SketchDistribution, SketchKind, SketchSample};
use crate::spectral::{SpectralMode, SpectralSummary, ENUMERATION_LIMIT};

/// Default multiplicative slack of [`validate_run`].
pub const DEFAULT_CONFIDENCE_SLACK: f64 = 0.05;
/// Fewest trials [`validate_run`] accepts.
pub const MIN_TRIALS: usize = 30;

/// The quantity a bound speaks about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    /// `E‖x_k − x*‖_B`
    Distance,
    /// `E‖x_k − x*‖²_B`
    SquaredDistance,
    /// `E[D(y*) − D(y_k)]`
    DualGap,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BoundKind {
    /// `ρ^{k/2} e₀ + Σ_{i<k} ρ^{(k−1−i)/2} σ_i` on the distance.
    SigmaSequence { sigmas: Vec<f64> },
    /// `ρ^{k/2} e₀ + σ√ρ/(1−ρ)` on the distance, for constant `σ`.
    ConstantSigmaPlateau { sigma: f64 },
    /// `(√ρ + q)^{2k} e₀²`, needs `q < 1 − √ρ`.
    ProportionalDistance { q: f64 },
    /// `ρ^k e₀² + Σ_{i<k} ρ^{k−1−i} σ_i²` for errors orthogonal to the exact step.
    OrthogonalSigmaSequence { sigmas: Vec<f64> },
    /// `(ρ + q²)^k e₀²`, orthogonal errors, needs `q < √ρ`.
    OrthogonalProportionalDistance { q: f64 },
    /// `(ρ + q² λ⁺_min)^k e₀²`, orthogonal errors proportional to `√(2 f_S)`,
    /// needs `q < √(ω(2−ω))`.
    OrthogonalProportionalFValue { q: f64 },
    /// `[1 − (1 − θ^r) λ⁺_min]^k e₀²` for an inner solver contracting by `θ`
    /// per iteration, run for `r` iterations, with `ω = 1`.
    StructuredInner { theta: f64, r: usize },
    /// `(√ρ + q)^{2k} [D(y*) − D(y₀)]`, needs `q < 1 − √ρ`.
    DualProportional { q: f64 },
}

impl BoundKind {
    pub fn quantity(&self) -> Quantity {
        match self {
            BoundKind::SigmaSequence { .. } | BoundKind::ConstantSigmaPlateau { .. } => Quantity::Distance,
            BoundKind::DualProportional { .. } => Quantity::DualGap,
            _ => Quantity::SquaredDistance,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BoundKind::SigmaSequence { .. } => "sigma-sequence",
            BoundKind::ConstantSigmaPlateau { .. } => "constant-sigma-plateau",
            BoundKind::ProportionalDistance { .. } => "proportional-distance",
            BoundKind::OrthogonalSigmaSequence { .. } => "orthogonal-sigma-sequence",
            BoundKind::OrthogonalProportionalDistance { .. } => "orthogonal-proportional-distance",
            BoundKind::OrthogonalProportionalFValue { .. } => "orthogonal-proportional-fvalue",
            BoundKind::StructuredInner { .. } => "structured-inner",
            BoundKind::DualProportional { .. } => "dual-proportional",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateCertificate {
    pub kind: BoundKind,
    pub omega: f64,
    pub lambda_min_plus: f64,
    /// `1 − ω(2−ω) λ⁺_min`
    pub rho: f64,
    /// The bound's quantity at `k = 0`: `‖x₀ − x*‖_B`, its square, or the
    /// initial dual gap.
    pub initial_error: f64,
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")))
    }
}

impl RateCertificate {
    pub fn new(kind: BoundKind, omega: f64, lambda_min_plus: f64, initial_error: f64) -> Result<Self> {
        if !(omega > 0.0 && omega < 2.0) {
            return Err(Error::invalid(format!("stepsize omega must lie in (0, 2), got {omega}")));
        }
        if !(lambda_min_plus > 0.0 && lambda_min_plus <= 1.0 + 1e-9) {
            return Err(Error::invalid(format!(
                "smallest nonzero eigenvalue must lie in (0, 1], got {lambda_min_plus}"
            )));
        }
        nonnegative("initial error", initial_error)?;
        let lambda_min_plus = lambda_min_plus.min(1.0);
        let rho = (1.0 - omega * (2.0 - omega) * lambda_min_plus).max(0.0);
        let sqrt_rho = rho.sqrt();
        match &kind {
            BoundKind::SigmaSequence { sigmas } | BoundKind::OrthogonalSigmaSequence { sigmas } => {
                for &s in sigmas {
                    nonnegative("error norm", s)?;
                }
            }
            BoundKind::ConstantSigmaPlateau { sigma } => {
                nonnegative("error norm", *sigma)?;
                if rho <= 0.0 {
                    return Err(Error::invalid("plateau level needs rho > 0"));
                }
            }
            BoundKind::ProportionalDistance { q } | BoundKind::DualProportional { q } => {
                nonnegative("q", *q)?;
                if *q >= 1.0 - sqrt_rho {
                    return Err(Error::invalid(format!("q = {q} must be below 1 - sqrt(rho) = {}", 1.0 - sqrt_rho)));
                }
            }
            BoundKind::OrthogonalProportionalDistance { q } => {
                nonnegative("q", *q)?;
                if *q >= sqrt_rho {
                    return Err(Error::invalid(format!("q = {q} must be below sqrt(rho) = {sqrt_rho}")));
                }
            }
            BoundKind::OrthogonalProportionalFValue { q } => {
                nonnegative("q", *q)?;
                let limit = (omega * (2.0 - omega)).sqrt();
                if *q >= limit {
                    return Err(Error::invalid(format!("q = {q} must be below sqrt(omega (2 - omega)) = {limit}")));
                }
            }
            BoundKind::StructuredInner { theta, r } => {
                if !(*theta >= 0.0 && *theta < 1.0) {
                    return Err(Error::invalid(format!("inner contraction theta must lie in [0, 1), got {theta}")));
                }
                if *r == 0 {
                    return Err(Error::invalid("inner iteration count r must be at least 1"));
                }
                if omega != 1.0 {
                    return Err(Error::invalid("the structured-inner bound holds for unit stepsize only"));
                }
            }
        }
        Ok(Self {
            kind,
            omega,
            lambda_min_plus,
            rho,
            initial_error,
        })
    }

    pub fn from_spectrum(kind: BoundKind, omega: f64, spectrum: &SpectralSummary, initial_error: f64) -> Result<Self> {
        Self::new(kind, omega, spectrum.lambda_min_plus, initial_error)
    }

    /// Per-step contraction factor, for the geometric kinds.
    pub fn per_step_factor(&self) -> Option<f64> {
        let rho = self.rho;
        match &self.kind {
            BoundKind::ProportionalDistance { q } | BoundKind::DualProportional { q } => Some((rho.sqrt() + q).powi(2)),
            BoundKind::OrthogonalProportionalDistance { q } => Some(rho + q * q),
            BoundKind::OrthogonalProportionalFValue { q } => Some(rho + q * q * self.lambda_min_plus),
            BoundKind::StructuredInner { theta, r } => {
                Some(1.0 - (1.0 - theta.powi(*r as i32)) * self.lambda_min_plus)
            }
            _ => None,
        }
    }

    /// `σ√ρ/(1−ρ)` for the plateau kind.
    pub fn plateau_level(&self) -> Option<f64> {
        match self.kind {
            BoundKind::ConstantSigmaPlateau { sigma } => Some(sigma * self.rho.sqrt() / (1.0 - self.rho)),
            _ => None,
        }
    }
}

/// Upper bound at `k = 0..=k_max`.
pub fn bound_sequence(cert: &RateCertificate, k_max: usize) -> Result<Vec<f64>> {
    let rho = cert.rho;
    let e0 = cert.initial_error;
    let sigma_at = |sigmas: &[f64], k_max: usize| -> Result<()> {
        if sigmas.len() < k_max {
            Err(Error::invalid(format!(
                "error sequence has {} entries, {k_max} needed",
                sigmas.len()
            )))
        } else {
            Ok(())
        }
    };
    Ok(match &cert.kind {
        BoundKind::SigmaSequence { sigmas } => {
            sigma_at(sigmas, k_max)?;
            // s_k = √ρ s_{k−1} + σ_{k−1}
            let mut tail = 0.0;
            (0..=k_max)
                .map(|k| {
                    if k > 0 {
                        tail = rho.sqrt() * tail + sigmas[k - 1];
                    }
                    rho.powf(k as f64 / 2.0) * e0 + tail
                })
                .collect()
        }
        BoundKind::OrthogonalSigmaSequence { sigmas } => {
            sigma_at(sigmas, k_max)?;
            let mut tail = 0.0;
            (0..=k_max)
                .map(|k| {
                    if k > 0 {
                        tail = rho * tail + sigmas[k - 1].powi(2);
                    }
                    rho.powi(k as i32) * e0 + tail
                })
                .collect()
        }
        BoundKind::ConstantSigmaPlateau { .. } => {
            let level = cert.plateau_level().unwrap_or(0.0);
            (0..=k_max).map(|k| rho.powf(k as f64 / 2.0) * e0 + level).collect()
        }
        _ => {
            let factor = cert.per_step_factor().unwrap_or(1.0);
            (0..=k_max).map(|k| factor.powi(k as i32) * e0).collect()
        }
    })
}

/// `((√κ − 1)/(√κ + 1))⁴`: the per-iteration contraction of the squared
/// `M`-norm error attributed to CG on a system with condition number `κ`.
pub fn cg_contraction(kappa: f64) -> f64 {
    let s = kappa.sqrt();
    ((s - 1.0) / (s + 1.0)).powi(4)
}

/// Worst CG contraction over a population of sketched systems.
pub fn theta_for_cg(samples: &[SketchSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("theta needs at least one sketched system"));
    }
    let mut theta = 0.0f64;
    for sample in samples {
        let pinv = sample.pinv();
        if pinv.rank() < sample.q() {
            return Err(Error::SingularInnerSystem {
                pivot: pinv.eigenvalues()[0],
            });
        }
        theta = theta.max(cg_contraction(pinv.condition_number()));
    }
    Ok(theta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ThetaEstimate {
    pub theta: f64,
    pub samples: usize,
    pub enumerated: bool,
}

/// [`theta_for_cg`] over a finite-support distribution: every support element
/// when enumerable, otherwise the maximum over `samples` draws.
pub fn theta_for_distribution(
    sys: &LinearSystemInstance,
    dist: &SketchDistribution,
    mode: SpectralMode,
) -> Result<ThetaEstimate> {
    if matches!(dist.kind(), SketchKind::Gaussian) {
        return Err(Error::invalid("a uniform inner contraction needs a finite-support sketch distribution"));
    }
    let limit = match mode {
        SpectralMode::Exact => usize::MAX,
        SpectralMode::Auto { .. } => ENUMERATION_LIMIT,
        SpectralMode::MonteCarlo { .. } => 0,
    };
    if let Some(blocks) = dist.enumerate_support(limit) {
        let mut theta = 0.0f64;
        for rows in &blocks {
            let sample = SketchSample::new(crate::sketch::Sketch::Rows(rows.clone()), sys)?;
            theta = theta.max(theta_for_cg(std::slice::from_ref(&sample))?);
        }
        return Ok(ThetaEstimate {
            theta,
            samples: blocks.len(),
            enumerated: true,
        });
    }
    let (samples, seed) = match mode {
        SpectralMode::MonteCarlo { samples, seed } | SpectralMode::Auto { samples, seed } => (samples, seed),
        SpectralMode::Exact => return Err(Error::invalid("sketch support is too large to enumerate")),
    };
    if samples == 0 {
        return Err(Error::invalid("Monte-Carlo theta estimate needs at least one sample"));
    }
    let mut rng = substream(seed, 0);
    let mut theta = 0.0f64;
    for _ in 0..samples {
        let sample = SketchSample::new(dist.draw(&mut rng), sys)?;
        theta = theta.max(theta_for_cg(std::slice::from_ref(&sample))?);
    }
    Ok(ThetaEstimate {
        theta,
        samples,
        enumerated: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub verdict: Verdict,
    pub bound_kind: &'static str,
    pub quantity: Quantity,
    pub trials: usize,
    pub confidence_slack: f64,
    pub first_violation: Option<usize>,
    pub means: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub bounds: Vec<f64>,
}

/// Converts a trace's relative errors into the certificate's quantity.
pub fn trace_quantity(trace: &SolverTrace, quantity: Quantity) -> Vec<f64> {
    trace
        .rel_errors
        .iter()
        .map(|&r| {
            let sq = r * trace.initial_error_sq;
            match quantity {
                Quantity::Distance => sq.max(0.0).sqrt(),
                Quantity::SquaredDistance => sq,
                Quantity::DualGap => 0.5 * sq,
            }
        })
        .collect()
}

/// Checks `mean_k ≤ bound_k (1 + slack) + 3 stderr_k` for every `k`.
pub fn validate_run(trials: &[SolverTrace], cert: &RateCertificate, confidence_slack: f64) -> Result<ValidationReport> {
    if trials.is_empty() {
        return Err(Error::invalid("no trials to validate"));
    }
    if trials.len() < MIN_TRIALS {
        return Err(Error::invalid(format!(
            "validation needs at least {MIN_TRIALS} trials, got {}",
            trials.len()
        )));
    }
    nonnegative("confidence slack", confidence_slack)?;
    let horizon = trials[0].rel_errors.len();
    if let Some(bad) = trials.iter().position(|t| t.rel_errors.len() != horizon) {
        return Err(Error::invalid(format!(
            "trial {bad} has {} recorded iterates, trial 0 has {horizon}",
            trials[bad].rel_errors.len()
        )));
    }
    let quantity = cert.kind.quantity();
    let n = trials.len() as f64;
    let mut sums = vec![0.0; horizon];
    let mut sq_sums = vec![0.0; horizon];
    for trace in trials {
        for (k, v) in trace_quantity(trace, quantity).into_iter().enumerate() {
            sums[k] += v;
            sq_sums[k] += v * v;
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let standard_errors: Vec<f64> = sq_sums
        .iter()
        .zip(&means)
        .map(|(sq, mean)| {
            let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        })
        .collect();
    let bounds = bound_sequence(cert, horizon - 1)?;
    let first_violation = (0..horizon)
        .find(|&k| !(means[k] <= bounds[k] * (1.0 + confidence_slack) + 3.0 * standard_errors[k]));
    Ok(ValidationReport {
        verdict: if first_violation.is_none() {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
        bound_kind: cert.kind.name(),
        quantity,
        trials: trials.len(),
        confidence_slack,
        first_violation,
        means,
        standard_errors,
        bounds,
    })
}
