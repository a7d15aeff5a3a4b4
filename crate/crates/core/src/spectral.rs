//! Expected projection `E[Z]` and the spectrum of `W = B^{-1/2} E[Z] B^{-1/2}`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{LinearSystemInstance, SymmetricPinv, DEFAULT_RANK_TOL};
use crate::rng::substream;
use crate::sketch::{Sketch, SketchDistribution, SketchSample};

/// Largest finite support that is enumerated exactly in [`SpectralMode::Auto`].
pub const ENUMERATION_LIMIT: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpectralMode {
    /// Average over the whole (finite) support.
    Exact,
    /// Average over `samples` independent draws.
    MonteCarlo { samples: usize, seed: u64 },
    /// Exact when the support has at most [`ENUMERATION_LIMIT`] elements,
    /// Monte-Carlo otherwise.
    Auto { samples: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct SpectralSummary {
    pub w: DMatrix<f64>,
    pub expected_z: DMatrix<f64>,
    /// Eigenvalues of `W`, nondecreasing.
    pub eigenvalues: DVector<f64>,
    pub lambda_min_plus: f64,
    pub lambda_max: f64,
    /// Numerical rank of `E[Z]`.
    pub rank: usize,
    /// `rank(E[Z]) == rank(A)`; when false the method is not exact for this
    /// distribution and the rate certificates do not apply.
    pub exactness: bool,
    pub enumerated: bool,
    pub samples: usize,
    /// Largest entrywise Monte-Carlo standard error of `E[Z]`.
    pub standard_error: Option<f64>,
}

impl SpectralSummary {
    /// `ρ = 1 − ω(2 − ω) λ⁺_min`
    pub fn rho(&self, omega: f64) -> f64 {
        1.0 - omega * (2.0 - omega) * self.lambda_min_plus
    }

    pub fn report(&self) -> SpectralReport {
        SpectralReport {
            lambda_min_plus: self.lambda_min_plus,
            lambda_max: self.lambda_max,
            rank: self.rank,
            exactness: self.exactness,
            enumerated: self.enumerated,
            samples: self.samples,
            standard_error: self.standard_error,
        }
    }
}

/// Serializable scalar part of a [`SpectralSummary`].
#[derive(Clone, Debug, Serialize)]
pub struct SpectralReport {
    pub lambda_min_plus: f64,
    pub lambda_max: f64,
    pub rank: usize,
    pub exactness: bool,
    pub enumerated: bool,
    pub samples: usize,
    pub standard_error: Option<f64>,
}

fn projector(sample: &SketchSample, sys: &LinearSystemInstance) -> DMatrix<f64> {
    // SᵀA as a q×n matrix
    let sa = match sample.sketch() {
        Sketch::Rows(rows) => sys.a_t().select_columns(rows).transpose(),
        Sketch::Dense(s) => s.tr_mul(sys.a()),
    };
    sa.tr_mul(&sample.pinv().apply_matrix(&sa))
}

pub fn spectral_summary(
    sys: &LinearSystemInstance,
    dist: &SketchDistribution,
    mode: SpectralMode,
) -> Result<SpectralSummary> {
    check_dim("sketch distribution rows", sys.m(), dist.m())?;
    let n = sys.n();
    let support = match mode {
        SpectralMode::Exact => Some(dist.enumerate_support(usize::MAX).ok_or_else(|| {
            Error::invalid("exact enumeration requires a finite-support sketch distribution")
        })?),
        SpectralMode::MonteCarlo { samples, .. } => {
            if samples == 0 {
                return Err(Error::invalid("Monte-Carlo spectral estimate needs at least one sample"));
            }
            None
        }
        SpectralMode::Auto { samples, .. } => match dist.enumerate_support(ENUMERATION_LIMIT) {
            Some(blocks) => Some(blocks),
            None if samples == 0 => {
                return Err(Error::invalid("Monte-Carlo spectral estimate needs at least one sample"));
            }
            None => None,
        },
    };

    let (expected_z, samples, standard_error) = match support {
        Some(blocks) => {
            let mut acc = DMatrix::zeros(n, n);
            for rows in &blocks {
                let sample = SketchSample::new(Sketch::Rows(rows.clone()), sys)?;
                acc += projector(&sample, sys);
            }
            let count = blocks.len();
            (acc / count as f64, count, None)
        }
        None => {
            let (samples, seed) = match mode {
                SpectralMode::MonteCarlo { samples, seed } | SpectralMode::Auto { samples, seed } => (samples, seed),
                SpectralMode::Exact => unreachable!(),
            };
            let mut rng = substream(seed, 0);
            let mut acc = DMatrix::zeros(n, n);
            let mut acc_sq = DMatrix::zeros(n, n);
            for _ in 0..samples {
                let sample = SketchSample::new(dist.draw(&mut rng), sys)?;
                let z = projector(&sample, sys);
                acc_sq += z.component_mul(&z);
                acc += z;
            }
            let k = samples as f64;
            let mean = acc / k;
            let var = (acc_sq / k - mean.component_mul(&mean)).map(|v| v.max(0.0));
            let stderr = var.amax().sqrt() / k.sqrt();
            (mean, samples, Some(stderr))
        }
    };

    let inv_sqrt = sys.metric().inv_sqrt(n);
    let w = &inv_sqrt * &expected_z * &inv_sqrt;
    let w = (&w + w.transpose()) * 0.5;
    let spectrum = SymmetricPinv::from_symmetric(w.clone(), DEFAULT_RANK_TOL);
    let lambda_min_plus = spectrum
        .lambda_min_positive()
        .ok_or_else(|| Error::invalid("expected projection E[Z] is zero"))?;
    let rank = spectrum.rank();
    Ok(SpectralSummary {
        eigenvalues: spectrum.eigenvalues().clone(),
        lambda_max: spectrum.lambda_max(),
        lambda_min_plus,
        rank,
        exactness: rank == sys.rank(),
        enumerated: standard_error.is_none(),
        samples,
        standard_error,
        w,
        expected_z,
    })
}
