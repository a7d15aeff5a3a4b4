//! Solvers for the per-iteration sketched system `M λ = d`.
//!
//! Iterative solvers always start from `λ⁰ = 0`, so for consistent systems they
//! head toward the least-norm solution `M† d`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::sketch::{Sketch, SketchDistribution, SketchSample};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgOptions {
    pub iterations: usize,
    /// Refuse numerically singular `M` (checked through a Cholesky pivot test).
    pub check_definite: bool,
    /// Optional early exit on `‖Mλ − d‖₂ ≤ tol`; off by default so exactly
    /// `iterations` steps are taken.
    pub residual_tol: Option<f64>,
}

impl CgOptions {
    pub fn new(iterations: usize) -> Self {
        Self {
            iterations,
            check_definite: true,
            residual_tol: None,
        }
    }
}

/// Distribution of the nested sketch-and-project solver over the rows of `M`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum InnerSketch {
    #[default]
    SingleCoordinate,
    Block(usize),
    Gaussian,
}

impl InnerSketch {
    pub fn distribution(self, q: usize) -> Result<SketchDistribution> {
        match self {
            InnerSketch::SingleCoordinate => SketchDistribution::single_coordinate(q),
            InnerSketch::Block(d) => SketchDistribution::block_identity(q, d),
            InnerSketch::Gaussian => SketchDistribution::gaussian(q, None),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InnerMethod {
    Exact,
    Cg(CgOptions),
    NestedSketch { iterations: usize, sketch: InnerSketch },
}

impl InnerMethod {
    pub fn cg(iterations: usize) -> Self {
        InnerMethod::Cg(CgOptions::new(iterations))
    }

    pub fn nested(iterations: usize) -> Self {
        InnerMethod::NestedSketch {
            iterations,
            sketch: InnerSketch::default(),
        }
    }

    pub fn tag(&self) -> InnerMethodTag {
        match self {
            InnerMethod::Exact => InnerMethodTag::Exact,
            InnerMethod::Cg(o) => InnerMethodTag::Cg(o.iterations),
            InnerMethod::NestedSketch { iterations, .. } => InnerMethodTag::NestedSketch(*iterations),
        }
    }

    pub fn solve<R: Rng + ?Sized>(&self, sample: &SketchSample, d: &DVector<f64>, rng: &mut R) -> Result<InnerSolveReport> {
        match self {
            InnerMethod::Exact => solve_exact_least_norm(sample, d),
            InnerMethod::Cg(opts) => solve_cg(sample, d, *opts),
            InnerMethod::NestedSketch { iterations, sketch } => solve_nested_sp(sample, d, *iterations, *sketch, rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InnerMethodTag {
    Exact,
    Cg(usize),
    NestedSketch(usize),
}

#[derive(Clone, Debug)]
pub struct InnerSolveReport {
    pub lambda: DVector<f64>,
    pub iterations_used: usize,
    /// `‖Mλ − d‖₂`
    pub residual_norm: f64,
    /// Least-norm reference `M† d`, filled by the exact solver or on request.
    pub exact_lambda: Option<DVector<f64>>,
    pub method: InnerMethodTag,
}

impl InnerSolveReport {
    /// Attaches `λ* = M† d`; costs an eigendecomposition of `M` the first time.
    pub fn with_reference(mut self, sample: &SketchSample, d: &DVector<f64>) -> Self {
        if self.exact_lambda.is_none() {
            self.exact_lambda = Some(sample.least_norm(d));
        }
        self
    }

    /// `‖λ − λ*‖_M`, when the reference is attached.
    pub fn error_m_norm(&self, sample: &SketchSample) -> Option<f64> {
        let reference = self.exact_lambda.as_ref()?;
        let e = &self.lambda - reference;
        Some(e.dot(&(sample.m_matrix() * &e)).max(0.0).sqrt())
    }
}

const LEAST_NORM_RANGE_TOL: f64 = 1e-6;

pub fn solve_exact_least_norm(sample: &SketchSample, d: &DVector<f64>) -> Result<InnerSolveReport> {
    check_dim("sketched residual", sample.q(), d.len())?;
    let lambda = sample.least_norm(d);
    let m = sample.m_matrix();
    let residual_norm = (m * &lambda - d).norm();
    let scale = d.norm() + m.norm() * lambda.norm();
    if residual_norm > LEAST_NORM_RANGE_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Inconsistent {
            residual: residual_norm,
            threshold: LEAST_NORM_RANGE_TOL * scale,
        });
    }
    Ok(InnerSolveReport {
        exact_lambda: Some(lambda.clone()),
        lambda,
        iterations_used: 0,
        residual_norm,
        method: InnerMethodTag::Exact,
    })
}

fn check_positive_definite(m: &DMatrix<f64>, rank_tol: f64) -> Result<()> {
    let scale = m.diagonal().amax();
    match m.clone().cholesky() {
        Some(chol) => {
            let l = chol.l_dirty();
            let min_pivot = (0..m.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
            if min_pivot <= rank_tol * scale {
                Err(Error::SingularInnerSystem { pivot: min_pivot })
            } else {
                Ok(())
            }
        }
        None => Err(Error::SingularInnerSystem { pivot: 0.0 }),
    }
}

/// Conjugate gradient (Hestenes–Stiefel, no preconditioner) from `λ⁰ = 0`.
pub fn solve_cg(sample: &SketchSample, d: &DVector<f64>, opts: CgOptions) -> Result<InnerSolveReport> {
    check_dim("sketched residual", sample.q(), d.len())?;
    if opts.iterations == 0 {
        return Err(Error::invalid("CG needs at least one iteration"));
    }
    let m = sample.m_matrix();
    if opts.check_definite {
        check_positive_definite(m, sample.rank_tol())?;
    }
    let mut lambda = DVector::zeros(d.len());
    let mut r = d.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let mut used = 0;
    for _ in 0..opts.iterations {
        if rs == 0.0 || opts.residual_tol.is_some_and(|tol| rs.sqrt() <= tol) {
            break;
        }
        let mp = m * &p;
        let curvature = p.dot(&mp);
        if !(curvature > 0.0) {
            break;
        }
        let alpha = rs / curvature;
        lambda.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &mp, 1.0);
        let rs_next = r.dot(&r);
        p = &r + p * (rs_next / rs);
        rs = rs_next;
        used += 1;
    }
    let residual_norm = (m * &lambda - d).norm();
    Ok(InnerSolveReport {
        lambda,
        iterations_used: used,
        residual_norm,
        exact_lambda: None,
        method: InnerMethodTag::Cg(opts.iterations),
    })
}

/// `r` steps of unit-stepsize sketch-and-project (`B = I`) on `M λ = d`,
/// starting from `λ⁰ = 0`.
pub fn solve_nested_sp<R: Rng + ?Sized>(
    sample: &SketchSample,
    d: &DVector<f64>,
    r: usize,
    inner: InnerSketch,
    rng: &mut R,
) -> Result<InnerSolveReport> {
    let q = sample.q();
    check_dim("sketched residual", q, d.len())?;
    if r == 0 {
        return Err(Error::invalid("nested sketch-and-project needs at least one iteration"));
    }
    let dist = inner.distribution(q)?;
    let m = sample.m_matrix();
    let mut lambda = DVector::zeros(q);
    for _ in 0..r {
        match dist.draw(rng) {
            Sketch::Rows(rows) if rows.len() == 1 => {
                let i = rows[0];
                let row = m.row(i);
                let norm_sq = row.norm_squared();
                if norm_sq > 0.0 {
                    let resid = row.dot(&lambda.transpose()) - d[i];
                    lambda.axpy(-resid / norm_sq, &row.transpose(), 1.0);
                }
            }
            Sketch::Rows(rows) => {
                let block = m.select_rows(&rows);
                let resid = &block * &lambda - DVector::from_iterator(rows.len(), rows.iter().map(|&i| d[i]));
                let gram = &block * block.transpose();
                let pinv = crate::linalg::SymmetricPinv::from_symmetric((&gram + gram.transpose()) * 0.5, sample.rank_tol());
                lambda -= block.tr_mul(&pinv.apply(&resid));
            }
            Sketch::Dense(s) => {
                let s = s.column(0);
                let w = m * s;
                let norm_sq = w.norm_squared();
                if norm_sq > 0.0 {
                    let resid = w.dot(&lambda) - s.dot(d);
                    lambda.axpy(-resid / norm_sq, &w, 1.0);
                }
            }
        }
    }
    let residual_norm = (m * &lambda - d).norm();
    Ok(InnerSolveReport {
        lambda,
        iterations_used: r,
        residual_norm,
        exact_lambda: None,
        method: InnerMethodTag::NestedSketch(r),
    })
}
