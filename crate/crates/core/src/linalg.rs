//! Linear algebra in the geometry induced by an SPD matrix `B`.
//!
//! Everything here works with dense `nalgebra` storage. `B⁻¹` is never formed;
//! it is applied through a Cholesky factor computed once when the instance is
//! built.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};

/// Relative eigenvalue cutoff used for pseudoinverses and `λ⁺_min`.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-9;
const CONSISTENCY_TOL: f64 = 1e-8;
const PROJECTION_FEASIBILITY_TOL: f64 = 1e-8;
/// Above this row count the sketch Gram blocks are computed on the fly instead
/// of being sliced out of a cached `A B⁻¹ Aᵀ`.
const GRAM_CACHE_MAX_ROWS: usize = 4096;

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            context: "square matrix",
            expected: m.nrows(),
            actual: m.ncols(),
        });
    }
    let scale = m.amax();
    let asymmetry = max_asymmetry(m);
    if asymmetry > SYMMETRY_TOL * (1.0 + scale) {
        return Err(Error::NotSymmetric { asymmetry });
    }
    Ok(())
}

/// Moore-Penrose pseudoinverse of a symmetric positive semidefinite matrix,
/// held as an eigendecomposition so it can be applied repeatedly.
///
/// Eigenvalues at or below `rank_tol · λ_max` are treated as zero.
#[derive(Clone, Debug)]
pub struct SymmetricPinv {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    cutoff: f64,
}

impl SymmetricPinv {
    pub fn new(m: &DMatrix<f64>, rank_tol: f64) -> Result<Self> {
        if !(rank_tol > 0.0) {
            return Err(Error::invalid(format!("rank_tol must be positive, got {rank_tol}")));
        }
        check_symmetric(m)?;
        let sym = (m + m.transpose()) * 0.5;
        Ok(Self::from_symmetric(sym, rank_tol))
    }

    pub(crate) fn from_symmetric(sym: DMatrix<f64>, rank_tol: f64) -> Self {
        let n = sym.nrows();
        if n == 0 {
            return Self {
                eigenvalues: DVector::zeros(0),
                eigenvectors: DMatrix::zeros(0, 0),
                cutoff: 0.0,
            };
        }
        let eig = SymmetricEigen::new(sym);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let eigenvectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
        let lambda_max = eigenvalues[n - 1].max(0.0);
        Self {
            eigenvalues,
            eigenvectors,
            cutoff: rank_tol * lambda_max,
        }
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Eigenvalues in nondecreasing order.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(0.0, f64::max)
    }

    /// Smallest eigenvalue above the rank cutoff.
    pub fn lambda_min_positive(&self) -> Option<f64> {
        self.eigenvalues.iter().copied().find(|&l| l > self.cutoff)
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.iter().filter(|&&l| l > self.cutoff).count()
    }

    /// `λ_max / λ_min`, infinite when the matrix is numerically singular.
    pub fn condition_number(&self) -> f64 {
        match self.eigenvalues.iter().next() {
            Some(&lo) if lo > self.cutoff => self.lambda_max() / lo,
            Some(_) => f64::INFINITY,
            None => 1.0,
        }
    }

    fn apply_power(&self, v: &DVector<f64>, power: i32) -> DVector<f64> {
        let mut coeffs = self.eigenvectors.tr_mul(v);
        for (c, &l) in coeffs.iter_mut().zip(self.eigenvalues.iter()) {
            if l > self.cutoff {
                *c /= l.powi(power);
            } else {
                *c = 0.0;
            }
        }
        &self.eigenvectors * coeffs
    }

    /// `M† v`
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_power(v, 1)
    }

    /// `(M†)² v`
    pub fn apply_squared(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_power(v, 2)
    }

    /// `M† R` for a block of right-hand sides.
    pub fn apply_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut coeffs = self.eigenvectors.tr_mul(rhs);
        for (i, &l) in self.eigenvalues.iter().enumerate() {
            let scale = if l > self.cutoff { 1.0 / l } else { 0.0 };
            coeffs.row_mut(i).scale_mut(scale);
        }
        &self.eigenvectors * coeffs
    }

    /// `M M† v`, the orthogonal projection onto `range(M)`.
    pub fn range_projection(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut coeffs = self.eigenvectors.tr_mul(v);
        for (c, &l) in coeffs.iter_mut().zip(self.eigenvalues.iter()) {
            if l <= self.cutoff {
                *c = 0.0;
            }
        }
        &self.eigenvectors * coeffs
    }
}

/// `M† v` for symmetric PSD `M`, via eigendecomposition.
pub fn pseudoinverse_apply(m: &DMatrix<f64>, v: &DVector<f64>, rank_tol: f64) -> Result<DVector<f64>> {
    check_dim("pseudoinverse rhs", m.nrows(), v.len())?;
    Ok(SymmetricPinv::new(m, rank_tol)?.apply(v))
}

/// SPD matrix defining the geometry, with its Cholesky factor `B = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct SpdMetric {
    matrix: DMatrix<f64>,
    lower: DMatrix<f64>,
    equals_system_matrix: bool,
}

impl SpdMetric {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&matrix)?;
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let chol = sym
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("Cholesky factorization of B failed"))?;
        let lower = chol.l();
        let min_pivot = lower.diagonal().min();
        if !(min_pivot > 0.0) {
            return Err(Error::NotPositiveDefinite("B has a nonpositive Cholesky pivot"));
        }
        Ok(Self {
            matrix: sym,
            lower,
            equals_system_matrix: false,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }
}

/// The matrix `B`: either the identity or a factored SPD matrix.
#[derive(Clone, Debug)]
pub enum Metric {
    Identity,
    Spd(SpdMetric),
}

impl Metric {
    pub fn is_identity(&self) -> bool {
        matches!(self, Metric::Identity)
    }

    /// True when the instance was built with `B = A` (coordinate descent geometry).
    pub fn equals_system_matrix(&self) -> bool {
        matches!(self, Metric::Spd(s) if s.equals_system_matrix)
    }

    pub fn to_matrix(&self, n: usize) -> DMatrix<f64> {
        match self {
            Metric::Identity => DMatrix::identity(n, n),
            Metric::Spd(s) => s.matrix.clone(),
        }
    }

    /// `B v`
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Metric::Identity => v.clone(),
            Metric::Spd(s) => &s.matrix * v,
        }
    }

    /// `B⁻¹ v`
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Metric::Identity => v.clone(),
            Metric::Spd(s) => {
                let w = s.lower.solve_lower_triangular(v).expect("nonzero Cholesky pivots");
                s.lower.tr_solve_lower_triangular(&w).expect("nonzero Cholesky pivots")
            }
        }
    }

    /// `L⁻¹ v`
    pub fn solve_lower(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Metric::Identity => v.clone(),
            Metric::Spd(s) => s.lower.solve_lower_triangular(v).expect("nonzero Cholesky pivots"),
        }
    }

    /// `L⁻ᵀ v`; maps a standard normal vector to a `N(0, B⁻¹)` vector.
    pub fn solve_lower_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Metric::Identity => v.clone(),
            Metric::Spd(s) => s.lower.tr_solve_lower_triangular(v).expect("nonzero Cholesky pivots"),
        }
    }

    /// `L⁻¹ M`
    pub fn solve_lower_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Metric::Identity => m.clone(),
            Metric::Spd(s) => s.lower.solve_lower_triangular(m).expect("nonzero Cholesky pivots"),
        }
    }

    /// `B⁻¹ M`
    pub fn solve_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Metric::Identity => m.clone(),
            Metric::Spd(s) => {
                let w = s.lower.solve_lower_triangular(m).expect("nonzero Cholesky pivots");
                s.lower.tr_solve_lower_triangular(&w).expect("nonzero Cholesky pivots")
            }
        }
    }

    pub fn inner(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        match self {
            Metric::Identity => x.dot(y),
            Metric::Spd(s) => x.dot(&(&s.matrix * y)),
        }
    }

    pub fn norm_squared(&self, x: &DVector<f64>) -> f64 {
        self.inner(x, x).max(0.0)
    }

    pub fn norm(&self, x: &DVector<f64>) -> f64 {
        self.norm_squared(x).sqrt()
    }

    /// `B^{-1/2}` via a symmetric eigendecomposition.
    pub fn inv_sqrt(&self, n: usize) -> DMatrix<f64> {
        match self {
            Metric::Identity => DMatrix::identity(n, n),
            Metric::Spd(s) => {
                let eig = SymmetricEigen::new(s.matrix.clone());
                let scaled = DVector::from_iterator(n, eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()));
                &eig.eigenvectors * DMatrix::from_diagonal(&scaled) * eig.eigenvectors.transpose()
            }
        }
    }

    pub fn condition_number(&self) -> f64 {
        match self {
            Metric::Identity => 1.0,
            Metric::Spd(s) => SymmetricPinv::from_symmetric(s.matrix.clone(), DEFAULT_RANK_TOL).condition_number(),
        }
    }
}

/// Factorization of the whole system used for the solution projection,
/// consistency check and dual optimum.
///
/// With `Ã = A L⁻ᵀ`, the `Columns` route factors `ÃᵀÃ` (n×n) and the `Rows`
/// route factors `ÃÃᵀ = A B⁻¹ Aᵀ` (m×m); whichever is smaller is used.
#[derive(Clone, Debug)]
enum FullFactor {
    Columns(SymmetricPinv),
    Rows(SymmetricPinv),
}

/// Result of projecting a point onto an affine set in the `B`-norm.
#[derive(Clone, Debug)]
pub struct ProjectionResult {
    pub point: DVector<f64>,
    pub distance_b: f64,
}

/// A consistent linear system `Ax = b` together with the geometry matrix `B`.
///
/// Immutable after construction; share it by reference across trials.
#[derive(Debug)]
pub struct LinearSystemInstance {
    a: DMatrix<f64>,
    a_t: DMatrix<f64>,
    b: DVector<f64>,
    metric: Metric,
    factor: FullFactor,
    rank: usize,
    gram: OnceLock<DMatrix<f64>>,
}

impl LinearSystemInstance {
    /// Builds an instance with `B = I`.
    pub fn with_identity(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        Self::build(a, b, Metric::Identity)
    }

    /// Builds an instance with a general SPD `B`.
    pub fn with_metric(a: DMatrix<f64>, b: DVector<f64>, metric: DMatrix<f64>) -> Result<Self> {
        check_dim("B rows", a.ncols(), metric.nrows())?;
        Self::build(a, b, Metric::Spd(SpdMetric::new(metric)?))
    }

    /// Builds an instance with `B = A`; `A` must be symmetric positive definite.
    pub fn with_metric_equal_to_a(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let mut metric = SpdMetric::new(a.clone())?;
        metric.equals_system_matrix = true;
        // keep A bit-identical to B so B⁻¹A = I holds to rounding
        let a = metric.matrix.clone();
        Self::build(a, b, Metric::Spd(metric))
    }

    fn build(a: DMatrix<f64>, b: DVector<f64>, metric: Metric) -> Result<Self> {
        let (m, n) = a.shape();
        check_dim("right-hand side", m, b.len())?;
        if m == 0 || n == 0 {
            return Err(Error::invalid("system matrix must be nonempty"));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("system contains non-finite entries"));
        }
        let a_t = a.transpose();
        // Ãᵀ = L⁻¹ Aᵀ
        let whitened_t = metric.solve_lower_matrix(&a_t);
        let (factor, projected_b) = if n <= m {
            let k = &whitened_t * whitened_t.transpose();
            let pinv = SymmetricPinv::from_symmetric((&k + k.transpose()) * 0.5, DEFAULT_RANK_TOL);
            let coeffs = pinv.apply(&(&whitened_t * &b));
            let projected = whitened_t.tr_mul(&coeffs);
            (FullFactor::Columns(pinv), projected)
        } else {
            let g = whitened_t.tr_mul(&whitened_t);
            let g = (&g + g.transpose()) * 0.5;
            let pinv = SymmetricPinv::from_symmetric(g, DEFAULT_RANK_TOL);
            let projected = pinv.range_projection(&b);
            (FullFactor::Rows(pinv), projected)
        };
        let residual = (&b - projected_b).norm();
        let threshold = CONSISTENCY_TOL * (1.0 + b.norm());
        if residual > threshold {
            return Err(Error::Inconsistent { residual, threshold });
        }
        let rank = match &factor {
            FullFactor::Columns(p) | FullFactor::Rows(p) => p.rank(),
        };
        Ok(Self {
            a,
            a_t,
            b,
            metric,
            factor,
            rank,
            gram: OnceLock::new(),
        })
    }

    /// Number of rows of `A`.
    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    /// Number of columns of `A`.
    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// `Aᵀ`, stored so that rows of `A` are contiguous.
    pub fn a_t(&self) -> &DMatrix<f64> {
        &self.a_t
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn metric(&self) -> &Metric {
        &self.metric
    }

    pub fn metric_matrix(&self) -> DMatrix<f64> {
        self.metric.to_matrix(self.n())
    }

    /// Condition number of `B` (reported only; no cap is imposed).
    pub fn metric_condition_number(&self) -> f64 {
        self.metric.condition_number()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn has_full_column_rank(&self) -> bool {
        self.rank == self.n()
    }

    pub fn has_full_row_rank(&self) -> bool {
        self.rank == self.m()
    }

    pub fn b_inner(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        check_dim("b_inner x", self.n(), x.len())?;
        check_dim("b_inner y", self.n(), y.len())?;
        Ok(self.metric.inner(x, y))
    }

    pub fn b_norm(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.b_inner(x, x)?.max(0.0).sqrt())
    }

    /// `b − A x`
    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.b - &self.a * x
    }

    /// `B⁻¹ Aᵀ w`
    pub fn lift(&self, w: &DVector<f64>) -> DVector<f64> {
        if self.metric.equals_system_matrix() {
            return w.clone();
        }
        self.metric.solve(&(&self.a_t * w))
    }

    /// `B⁻¹ A_Cᵀ λ` where `A_C` holds the rows listed in `rows`.
    pub fn lift_rows(&self, rows: &[usize], lambda: &DVector<f64>) -> DVector<f64> {
        let mut acc = DVector::zeros(self.n());
        if self.metric.equals_system_matrix() {
            for (&i, &l) in rows.iter().zip(lambda.iter()) {
                acc[i] += l;
            }
            return acc;
        }
        for (&i, &l) in rows.iter().zip(lambda.iter()) {
            acc.axpy(l, &self.a_t.column(i), 1.0);
        }
        self.metric.solve(&acc)
    }

    /// `A_C x` for the rows listed in `rows`.
    pub fn rows_times(&self, rows: &[usize], x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.a_t.column(i).dot(x)))
    }

    /// `A B⁻¹ Aᵀ`, computed once on first use.
    pub fn gram(&self) -> &DMatrix<f64> {
        self.gram.get_or_init(|| {
            let g = if self.metric.equals_system_matrix() {
                self.a.clone()
            } else {
                let wt = self.metric.solve_lower_matrix(&self.a_t);
                wt.tr_mul(&wt)
            };
            (&g + g.transpose()) * 0.5
        })
    }

    /// Builds the cached `A B⁻¹ Aᵀ` now if row-subset grams will read from it,
    /// so the one-off cost is not charged to the first iteration.
    pub fn warm_caches(&self) {
        if self.m() <= GRAM_CACHE_MAX_ROWS {
            self.gram();
        }
    }

    /// `A_C B⁻¹ A_Cᵀ` for a row subset.
    pub fn block_gram(&self, rows: &[usize]) -> DMatrix<f64> {
        if self.m() <= GRAM_CACHE_MAX_ROWS {
            let g = self.gram();
            return DMatrix::from_fn(rows.len(), rows.len(), |i, j| g[(rows[i], rows[j])]);
        }
        let cols = self.a_t.select_columns(rows);
        let whitened = self.metric.solve_lower_matrix(&cols);
        let g = whitened.tr_mul(&whitened);
        (&g + g.transpose()) * 0.5
    }

    /// `Π_{L,B}(x₀)`: the `B`-closest solution of `Ax = b` to `x₀`.
    pub fn project_onto_solutions(&self, x0: &DVector<f64>) -> Result<ProjectionResult> {
        check_dim("projection start", self.n(), x0.len())?;
        let r = &self.a * x0 - &self.b;
        let delta = match &self.factor {
            FullFactor::Columns(pinv) => {
                let rhs = self.metric.solve_lower(&(&self.a_t * &r));
                self.metric.solve_lower_transpose(&pinv.apply(&rhs))
            }
            FullFactor::Rows(pinv) => self.lift(&pinv.apply(&r)),
        };
        let distance_b = self.metric.norm(&delta);
        Ok(ProjectionResult {
            point: x0 - delta,
            distance_b,
        })
    }

    /// A dual optimal point `y* = (A B⁻¹ Aᵀ)† (b − A x₀)`.
    pub fn dual_optimum(&self, x0: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("dual optimum start", self.n(), x0.len())?;
        let r = self.residual(x0);
        Ok(match &self.factor {
            FullFactor::Rows(pinv) => pinv.apply(&r),
            FullFactor::Columns(pinv) => {
                // (ÃÃᵀ)† = Ã (ÃᵀÃ)†² Ãᵀ
                let inner = pinv.apply_squared(&self.metric.solve_lower(&(&self.a_t * &r)));
                &self.a * self.metric.solve_lower_transpose(&inner)
            }
        })
    }
}

/// `xᵀ B y`
pub fn b_inner(x: &DVector<f64>, y: &DVector<f64>, sys: &LinearSystemInstance) -> Result<f64> {
    sys.b_inner(x, y)
}

/// Projects `x` onto `{z : A_sub z = b_sub}` in the `B`-norm of `sys`:
/// `x − B⁻¹A_subᵀ (A_sub B⁻¹ A_subᵀ)† (A_sub x − b_sub)`.
pub fn project_affine(
    x: &DVector<f64>,
    a_sub: &DMatrix<f64>,
    b_sub: &DVector<f64>,
    sys: &LinearSystemInstance,
) -> Result<ProjectionResult> {
    check_dim("projection point", sys.n(), x.len())?;
    check_dim("constraint columns", sys.n(), a_sub.ncols())?;
    check_dim("constraint rhs", a_sub.nrows(), b_sub.len())?;
    let metric = sys.metric();
    let whitened_t = metric.solve_lower_matrix(&a_sub.transpose());
    let gram = whitened_t.tr_mul(&whitened_t);
    let pinv = SymmetricPinv::from_symmetric((&gram + gram.transpose()) * 0.5, DEFAULT_RANK_TOL);
    let r = a_sub * x - b_sub;
    let coeffs = pinv.apply(&r);
    let delta = metric.solve(&a_sub.tr_mul(&coeffs));
    let point = x - &delta;
    let violation = (a_sub * &point - b_sub).norm();
    let scale = 1.0 + b_sub.norm() + a_sub.norm() * point.norm();
    if violation > PROJECTION_FEASIBILITY_TOL * scale {
        return Err(Error::Inconsistent {
            residual: violation,
            threshold: PROJECTION_FEASIBILITY_TOL * scale,
        });
    }
    Ok(ProjectionResult {
        distance_b: metric.norm(&delta),
        point,
    })
}
