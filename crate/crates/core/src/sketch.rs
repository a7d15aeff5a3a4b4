//! Sketch distributions and realized sketches.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{LinearSystemInstance, SymmetricPinv, DEFAULT_RANK_TOL};
use crate::rng::standard_normal_vector;

/// Relative squared-pivot floor below which `M` is treated as singular.
pub const CHOLESKY_PIVOT_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub enum SketchKind {
    /// `S = I_{:C}` with `|C| = block_size`, `C` uniform without replacement.
    BlockIdentity { block_size: usize },
    /// `S = e_i` with `i` uniform.
    SingleCoordinate,
    /// A single column `s ~ N(0, Σ)`.
    Gaussian,
    /// `S = I_{:C}` with `C` drawn uniformly from a fixed list of blocks.
    BlockList { blocks: Vec<Vec<usize>> },
}

/// A distribution over sketch matrices with `m` rows.
#[derive(Clone, Debug)]
pub struct SketchDistribution {
    kind: SketchKind,
    m: usize,
    covariance_factor: Option<DMatrix<f64>>,
}

impl SketchDistribution {
    pub fn block_identity(m: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 || block_size > m {
            return Err(Error::invalid(format!(
                "block size {block_size} must lie in 1..={m}"
            )));
        }
        Ok(Self {
            kind: SketchKind::BlockIdentity { block_size },
            m,
            covariance_factor: None,
        })
    }

    pub fn single_coordinate(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("sketch distribution needs at least one row"));
        }
        Ok(Self {
            kind: SketchKind::SingleCoordinate,
            m,
            covariance_factor: None,
        })
    }

    /// Gaussian vector sketch; `covariance = None` means `Σ = I`.
    pub fn gaussian(m: usize, covariance: Option<DMatrix<f64>>) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("sketch distribution needs at least one row"));
        }
        let covariance_factor = match covariance {
            None => None,
            Some(cov) => {
                check_dim("Gaussian covariance", m, cov.nrows())?;
                check_dim("Gaussian covariance", m, cov.ncols())?;
                if (&cov - cov.transpose()).amax() > 1e-9 * (1.0 + cov.amax()) {
                    return Err(Error::NotSymmetric {
                        asymmetry: (&cov - cov.transpose()).amax(),
                    });
                }
                let chol = cov
                    .cholesky()
                    .ok_or(Error::NotPositiveDefinite("Gaussian sketch covariance"))?;
                Some(chol.l())
            }
        };
        Ok(Self {
            kind: SketchKind::Gaussian,
            m,
            covariance_factor,
        })
    }

    /// Uniform choice among explicitly listed row blocks.
    pub fn block_list(m: usize, blocks: Vec<Vec<usize>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::invalid("block list is empty"));
        }
        let mut normalized = Vec::with_capacity(blocks.len());
        for mut block in blocks {
            block.sort_unstable();
            let len = block.len();
            block.dedup();
            if block.is_empty() || block.len() != len || block.iter().any(|&i| i >= m) {
                return Err(Error::invalid(format!(
                    "blocks must be nonempty sets of distinct row indices below {m}"
                )));
            }
            normalized.push(block);
        }
        Ok(Self {
            kind: SketchKind::BlockList { blocks: normalized },
            m,
            covariance_factor: None,
        })
    }

    pub fn kind(&self) -> &SketchKind {
        &self.kind
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of sketch columns `q`, when it is fixed.
    pub fn sketch_size(&self) -> Option<usize> {
        match &self.kind {
            SketchKind::BlockIdentity { block_size } => Some(*block_size),
            SketchKind::SingleCoordinate | SketchKind::Gaussian => Some(1),
            SketchKind::BlockList { blocks } => {
                let q = blocks[0].len();
                blocks.iter().all(|b| b.len() == q).then_some(q)
            }
        }
    }

    /// Size of a finite support; `None` for continuous distributions.
    pub fn support_size(&self) -> Option<f64> {
        match &self.kind {
            SketchKind::BlockIdentity { block_size } => Some(binomial(self.m, *block_size)),
            SketchKind::SingleCoordinate => Some(self.m as f64),
            SketchKind::BlockList { blocks } => Some(blocks.len() as f64),
            SketchKind::Gaussian => None,
        }
    }

    /// All support points (each equally likely), if the support is finite and
    /// has at most `limit` elements.
    pub fn enumerate_support(&self, limit: usize) -> Option<Vec<Vec<usize>>> {
        let size = self.support_size()?;
        if size > limit as f64 {
            return None;
        }
        match &self.kind {
            SketchKind::BlockIdentity { block_size } => Some(combinations(self.m, *block_size)),
            SketchKind::SingleCoordinate => Some((0..self.m).map(|i| vec![i]).collect()),
            SketchKind::BlockList { blocks } => Some(blocks.clone()),
            SketchKind::Gaussian => None,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Sketch {
        match &self.kind {
            SketchKind::BlockIdentity { block_size } => {
                let mut rows = rand::seq::index::sample(rng, self.m, *block_size).into_vec();
                rows.sort_unstable();
                Sketch::Rows(rows)
            }
            SketchKind::SingleCoordinate => Sketch::Rows(vec![rng.random_range(0..self.m)]),
            SketchKind::BlockList { blocks } => Sketch::Rows(blocks[rng.random_range(0..blocks.len())].clone()),
            SketchKind::Gaussian => {
                let g = standard_normal_vector(rng, self.m);
                let s = match &self.covariance_factor {
                    Some(l) => l * g,
                    None => g,
                };
                Sketch::Dense(DMatrix::from_column_slice(self.m, 1, s.as_slice()))
            }
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64).round()
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..k).collect();
    loop {
        out.push(current.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if current[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        current[i] += 1;
        for j in (i + 1)..k {
            current[j] = current[j - 1] + 1;
        }
    }
}

/// A realized sketch matrix `S` (m×q).
#[derive(Clone, Debug, PartialEq)]
pub enum Sketch {
    /// Column subset of the identity, stored as sorted row indices.
    Rows(Vec<usize>),
    Dense(DMatrix<f64>),
}

impl Sketch {
    pub fn q(&self) -> usize {
        match self {
            Sketch::Rows(r) => r.len(),
            Sketch::Dense(s) => s.ncols(),
        }
    }

    /// `Sᵀ v`
    pub fn transpose_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Sketch::Rows(r) => DVector::from_iterator(r.len(), r.iter().map(|&i| v[i])),
            Sketch::Dense(s) => s.tr_mul(v),
        }
    }

    /// `S λ` as an m-vector.
    pub fn apply(&self, lambda: &DVector<f64>, m: usize) -> DVector<f64> {
        match self {
            Sketch::Rows(r) => {
                let mut out = DVector::zeros(m);
                for (&i, &l) in r.iter().zip(lambda.iter()) {
                    out[i] += l;
                }
                out
            }
            Sketch::Dense(s) => s * lambda,
        }
    }

    pub fn to_dense(&self, m: usize) -> DMatrix<f64> {
        match self {
            Sketch::Rows(r) => {
                let mut s = DMatrix::zeros(m, r.len());
                for (c, &i) in r.iter().enumerate() {
                    s[(i, c)] = 1.0;
                }
                s
            }
            Sketch::Dense(s) => s.clone(),
        }
    }
}

/// A sketch together with `M = SᵀAB⁻¹AᵀS`.
///
/// The eigendecomposition of `M` (needed for `M†`) is computed on first use and
/// cached, so iterative inner solvers that never need it do not pay for it.
#[derive(Debug)]
pub struct SketchSample {
    sketch: Sketch,
    m_matrix: DMatrix<f64>,
    /// `AᵀS` for dense sketches.
    at_s: Option<DMatrix<f64>>,
    rank_tol: f64,
    pinv: OnceLock<SymmetricPinv>,
    cholesky: OnceLock<Option<Cholesky<f64, Dyn>>>,
}

impl SketchSample {
    pub fn new(sketch: Sketch, sys: &LinearSystemInstance) -> Result<Self> {
        let (m_matrix, at_s) = match &sketch {
            Sketch::Rows(rows) => {
                if let Some(&bad) = rows.iter().find(|&&i| i >= sys.m()) {
                    return Err(Error::invalid(format!("sketch row {bad} out of range for m = {}", sys.m())));
                }
                (sys.block_gram(rows), None)
            }
            Sketch::Dense(s) => {
                check_dim("sketch rows", sys.m(), s.nrows())?;
                let at_s = sys.a_t() * s;
                let whitened = sys.metric().solve_lower_matrix(&at_s);
                let m = whitened.tr_mul(&whitened);
                ((&m + m.transpose()) * 0.5, Some(at_s))
            }
        };
        Ok(Self {
            sketch,
            m_matrix,
            at_s,
            rank_tol: DEFAULT_RANK_TOL,
            pinv: OnceLock::new(),
            cholesky: OnceLock::new(),
        })
    }

    pub fn sketch(&self) -> &Sketch {
        &self.sketch
    }

    pub fn q(&self) -> usize {
        self.sketch.q()
    }

    /// `M = SᵀAB⁻¹AᵀS`
    pub fn m_matrix(&self) -> &DMatrix<f64> {
        &self.m_matrix
    }

    pub fn rank_tol(&self) -> f64 {
        self.rank_tol
    }

    /// Cached eigendecomposition-based `M†`.
    pub fn pinv(&self) -> &SymmetricPinv {
        self.pinv
            .get_or_init(|| SymmetricPinv::from_symmetric(self.m_matrix.clone(), self.rank_tol))
    }

    /// Cholesky factor of `M`, present only when every pivot clears
    /// `CHOLESKY_PIVOT_TOL` relative to the largest diagonal entry.
    pub fn cholesky(&self) -> Option<&Cholesky<f64, Dyn>> {
        self.cholesky
            .get_or_init(|| {
                let scale = self.m_matrix.diagonal().amax();
                if scale <= 0.0 {
                    return None;
                }
                let chol = self.m_matrix.clone().cholesky()?;
                let l = chol.l_dirty();
                let ok = (0..self.q()).all(|i| l[(i, i)] * l[(i, i)] > CHOLESKY_PIVOT_TOL * scale);
                ok.then_some(chol)
            })
            .as_ref()
    }

    /// `M† v`. Definite `M` is solved by Cholesky, anything else through the
    /// eigendecomposition.
    pub fn least_norm(&self, v: &DVector<f64>) -> DVector<f64> {
        match self.cholesky() {
            Some(chol) => chol.solve(v),
            None => self.pinv().apply(v),
        }
    }

    /// `Sᵀ A v`
    pub fn sketched_a(&self, sys: &LinearSystemInstance, v: &DVector<f64>) -> DVector<f64> {
        match (&self.sketch, &self.at_s) {
            (Sketch::Rows(rows), _) => sys.rows_times(rows, v),
            (Sketch::Dense(_), Some(at_s)) => at_s.tr_mul(v),
            (Sketch::Dense(s), None) => s.tr_mul(&(sys.a() * v)),
        }
    }

    /// `d = Sᵀ(b − A x)`
    pub fn sketched_residual(&self, sys: &LinearSystemInstance, x: &DVector<f64>) -> DVector<f64> {
        self.sketch.transpose_apply(sys.b()) - self.sketched_a(sys, x)
    }

    /// `B⁻¹ Aᵀ S λ`
    pub fn lift(&self, sys: &LinearSystemInstance, lambda: &DVector<f64>) -> DVector<f64> {
        match (&self.sketch, &self.at_s) {
            (Sketch::Rows(rows), _) => sys.lift_rows(rows, lambda),
            (Sketch::Dense(_), Some(at_s)) => {
                let w = at_s * lambda;
                if sys.metric().equals_system_matrix() {
                    // B⁻¹Aᵀ = I when B = A symmetric
                    self.sketch.apply(lambda, sys.m())
                } else {
                    sys.metric().solve(&w)
                }
            }
            (Sketch::Dense(s), None) => sys.lift(&(s * lambda)),
        }
    }

    /// `Z v = AᵀS M† SᵀA v`
    pub fn z_apply(&self, sys: &LinearSystemInstance, v: &DVector<f64>) -> DVector<f64> {
        let coeffs = self.least_norm(&self.sketched_a(sys, v));
        sys.a_t() * self.sketch.apply(&coeffs, sys.m())
    }
}

/// Draws a fresh sketch from `dist` and forms its sample data for `sys`.
pub fn draw_sketch<R: Rng + ?Sized>(
    dist: &SketchDistribution,
    sys: &LinearSystemInstance,
    rng: &mut R,
) -> Result<SketchSample> {
    check_dim("sketch distribution rows", sys.m(), dist.m())?;
    SketchSample::new(dist.draw(rng), sys)
}

/// `f_S(x) = ½ (Ax − b)ᵀ H (Ax − b)`, evaluated as `½ dᵀ M† d`.
pub fn stochastic_f_value(sample: &SketchSample, x: &DVector<f64>, sys: &LinearSystemInstance) -> Result<f64> {
    check_dim("iterate", sys.n(), x.len())?;
    let d = sample.sketched_residual(sys, x);
    Ok((0.5 * d.dot(&sample.least_norm(&d))).max(0.0))
}

/// `∇f_S(x) = B⁻¹AᵀS M† Sᵀ(Ax − b)`
pub fn stochastic_gradient(
    sample: &SketchSample,
    x: &DVector<f64>,
    sys: &LinearSystemInstance,
) -> Result<DVector<f64>> {
    check_dim("iterate", sys.n(), x.len())?;
    let d = sample.sketched_residual(sys, x);
    Ok(-sample.lift(sys, &sample.least_norm(&d)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::project_affine;
    use crate::rng::substream;
    use nalgebra::dvector;

    use std::collections::HashMap;

    fn random_instance(seed: u64, m: usize, n: usize, general_metric: bool) -> LinearSystemInstance {
        let mut rng = substream(seed, 0);
        let a = crate::rng::standard_normal_matrix(&mut rng, m, n);
        let z = standard_normal_vector(&mut rng, n);
        let b = &a * z;
        if general_metric {
            let g = crate::rng::standard_normal_matrix(&mut rng, n, n);
            let bm = &g * g.transpose() + DMatrix::identity(n, n);
            LinearSystemInstance::with_metric(a, b, bm).unwrap()
        } else {
            LinearSystemInstance::with_identity(a, b).unwrap()
        }
    }

    #[test]
    fn combinations_enumerate_all_subsets() {
        let c = combinations(4, 2);
        assert_eq!(c.len(), 6);
        assert_eq!(c[0], vec![0, 1]);
        assert_eq!(c[5], vec![2, 3]);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
        assert_eq!(binomial(30, 15), 155_117_520.0);
    }

    #[test]
    fn oversized_block_is_rejected() {
        assert!(SketchDistribution::block_identity(4, 5).is_err());
        assert!(SketchDistribution::block_identity(4, 0).is_err());
        let sys = random_instance(1, 5, 3, false);
        let dist = SketchDistribution::block_identity(4, 2).unwrap();
        assert!(draw_sketch(&dist, &sys, &mut substream(0, 0)).is_err());
    }

    #[test]
    fn full_block_gives_whole_gram() {
        let sys = random_instance(2, 5, 3, true);
        let dist = SketchDistribution::block_identity(5, 5).unwrap();
        let sample = draw_sketch(&dist, &sys, &mut substream(0, 0)).unwrap();
        assert_eq!(sample.sketch(), &Sketch::Rows(vec![0, 1, 2, 3, 4]));
        let dense = sys.a() * sys.metric().solve_matrix(&sys.a().transpose());
        assert!((sample.m_matrix() - dense).amax() < 1e-10);
    }

    #[test]
    fn same_stream_position_same_sample() {
        let sys = random_instance(3, 8, 4, false);
        for dist in [
            SketchDistribution::block_identity(8, 3).unwrap(),
            SketchDistribution::gaussian(8, None).unwrap(),
        ] {
            let a = draw_sketch(&dist, &sys, &mut substream(42, 5)).unwrap();
            let b = draw_sketch(&dist, &sys, &mut substream(42, 5)).unwrap();
            assert_eq!(a.sketch(), b.sketch());
            assert_eq!(a.m_matrix(), b.m_matrix());
        }
    }

    #[test]
    fn block_sampling_is_uniform_over_subsets() {
        let dist = SketchDistribution::block_identity(4, 2).unwrap();
        let mut rng = substream(2024, 0);
        let draws = 60_000;
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..draws {
            match dist.draw(&mut rng) {
                Sketch::Rows(r) => *counts.entry(r).or_default() += 1,
                Sketch::Dense(_) => unreachable!(),
            }
        }
        assert_eq!(counts.len(), 6);
        let p = 1.0 / 6.0;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (subset, &c) in &counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{subset:?}: {c}");
        }
    }

    #[test]
    fn block_gram_matches_dense_product() {
        let sys = random_instance(4, 9, 5, true);
        let dist = SketchDistribution::block_identity(9, 4).unwrap();
        let mut rng = substream(1, 1);
        for _ in 0..5 {
            let sample = draw_sketch(&dist, &sys, &mut rng).unwrap();
            let s = sample.sketch().to_dense(9);
            let at_s = sys.a().transpose() * &s;
            let dense = at_s.transpose() * sys.metric().solve_matrix(&at_s);
            assert!((sample.m_matrix() - dense).amax() <= 1e-12 * (1.0 + sample.m_matrix().amax()));
            // the dense sketch path builds the same sample
            let as_dense = SketchSample::new(Sketch::Dense(s), &sys).unwrap();
            assert!((as_dense.m_matrix() - sample.m_matrix()).amax() < 1e-10);
        }
    }

    #[test]
    fn f_value_and_gradient_vanish_on_solutions() {
        let sys = random_instance(5, 6, 4, true);
        let xs = sys.project_onto_solutions(&DVector::zeros(4)).unwrap().point;
        let dist = SketchDistribution::block_identity(6, 2).unwrap();
        let sample = draw_sketch(&dist, &sys, &mut substream(0, 3)).unwrap();
        assert!(stochastic_f_value(&sample, &xs, &sys).unwrap() < 1e-20);
        assert!(stochastic_gradient(&sample, &xs, &sys).unwrap().norm() < 1e-10);
    }

    #[test]
    fn f_value_identities() {
        let sys = random_instance(6, 7, 5, true);
        let mut rng = substream(6, 1);
        let xs = sys.project_onto_solutions(&DVector::zeros(5)).unwrap().point;
        for dist in [
            SketchDistribution::block_identity(7, 3).unwrap(),
            SketchDistribution::gaussian(7, None).unwrap(),
        ] {
            for _ in 0..10 {
                let sample = draw_sketch(&dist, &sys, &mut rng).unwrap();
                let x = standard_normal_vector(&mut rng, 5);
                let f = stochastic_f_value(&sample, &x, &sys).unwrap();
                let g = stochastic_gradient(&sample, &x, &sys).unwrap();
                // f_S(x) = ½‖∇f_S(x)‖²_B
                let half_grad = 0.5 * sys.metric().norm_squared(&g);
                assert!((f - half_grad).abs() <= 1e-10 * (1.0 + f));
                // f_S(x) = ½(x − x*)ᵀZ(x − x*)
                let e = &x - &xs;
                let quad = 0.5 * e.dot(&sample.z_apply(&sys, &e));
                assert!((f - quad).abs() <= 1e-10 * (1.0 + f));
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences_in_b_geometry() {
        let sys = random_instance(7, 6, 5, true);
        let dist = SketchDistribution::block_identity(6, 3).unwrap();
        let sample = draw_sketch(&dist, &sys, &mut substream(7, 2)).unwrap();
        let x = standard_normal_vector(&mut substream(7, 3), 5);
        let grad = stochastic_gradient(&sample, &x, &sys).unwrap();
        // Euclidean gradient is B ∇f_S
        let euclid = sys.metric().apply(&grad);
        let h = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (stochastic_f_value(&sample, &xp, &sys).unwrap() - stochastic_f_value(&sample, &xm, &sys).unwrap())
                / (2.0 * h);
            assert!((fd - euclid[i]).abs() <= 1e-5 * (1.0 + euclid[i].abs()), "coord {i}: {fd} vs {}", euclid[i]);
        }
    }

    #[test]
    fn unit_step_is_a_projection() {
        let sys = random_instance(8, 8, 5, true);
        let dist = SketchDistribution::block_identity(8, 3).unwrap();
        let mut rng = substream(8, 1);
        for _ in 0..5 {
            let sample = draw_sketch(&dist, &sys, &mut rng).unwrap();
            let x = standard_normal_vector(&mut rng, 5);
            let stepped = &x - stochastic_gradient(&sample, &x, &sys).unwrap();
            let s = sample.sketch().to_dense(8);
            let a_sub = s.transpose() * sys.a();
            let b_sub = s.transpose() * sys.b();
            let proj = project_affine(&x, &a_sub, &b_sub, &sys).unwrap();
            assert!((stepped - proj.point).norm() < 1e-10);
        }
    }

    #[test]
    fn b_inverse_z_is_idempotent() {
        let sys = random_instance(9, 7, 5, true);
        let dist = SketchDistribution::block_identity(7, 2).unwrap();
        let sample = draw_sketch(&dist, &sys, &mut substream(9, 1)).unwrap();
        let v = standard_normal_vector(&mut substream(9, 2), 5);
        let once = sys.metric().solve(&sample.z_apply(&sys, &v));
        let twice = sys.metric().solve(&sample.z_apply(&sys, &once));
        assert!((once - twice).norm() <= 1e-10 * (1.0 + v.norm()));
    }

    #[test]
    fn gaussian_sketch_rejects_bad_covariance() {
        let cov = DMatrix::from_diagonal(&dvector![1.0, -1.0]);
        assert!(SketchDistribution::gaussian(2, Some(cov)).is_err());
    }
}
