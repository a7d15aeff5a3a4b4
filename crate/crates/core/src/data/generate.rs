//! Synthetic and file-backed problem recipes.

use std::path::PathBuf;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{parse_libsvm, CsrMatrix, InstanceData, MatrixStorage, MetricSpec};
use crate::error::{Error, Result};
use crate::linalg::LinearSystemInstance;
use crate::rng::{standard_normal_matrix, standard_normal_vector, substream};

const MATRIX_STREAM: u64 = 0;
const RHS_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum MatrixSource {
    Libsvm { path: PathBuf, n_override: Option<usize> },
    /// i.i.d. standard normal entries.
    DenseGaussian { m: usize, n: usize },
    /// Each entry nonzero with probability `density`, standard normal values.
    SparseGaussian { m: usize, n: usize, density: f64 },
    /// `A = PᵀP` with `P` an `m×n` standard normal matrix; SPD when `m ≥ n`.
    GramGaussian { m: usize, n: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum RhsRule {
    /// `b = Az`, `z` standard normal.
    PlantedGaussian,
    Explicit(Vec<f64>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MetricRule {
    #[default]
    Identity,
    EqualToA,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemRecipe {
    pub source: MatrixSource,
    pub rhs: RhsRule,
    pub metric: MetricRule,
    pub seed: u64,
    /// Scale rows of file-backed matrices to unit norm.
    pub normalize_rows: bool,
}

impl ProblemRecipe {
    pub fn new(source: MatrixSource, seed: u64) -> Self {
        Self {
            source,
            rhs: RhsRule::PlantedGaussian,
            metric: MetricRule::Identity,
            seed,
            normalize_rows: false,
        }
    }
}

#[derive(Debug)]
pub struct BuiltInstance {
    pub data: InstanceData,
    pub system: LinearSystemInstance,
    /// `z` with `b = Az`, for planted right-hand sides.
    pub planted: Option<DVector<f64>>,
}

fn sparse_gaussian<R: Rng + ?Sized>(rng: &mut R, m: usize, n: usize, density: f64) -> CsrMatrix {
    let mut indptr = vec![0];
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for _ in 0..m {
        for j in 0..n {
            if rng.random::<f64>() < density {
                indices.push(j);
                values.push(StandardNormal.sample(rng));
            }
        }
        indptr.push(indices.len());
    }
    CsrMatrix::new(m, n, indptr, indices, values).expect("generated CSR is well formed")
}

fn check_dims(m: usize, n: usize) -> Result<()> {
    if m == 0 || n == 0 {
        Err(Error::invalid(format!("matrix dimensions must be positive, got {m}x{n}")))
    } else {
        Ok(())
    }
}

/// Deterministic in `recipe.seed`.
pub fn build_instance(recipe: &ProblemRecipe) -> Result<BuiltInstance> {
    let mut rng = substream(recipe.seed, MATRIX_STREAM);
    let storage = match &recipe.source {
        MatrixSource::Libsvm { path, n_override } => {
            let mut features = parse_libsvm(path, *n_override)?.features;
            if recipe.normalize_rows {
                features.normalize_rows();
            }
            MatrixStorage::Sparse(features)
        }
        MatrixSource::DenseGaussian { m, n } => {
            check_dims(*m, *n)?;
            MatrixStorage::Dense(standard_normal_matrix(&mut rng, *m, *n))
        }
        MatrixSource::SparseGaussian { m, n, density } => {
            check_dims(*m, *n)?;
            if !(*density > 0.0 && *density <= 1.0) {
                return Err(Error::invalid(format!("density must lie in (0, 1], got {density}")));
            }
            MatrixStorage::Sparse(sparse_gaussian(&mut rng, *m, *n, *density))
        }
        MatrixSource::GramGaussian { m, n } => {
            check_dims(*m, *n)?;
            let p = standard_normal_matrix(&mut rng, *m, *n);
            let a = p.tr_mul(&p);
            let a = (&a + a.transpose()) * 0.5;
            if a.clone().cholesky().is_none() || *m < *n {
                return Err(Error::NotPositiveDefinite("gram matrix PᵀP (needs m ≥ n)"));
            }
            MatrixStorage::Dense(a)
        }
    };
    let dense = storage.to_dense();

    let (b, planted) = match &recipe.rhs {
        RhsRule::PlantedGaussian => {
            let z = standard_normal_vector(&mut substream(recipe.seed, RHS_STREAM), dense.ncols());
            (&dense * &z, Some(z))
        }
        RhsRule::Explicit(values) => {
            if values.len() != dense.nrows() {
                return Err(Error::DimensionMismatch {
                    context: "explicit right-hand side",
                    expected: dense.nrows(),
                    actual: values.len(),
                });
            }
            (DVector::from_column_slice(values), None)
        }
    };

    let metric = match recipe.metric {
        MetricRule::Identity => MetricSpec::Identity,
        MetricRule::EqualToA => {
            if dense.nrows() != dense.ncols() {
                return Err(Error::invalid("metric B = A needs a square symmetric positive definite A"));
            }
            MetricSpec::EqualToA
        }
    };
    let data = InstanceData { a: storage, b, metric };
    let system = data.to_system()?;
    Ok(BuiltInstance { data, system, planted })
}
