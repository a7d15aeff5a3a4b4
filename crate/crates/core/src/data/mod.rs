//! Problem ingestion: LIBSVM text files, synthetic generators and a binary
//! instance container.

mod container;
mod generate;
mod libsvm;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::LinearSystemInstance;

pub use container::{export_instance, import_instance, read_container, write_container, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use generate::{build_instance, BuiltInstance, MatrixSource, MetricRule, ProblemRecipe, RhsRule};
pub use libsvm::{parse_libsvm, parse_libsvm_str, write_libsvm, LibsvmData};

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(nrows: usize, ncols: usize, indptr: Vec<usize>, indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if indptr.len() != nrows + 1 || indptr[0] != 0 {
            return Err(Error::invalid("row pointer must have nrows + 1 entries starting at 0"));
        }
        if indices.len() != values.len() || *indptr.last().unwrap() != indices.len() {
            return Err(Error::invalid("row pointer, column indices and values disagree on nnz"));
        }
        for row in 0..nrows {
            let (lo, hi) = (indptr[row], indptr[row + 1]);
            if lo > hi {
                return Err(Error::invalid(format!("row pointer decreases at row {row}")));
            }
            let cols = &indices[lo..hi];
            if cols.windows(2).any(|w| w[0] >= w[1]) || cols.last().is_some_and(|&c| c >= ncols) {
                return Err(Error::invalid(format!("row {row} has unsorted or out-of-range column indices")));
            }
        }
        Ok(Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        })
    }

    /// Keeps the exact nonzero entries of `dense`.
    pub fn from_dense(dense: &DMatrix<f64>) -> Self {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for i in 0..dense.nrows() {
            for j in 0..dense.ncols() {
                let v = dense[(i, j)];
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            nrows: dense.nrows(),
            ncols: dense.ncols(),
            indptr,
            indices,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn density(&self) -> f64 {
        self.nnz() as f64 / (self.nrows as f64 * self.ncols as f64)
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(column, value)` pairs of one row.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
        self.indices[lo..hi].iter().copied().zip(self.values[lo..hi].iter().copied())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut dense = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                dense[(i, j)] = v;
            }
        }
        dense
    }

    /// Scales every nonzero row to unit Euclidean norm.
    pub fn normalize_rows(&mut self) {
        for i in 0..self.nrows {
            let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
            let norm = self.values[lo..hi].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                self.values[lo..hi].iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MatrixStorage {
    Dense(DMatrix<f64>),
    Sparse(CsrMatrix),
}

impl MatrixStorage {
    pub fn nrows(&self) -> usize {
        match self {
            MatrixStorage::Dense(d) => d.nrows(),
            MatrixStorage::Sparse(s) => s.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            MatrixStorage::Dense(d) => d.ncols(),
            MatrixStorage::Sparse(s) => s.ncols(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            MatrixStorage::Dense(d) => d.clone(),
            MatrixStorage::Sparse(s) => s.to_dense(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricSpec {
    Identity,
    EqualToA,
    Explicit(DMatrix<f64>),
}

/// Serializable description of a linear system `Ax = b` with metric `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceData {
    pub a: MatrixStorage,
    pub b: DVector<f64>,
    pub metric: MetricSpec,
}

impl InstanceData {
    pub fn to_system(&self) -> Result<LinearSystemInstance> {
        let a = self.a.to_dense();
        let b = self.b.clone();
        match &self.metric {
            MetricSpec::Identity => LinearSystemInstance::with_identity(a, b),
            MetricSpec::EqualToA => LinearSystemInstance::with_metric_equal_to_a(a, b),
            MetricSpec::Explicit(m) => LinearSystemInstance::with_metric(a, b, m.clone()),
        }
    }
}
