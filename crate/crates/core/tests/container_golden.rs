use std::path::{Path, PathBuf};

use nalgebra::{dmatrix, dvector};
use sketchsolve::data::{
    parse_libsvm, read_container, write_container, CsrMatrix, InstanceData, MatrixStorage, MetricSpec,
};

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn check(bytes: &[u8], name: &str) {
    let path = golden(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, bytes).unwrap();
    }
    assert_eq!(bytes, std::fs::read(&path).unwrap().as_slice(), "{}", path.display());
}

fn dense_instance() -> InstanceData {
    InstanceData {
        a: MatrixStorage::Dense(dmatrix![1.0, 2.0, 0.0; 0.5, -1.0, 3.0]),
        b: dvector![3.0, 2.5],
        metric: MetricSpec::Explicit(dmatrix![2.0, 0.0, 0.0; 0.0, 1.0, 0.5; 0.0, 0.5, 1.0]),
    }
}

fn sparse_instance() -> InstanceData {
    InstanceData {
        a: MatrixStorage::Sparse(CsrMatrix::new(3, 4, vec![0, 2, 2, 3], vec![0, 3, 1], vec![1.5, -2.0, 0.25]).unwrap()),
        b: dvector![-0.5, 0.0, 0.25],
        metric: MetricSpec::Identity,
    }
}

#[test]
fn dense_container_matches_golden_bytes() {
    let bytes = write_container(&dense_instance());
    check(&bytes, "dense_explicit_metric.sks");
    assert_eq!(read_container(&bytes).unwrap(), dense_instance());
}

#[test]
fn sparse_container_matches_golden_bytes() {
    let bytes = write_container(&sparse_instance());
    check(&bytes, "sparse_identity.sks");
    assert_eq!(read_container(&bytes).unwrap(), sparse_instance());
}

#[test]
fn golden_libsvm_file_parses() {
    let data = parse_libsvm(&golden("tiny.svm"), None).unwrap();
    assert_eq!(data.labels, vec![1.0, -1.0, 1.0]);
    let dense = data.features.to_dense();
    assert_eq!(dense, dmatrix![0.5, 0.0, 2.0; 0.0, -1.25, 0.0; 1.0, 0.0, 1e-3]);
}
