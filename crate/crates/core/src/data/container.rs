//! Binary instance container, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "SKSOLVE1"
//! version  u32
//! storage  u8       0 = dense column-major, 1 = CSR
//! metric   u8       0 = identity, 1 = equal to A, 2 = explicit dense
//! reserved u16      0
//! m, n     u64, u64
//! dense:   m·n f64 (column-major)
//! CSR:     nnz u64, indptr (m+1)·u64, indices nnz·u64, values nnz·f64
//! b        m f64
//! metric   n·n f64 column-major (explicit metric only)
//! sha256   32 bytes over everything above
//! ```

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use super::{CsrMatrix, InstanceData, MatrixStorage, MetricSpec};
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 8] = b"SKSOLVE1";
pub const CONTAINER_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 1 + 1 + 2 + 8 + 8;
const DIGEST_LEN: usize = 32;

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes `data` into container bytes.
pub fn write_container(data: &InstanceData) -> Vec<u8> {
    let (m, n) = (data.a.nrows(), data.a.ncols());
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.push(match data.a {
        MatrixStorage::Dense(_) => 0,
        MatrixStorage::Sparse(_) => 1,
    });
    out.push(match data.metric {
        MetricSpec::Identity => 0,
        MetricSpec::EqualToA => 1,
        MetricSpec::Explicit(_) => 2,
    });
    out.extend_from_slice(&0u16.to_le_bytes());
    put_u64(&mut out, m);
    put_u64(&mut out, n);
    match &data.a {
        MatrixStorage::Dense(d) => put_f64s(&mut out, d.as_slice()),
        MatrixStorage::Sparse(s) => {
            put_u64(&mut out, s.nnz());
            s.indptr().iter().for_each(|&p| put_u64(&mut out, p));
            s.indices().iter().for_each(|&j| put_u64(&mut out, j));
            put_f64s(&mut out, s.values());
        }
    }
    put_f64s(&mut out, data.b.as_slice());
    if let MetricSpec::Explicit(bm) = &data.metric {
        put_f64s(&mut out, bm.as_slice());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Container("truncated file".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Container(format!("size {v} does not fit in memory")))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(8)
            .ok_or_else(|| Error::Container("payload size overflows".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u64s(&mut self, count: usize) -> Result<Vec<usize>> {
        (0..count).map(|_| self.u64()).collect()
    }
}

/// Parses container bytes; nothing is returned unless the checksum matches.
pub fn read_container(bytes: &[u8]) -> Result<InstanceData> {
    if bytes.len() < HEADER_LEN + DIGEST_LEN {
        return Err(Error::Container("truncated file".into()));
    }
    if &bytes[..8] != CONTAINER_MAGIC {
        return Err(Error::Container("not an instance container (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::Container(format!(
            "unsupported container version {version}, expected {CONTAINER_VERSION}"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let mut r = Reader { bytes: body, pos: 12 };
    let storage = r.take(1)?[0];
    let metric = r.take(1)?[0];
    r.take(2)?;
    let m = r.u64()?;
    let n = r.u64()?;
    let a = match storage {
        0 => {
            let values = r.f64s(m.checked_mul(n).ok_or_else(|| Error::Container("dimensions overflow".into()))?)?;
            MatrixStorage::Dense(DMatrix::from_vec(m, n, values))
        }
        1 => {
            let nnz = r.u64()?;
            let indptr = r.u64s(m + 1)?;
            let indices = r.u64s(nnz)?;
            let values = r.f64s(nnz)?;
            let csr = CsrMatrix::new(m, n, indptr, indices, values).map_err(|e| Error::Container(e.to_string()))?;
            MatrixStorage::Sparse(csr)
        }
        other => return Err(Error::Container(format!("unknown storage tag {other}"))),
    };
    let b = DVector::from_vec(r.f64s(m)?);
    let metric = match metric {
        0 => MetricSpec::Identity,
        1 => MetricSpec::EqualToA,
        2 => MetricSpec::Explicit(DMatrix::from_vec(n, n, r.f64s(n * n)?)),
        other => return Err(Error::Container(format!("unknown metric tag {other}"))),
    };
    if r.pos != body.len() {
        return Err(Error::Container(format!(
            "{} unexpected trailing bytes (or truncated file)",
            body.len() - r.pos
        )));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Container("checksum mismatch".into()));
    }
    Ok(InstanceData { a, b, metric })
}

pub fn export_instance(data: &InstanceData, path: &Path) -> Result<()> {
    fs::write(path, write_container(data))?;
    Ok(())
}

pub fn import_instance(path: &Path) -> Result<InstanceData> {
    read_container(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_instance, MatrixSource, ProblemRecipe};
    use crate::rng::{standard_normal_matrix, substream};

    fn dense_instance() -> InstanceData {
        build_instance(&ProblemRecipe::new(MatrixSource::DenseGaussian { m: 7, n: 4 }, 5)).unwrap().data
    }

    #[test]
    fn dense_round_trip_is_bitwise() {
        let data = dense_instance();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dense.sks");
        export_instance(&data, &path).unwrap();
        let back = import_instance(&path).unwrap();
        assert_eq!(back, data);
        let (MatrixStorage::Dense(a), MatrixStorage::Dense(b)) = (&data.a, &back.a) else { panic!() };
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn sparse_round_trip_scales_with_nnz() {
        let recipe = ProblemRecipe::new(MatrixSource::SparseGaussian { m: 300, n: 200, density: 0.01 }, 6);
        let data = build_instance(&recipe).unwrap().data;
        let bytes = write_container(&data);
        assert_eq!(read_container(&bytes).unwrap(), data);
        let MatrixStorage::Sparse(csr) = &data.a else { panic!() };
        let expected = HEADER_LEN + 8 + 8 * (301 + 2 * csr.nnz() + 300) + DIGEST_LEN;
        assert_eq!(bytes.len(), expected);
        assert!(bytes.len() < 300 * 200 * 8 / 10);
    }

    #[test]
    fn explicit_metric_round_trip() {
        let g = standard_normal_matrix(&mut substream(2, 0), 4, 4);
        let mut data = dense_instance();
        data.metric = MetricSpec::Explicit(&g * g.transpose() + DMatrix::identity(4, 4));
        assert_eq!(read_container(&write_container(&data)).unwrap(), data);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = write_container(&dense_instance());

        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0xff;
        assert!(matches!(read_container(&bad), Err(Error::Container(m)) if m.contains("checksum")));

        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 3] ^= 0x01;
        assert!(matches!(read_container(&flipped), Err(Error::Container(m)) if m.contains("checksum")));

        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(read_container(&version), Err(Error::Container(m)) if m.contains("version")));

        let truncated = &bytes[..bytes.len() - 40];
        assert!(matches!(read_container(truncated), Err(Error::Container(m)) if m.contains("truncated")));
        assert!(read_container(&bytes[..10]).is_err());

        let mut magic = bytes;
        magic[0] = b'X';
        assert!(read_container(&magic).is_err());
    }
}
