//! `FMAT` feature matrices: a 25-byte header (magic, `u32` version, `u64`
//! rows, `u64` cols, `u8` label flag), optional `u32` labels, then row-major
//! `f32` values. All integers and floats are little-endian.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::{write_atomic, Reader};
use crate::tensor::Tensor;

pub const FMAT_MAGIC: &[u8; 4] = b"FMAT";
pub const FMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 25;

fn encode(matrix: &Tensor, labels: Option<&[u32]>) -> Result<Vec<u8>> {
    if matrix.rank() != 2 {
        return Err(Error::Dimension(format!("feature matrix of shape {:?}", matrix.shape())));
    }
    if let Some(l) = labels {
        if l.len() != matrix.rows() {
            return Err(Error::Dimension(format!("{} labels for {} rows", l.len(), matrix.rows())));
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (matrix.rows() + matrix.len()));
    out.extend_from_slice(FMAT_MAGIC);
    out.extend_from_slice(&FMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(matrix.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(matrix.cols() as u64).to_le_bytes());
    out.push(u8::from(labels.is_some()));
    for &l in labels.unwrap_or_default() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for &x in matrix.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(Tensor, Option<Vec<u32>>)> {
    let mut r = Reader::new(path, bytes);
    if bytes.len() < 4 || &bytes[..4] != FMAT_MAGIC {
        return Err(r.error_at(0, "not a FMAT file"));
    }
    r.take(4, "magic")?;
    let version = r.u32("header")?;
    if version != FMAT_VERSION {
        return Err(r.error_at(4, format!("unsupported FMAT version {version}")));
    }
    let rows = r.u64("header")?;
    let cols = r.u64("header")?;
    if rows == 0 || cols == 0 {
        return Err(r.error_at(8, format!("empty {rows}x{cols} matrix")));
    }
    let flag_at = r.pos();
    let flag = r.u8("header")?;
    if flag > 1 {
        return Err(r.error_at(flag_at, format!("label flag must be 0 or 1, found {flag}")));
    }
    let label_bytes = if flag == 1 { rows.checked_mul(4) } else { Some(0) };
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .zip(label_bytes)
        .and_then(|(d, l)| d.checked_add(l))
        .and_then(|p| p.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| r.error_at(8, format!("{rows}x{cols} matrix is too large")))?;
    let actual = bytes.len() as u64;
    if actual != expected {
        let what = if actual < expected { "truncated file" } else { "oversized file" };
        return Err(r.error_at(
            expected.min(actual) as usize,
            format!("{what}: expected {expected} bytes, found {actual}"),
        ));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let labels = if flag == 1 {
        Some((0..rows).map(|_| r.u32("labels")).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let data = r
        .take(rows * cols * 4, "data")?
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    r.finish()?;
    Ok((Tensor::new(vec![rows, cols], data)?, labels))
}

/// Writes a matrix with optional labels. Values are stored as `f32`.
pub fn save_matrix(path: &Path, matrix: &Tensor, labels: Option<&[u32]>) -> Result<()> {
    write_atomic(path, &encode(matrix, labels)?)
}

pub fn load_matrix(path: &Path) -> Result<(Tensor, Option<Vec<u32>>)> {
    decode(path, &std::fs::read(path)?)
}

pub fn save_features(path: &Path, data: &Dataset) -> Result<()> {
    save_matrix(path, &data.features, Some(&data.labels))
}

/// Loads a labelled matrix; unlabelled files are rejected.
pub fn load_features(path: &Path) -> Result<Dataset> {
    match load_matrix(path)? {
        (features, Some(labels)) => Dataset::new(features, labels),
        (_, None) => Err(Error::Format {
            path: path.display().to_string(),
            offset: 24,
            msg: "file carries no labels".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        let features = Tensor::from_rows(&[vec![0.5, -1.25, 3.0], vec![1e-3, 2.0, -0.0]]).unwrap();
        Dataset::new(features, vec![4, 9]).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample().features, Some(&[4, 9])).unwrap();
        assert_eq!(&bytes[..4], b"FMAT");
        assert_eq!(bytes.len(), 25 + 8 + 24);
        assert_eq!(bytes[24], 1);
        assert_eq!(u32::from_le_bytes(bytes[25..29].try_into().unwrap()), 4);
    }

    #[test]
    fn decode_roundtrip_at_f32_precision() {
        let d = sample();
        let bytes = encode(&d.features, Some(&d.labels)).unwrap();
        let (m, labels) = decode(Path::new("x"), &bytes).unwrap();
        assert_eq!(labels.unwrap(), d.labels);
        let expect: Vec<f64> = d.features.data().iter().map(|&x| f64::from(x as f32)).collect();
        assert_eq!(m.data(), expect.as_slice());
    }

    #[test]
    fn truncation_names_lengths() {
        let bytes = encode(&sample().features, None).unwrap();
        let err = decode(Path::new("x"), &bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("expected 49 bytes, found 46"), "{err}");
        let err = decode(Path::new("x"), &bytes[..10]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&sample().features, None).unwrap();
        bytes[5] = 7;
        let err = decode(Path::new("x"), &bytes).unwrap_err().to_string();
        assert!(err.contains("version") && err.contains("offset 4"), "{err}");
        bytes[0] = b'G';
        let err = decode(Path::new("x"), &bytes).unwrap_err().to_string();
        assert!(err.contains("not a FMAT file"), "{err}");
    }
}
