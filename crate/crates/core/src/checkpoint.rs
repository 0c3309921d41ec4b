//! `DRML` checkpoints: magic, `u32` version, the 32-byte config digest, a
//! `u32` entry count, then per entry a `u32` name length, the UTF-8 name, a
//! `u32` rank, `u64` dims and the `f64` values. Little-endian throughout.

use std::collections::BTreeSet;
use std::path::Path;

use log::warn;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::io::{write_atomic, Reader};
use crate::model::layout;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DRML";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(digest: &[u8; 32], store: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(digest);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<([u8; 32], ParameterStore)> {
    let mut r = Reader::new(path, bytes);
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(r.error_at(0, "not a DRML checkpoint"));
    }
    r.take(4, "magic")?;
    let version = r.u32("header")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error_at(4, format!("unsupported checkpoint version {version}")));
    }
    let digest: [u8; 32] = r.take(32, "header")?.try_into().expect("32 bytes");
    let count = r.u32("header")?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let at = r.pos();
        let len = r.u32("entry name")? as usize;
        let name = std::str::from_utf8(r.take(len, "entry name")?)
            .map_err(|_| r.error_at(at + 4, "entry name is not UTF-8"))?
            .to_string();
        let rank = r.u32("entry shape")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("entry shape")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| r.error_at(r.pos(), format!("truncated file: `{name}` of shape {shape:?} overruns it")))?;
        let data = r
            .take(n * 8, "entry data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| r.error_at(at, format!("`{name}`: {e}")))?;
        store
            .insert(name, t)
            .map_err(|e| r.error_at(at, e.to_string()))?;
    }
    r.finish()?;
    Ok((digest, store))
}

pub fn save_checkpoint(path: &Path, cfg: &Config, store: &ParameterStore) -> Result<()> {
    write_atomic(path, &encode(&cfg.digest(), store))
}

/// Number of training classes recorded by the per-class loss state, if any.
fn inferred_classes(store: &ParameterStore) -> Option<usize> {
    store
        .iter()
        .find(|(name, _)| name.contains(".proxy") || name.contains(".beta"))
        .map(|(_, t)| t.rows())
}

/// Loads a checkpoint and checks it against the parameter layout of `cfg`.
/// A digest mismatch only warns; a missing, extra or misshapen entry is an
/// error.
pub fn load_checkpoint(path: &Path, cfg: &Config) -> Result<ParameterStore> {
    let (digest, store) = decode(path, &std::fs::read(path)?)?;
    if digest != cfg.digest() {
        warn!("{}: config digest differs from the checkpoint's", path.display());
    }
    let expected = layout(cfg, inferred_classes(&store).unwrap_or(0));
    let names: BTreeSet<&str> = expected.iter().map(|s| s.name.as_str()).collect();
    for spec in &expected {
        let t = store
            .get(&spec.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", spec.name)))?;
        if t.shape() != spec.shape {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {:?}, config expects {:?}",
                spec.name,
                t.shape(),
                spec.shape
            )));
        }
    }
    if let Some(extra) = store.names().find(|n| !names.contains(n)) {
        return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("head.0.weight", Tensor::from_rows(&[vec![1.5, -0.0], vec![f64::MIN_POSITIVE, 3.0]]).unwrap())
            .unwrap();
        s.insert("score.weight", Tensor::column_vector(&[0.25])).unwrap();
        s
    }

    #[test]
    fn decode_inverts_encode() {
        let bytes = encode(&[7; 32], &store());
        let (digest, back) = decode(Path::new("c"), &bytes).unwrap();
        assert_eq!(digest, [7; 32]);
        assert!(back.bits_equal(&store()));
    }

    #[test]
    fn malformed_input() {
        let bytes = encode(&[0; 32], &store());
        let err = decode(Path::new("c"), &bytes[..bytes.len() - 1]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        let err = decode(Path::new("c"), b"FMAT....").unwrap_err().to_string();
        assert!(err.contains("not a DRML checkpoint"), "{err}");
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(Path::new("c"), &long).unwrap_err().to_string().contains("trailing"));
    }
}
