//! Parameter files.
//!
//! Layout (little-endian): `SSCA` `NETP`, `u8` version, `u64` init seed,
//! `u32` length + architecture JSON, `u32` layer count, then per layer the
//! weight and bias tensors as `u32` length + `f64` values. Values are
//! stored at full precision so a reloaded network scores and hashes exactly
//! like the trained one.

use std::path::Path;

use super::{Arch, LayerParams, TinyNetParams};
use crate::error::{Error, Result};
use crate::imaging::io::{write_atomic, ByteReader, MAGIC};

pub const PARAMS_TAG: &[u8; 4] = b"NETP";
pub const PARAMS_VERSION: u8 = 1;

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn params_to_bytes(net: &TinyNetParams) -> Vec<u8> {
    let arch = serde_json::to_vec(net.arch()).expect("architecture serializes");
    let mut out = Vec::with_capacity(64 + arch.len() + 8 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(PARAMS_TAG);
    out.push(PARAMS_VERSION);
    out.extend_from_slice(&net.seed().to_le_bytes());
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for l in net.layers() {
        push_f64s(&mut out, &l.weight);
        push_f64s(&mut out, &l.bias);
    }
    out
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<TinyNetParams> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC || r.take(4)? != PARAMS_TAG {
        return Err(Error::Format("not a parameter file".into()));
    }
    let version = r.u8()?;
    if version != PARAMS_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: PARAMS_VERSION,
        });
    }
    let seed = r.u64()?;
    let arch_len = r.u32()? as usize;
    let arch: Arch = serde_json::from_slice(r.take(arch_len)?)
        .map_err(|e| Error::Format(format!("architecture: {e}")))?;
    let n = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let mut read = || -> Result<Vec<f64>> {
            let len = r.u32()? as usize;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Format("layer length overflows".into()))?)?;
            Ok(raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect())
        };
        let weight = read()?;
        let bias = read()?;
        layers.push(LayerParams { weight, bias });
    }
    if !r.is_done() {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    TinyNetParams::from_parts(arch, layers, seed)
}

pub fn save_params(path: &Path, net: &TinyNetParams) -> Result<()> {
    write_atomic(path, &params_to_bytes(net))
}

pub fn load_params(path: &Path) -> Result<TinyNetParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    params_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_image;
    use super::*;
    use crate::scorer::Scorer;

    fn net() -> TinyNetParams {
        TinyNetParams::init(Arch::default_for(8, 8, 3, 4), 42).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ssca");
        let a = net();
        save_params(&path, &a).unwrap();
        let b = load_params(&path).unwrap();
        assert_eq!(a.arch(), b.arch());
        assert_eq!(b.seed(), 42);
        let imgs: Vec<_> = (0..5).map(|s| random_image(8, 8, 3, s)).collect();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.score_batch(&imgs).unwrap(), b.score_batch(&imgs).unwrap());
    }

    #[test]
    fn second_save_is_bit_stable() {
        let a = net();
        let once = params_from_bytes(&params_to_bytes(&a)).unwrap();
        assert_eq!(params_to_bytes(&once), params_to_bytes(&a));
    }

    #[test]
    fn corrupt_magic_rejected() {
        let mut bytes = params_to_bytes(&net());
        bytes[0] = b'X';
        assert!(matches!(params_from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = params_to_bytes(&net());
        bytes[5] = b'X';
        assert!(matches!(params_from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = params_to_bytes(&net());
        bytes[8] = 9;
        assert!(matches!(
            params_from_bytes(&bytes),
            Err(Error::UnsupportedVersion {
                found: 9,
                expected: 1
            })
        ));
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let bytes = params_to_bytes(&net());
        assert!(params_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(params_from_bytes(&longer), Err(Error::Format(_))));
    }
}
