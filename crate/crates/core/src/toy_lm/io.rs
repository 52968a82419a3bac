//! `TLM1` parameter files.
//!
//! Layout (little-endian): magic `TLM1`; config header of six u32
//! (vocab_size, dim, layers, heads, context, ff_dim); tensor count u32; then
//! per tensor: name length u32, UTF-8 name, rank u32, dims u32 each, float32
//! data. The fingerprint is the SHA-256 of these bytes.

use std::path::Path;

use super::model::{LmConfig, LmParams};
use crate::codec::{put_f32s, put_u32, sha256_hex, Reader};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

const MAGIC: &[u8; 4] = b"TLM1";

pub fn to_bytes<T: Scalar>(params: &LmParams<T>) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [c.vocab_size, c.dim, c.layers, c.heads, c.context, c.ff_dim] {
        put_u32(&mut out, v as u32);
    }
    let names = params.tensor_names();
    let tensors = params.tensors();
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in names.iter().zip(tensors) {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, 2);
        put_u32(&mut out, t.rows as u32);
        put_u32(&mut out, t.cols as u32);
        put_f32s(&mut out, t.data.iter().map(|v| v.as_f32()));
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<LmParams<f32>> {
    let mut r = Reader::new(bytes, "TLM1 params");
    r.expect_magic(MAGIC)?;
    let mut header = [0usize; 6];
    for h in &mut header {
        *h = r.u32()? as usize;
    }
    let config = LmConfig {
        vocab_size: header[0],
        dim: header[1],
        layers: header[2],
        heads: header[3],
        context: header[4],
        ff_dim: header[5],
    };
    config.validate()?;
    let mut params = LmParams::<f32>::zeros(&config);
    let names = params.tensor_names();
    let count = r.u32()? as usize;
    if count != names.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, file declares {count}",
            names.len()
        )));
    }
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let len = r.u32()? as usize;
        let got = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if got != name {
            return Err(Error::Format(format!("expected tensor {name}, found {got}")));
        }
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let (rows, cols) = match dims[..] {
            [n] => (1, n),
            [a, b] => (a, b),
            _ => return Err(Error::Format(format!("tensor {name} has rank {rank}"))),
        };
        if (rows, cols) != slot.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {rows}x{cols}, expected {}x{}",
                slot.rows, slot.cols
            )));
        }
        *slot = Matrix::from_vec(rows, cols, r.f32s(rows * cols)?);
    }
    r.finish()?;
    Ok(params)
}

pub fn fingerprint<T: Scalar>(params: &LmParams<T>) -> String {
    sha256_hex(&to_bytes(params))
}

pub fn save(params: &LmParams<f32>, path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = to_bytes(params);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: impl AsRef<Path>) -> Result<(LmParams<f32>, String)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((from_bytes(&bytes)?, sha256_hex(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_fingerprint() {
        let cfg = LmConfig {
            vocab_size: 20,
            dim: 8,
            layers: 1,
            heads: 2,
            context: 6,
            ff_dim: 12,
        };
        let p = LmParams::<f32>::init(&cfg, 4).unwrap();
        let bytes = to_bytes(&p);
        assert_eq!(&bytes[..4], b"TLM1");
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(fingerprint(&back), fingerprint(&p));
        assert_eq!(fingerprint(&p).len(), 64);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
