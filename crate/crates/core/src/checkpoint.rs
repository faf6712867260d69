//! Binary checkpoint container.
//!
//! Layout (little endian): magic `NWPCKPT\0`, format version `u32`, config
//! JSON (`u64` length + bytes), metadata JSON (same), parameter count `u32`,
//! then per parameter: name (`u32` length + UTF-8), rank `u32`, dims `u64`
//! each, values `f64` each. A SHA-256 of everything before it closes the
//! file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::SplitSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, ModelSnapshot, Stationarity};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NWPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    step: u64,
    val_loss: Option<f64>,
    split: Option<SplitSpec>,
    stationary: Option<Stationarity>,
}

pub fn to_bytes(snapshot: &ModelSnapshot) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&snapshot.config).expect("config serializes");
    let meta = Meta {
        step: snapshot.step,
        val_loss: snapshot.val_loss.is_finite().then_some(snapshot.val_loss),
        split: snapshot.split.clone(),
        stationary: snapshot.stationary.clone(),
    };
    let meta = serde_json::to_vec(&meta).expect("meta serializes");
    for block in [&config, &meta] {
        out.extend_from_slice(&(block.len() as u64).to_le_bytes());
        out.extend_from_slice(block);
    }
    let params = &snapshot.params;
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, message: impl Into<String>) -> Error {
        Error::Corrupt { path: self.path.to_path_buf(), message: message.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| self.corrupt("bad length"))
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<ModelSnapshot> {
    let corrupt = |m: &str| Error::Corrupt { path: path.to_path_buf(), message: m.to_string() };
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 8, path };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(corrupt(&format!("unsupported format version {version}")));
    }
    let n = r.len()?;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)?;
    let n = r.len()?;
    let meta: Meta = serde_json::from_slice(r.take(n)?)?;
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?).map_err(|_| corrupt("parameter name is not UTF-8"))?.to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| corrupt("bad shape"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        names.push(name);
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    config.validate()?;
    let params = ModelParams::from_parts(&config, names, tensors)?;
    Ok(ModelSnapshot {
        config,
        params,
        step: meta.step,
        val_loss: meta.val_loss.unwrap_or(f64::NAN),
        split: meta.split,
        stationary: meta.stationary,
    })
}

pub fn save(snapshot: &ModelSnapshot, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(snapshot)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelSnapshot> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap() -> ModelSnapshot {
        let config = ModelConfig { layers: 1, hidden: 4, heads: 2, context: 5, vocab_size: 6, ..Default::default() };
        let mut s = ModelSnapshot::init(config).unwrap();
        s.params.set_head(crate::rng::normal_tensor(&mut crate::rng::stream(0, "h"), &[6, 4], 1.0)).unwrap();
        s.step = 17;
        s.val_loss = 1.25;
        s
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let s = snap();
        save(&s, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, s);
        let a = s.forward_with_hiddens(&[1, 2, 3]).unwrap();
        let b = back.forward_with_hiddens(&[1, 2, 3]).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = to_bytes(&snap());
        let k = bytes.len() / 2;
        bytes[k] ^= 1;
        let err = from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("checksum"));
        assert!(from_bytes(b"nonsense", Path::new("x")).is_err());
    }

    #[test]
    fn nan_validation_loss_survives() {
        let mut s = snap();
        s.val_loss = f64::NAN;
        let back = from_bytes(&to_bytes(&s), Path::new("x")).unwrap();
        assert!(back.val_loss.is_nan());
    }
}
