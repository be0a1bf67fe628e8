//! The `IHQC` parameter container.
//!
//! Layout (little-endian): magic `IHQC`, `u32` version (1), `u32` header
//! length, a UTF-8 JSON header (`kind`, `config`, `config_hash`), `u32`
//! tensor count, then per tensor: `u32` name length, name bytes, `u32` rank,
//! `rank × u32` dims and the `f32` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IHQC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hex SHA-256 of raw bytes.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the compact JSON form of `config`. `serde_json` maps keep
/// their keys sorted, so equal configs hash equally.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    let value = serde_json::to_value(config).expect("config serialises");
    digest(value.to_string().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config: serde_json::Value,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: &str, config: &C, params: ParamSet<f32>) -> Self {
        Self {
            header: CheckpointHeader {
                kind: kind.to_string(),
                config: serde_json::to_value(config).expect("config serialises"),
                config_hash: config_hash(config),
            },
            params,
        }
    }

    pub fn config<C: serde::de::DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.header.config.clone()).map_err(|e| Error::Format {
            path: "checkpoint header".into(),
            detail: e.to_string(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.fail("bad magic, not an IHQC checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(&format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| r.fail(&format!("header: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| r.fail("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| r.fail(&format!("tensor `{name}`: {e}")))?;
            params.add(name, t);
        }
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes"));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: &str) -> Error {
        Error::Format {
            path: self.origin.to_string(),
            detail: detail.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail("truncated")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut p = ParamSet::new();
        p.add("a.weight", Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]).unwrap());
        p.add("a.bias", Tensor::vector(vec![0.25, -0.5, 1.0]));
        let ck = Checkpoint::new("test", &serde_json::json!({"b": 1, "a": [1, 2]}), p);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, "mem").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], "mem").is_err());
    }

    #[test]
    fn config_hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"x":1,"y":2}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"y":2,"x":1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
    }
}
