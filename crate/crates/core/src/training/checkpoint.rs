//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `PGCK`, version `u16`, a `u32`-length-prefixed
//! UTF-8 block of `key=value` lines, a `u32` tensor count, then per tensor a
//! `u32`-length-prefixed name, rank `u8`, one `u32` per dim and the payload.
//! The payload element width follows the `dtype` key (`f32` or `f64`);
//! tensors named `rng.*` always hold raw `u32` words.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::binio::{put_string, Reader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PGCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Words(Vec<u32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
            Self::Words(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Self::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Self::F64(v) => v.clone(),
            Self::Words(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Ordered `key=value` configuration snapshot.
    pub config: Vec<(String, String)>,
    pub tensors: Vec<CheckpointTensor>,
}

fn is_word_tensor(name: &str) -> bool {
    name.starts_with("rng.")
}

impl Checkpoint {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.config.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.config.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks config key {key}")))
    }

    pub fn parse<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("checkpoint key {key} has unparsable value {raw:?}")))
    }

    pub fn dtype(&self) -> Result<&str> {
        match self.require("dtype")? {
            d @ ("f32" | "f64") => Ok(d),
            other => Err(Error::Format(format!("unknown dtype {other}"))),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&CheckpointTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: TensorData) {
        self.tensors.push(CheckpointTensor {
            name: name.into(),
            dims,
            data,
        });
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let dtype = self.dtype()?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let mut block = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("config entry {k:?} cannot be framed")));
            }
            block.push_str(&format!("{k}={v}\n"));
        }
        put_string(&mut out, &block);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let rank = u8::try_from(t.dims.len()).map_err(|_| Error::Format(format!("{}: rank too large", t.name)))?;
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(Error::Format(format!("{}: dims do not match payload", t.name)));
            }
            put_string(&mut out, &t.name);
            out.push(rank);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match (&t.data, is_word_tensor(&t.name), dtype) {
                (TensorData::Words(v), true, _) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                (TensorData::F32(v), false, "f32") => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                (TensorData::F64(v), false, "f64") => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                _ => {
                    return Err(Error::Format(format!(
                        "{}: payload type disagrees with dtype {dtype}",
                        t.name
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut ck = Checkpoint::default();
        for line in r.string()?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line {line:?}")))?;
            ck.config.push((k.to_string(), v.to_string()));
        }
        let dtype = ck.dtype()?.to_string();
        let count = r.u32()? as usize;
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let data = if is_word_tensor(&name) {
                let raw = r.take(
                    len.checked_mul(4)
                        .ok_or_else(|| Error::Format("tensor too large".into()))?,
                )?;
                TensorData::Words(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            } else if dtype == "f32" {
                let raw = r.take(
                    len.checked_mul(4)
                        .ok_or_else(|| Error::Format("tensor too large".into()))?,
                )?;
                TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            } else {
                let raw = r.take(
                    len.checked_mul(8)
                        .ok_or_else(|| Error::Format("tensor too large".into()))?,
                )?;
                TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            };
            ck.tensors.push(CheckpointTensor { name, dims, data });
        }
        if !r.is_done() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                r.remaining()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.set("dtype", "f32");
        c.set("model.channels", 96);
        c.push(
            "param.w",
            vec![2, 2],
            TensorData::F32(vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]),
        );
        c.push("rng.state", vec![3], TensorData::Words(vec![0, u32::MAX, 7]));
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().encode().unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'?';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(Checkpoint::decode(&ver), Err(Error::Version { found: 9, .. })));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn payload_must_match_dtype() {
        let mut c = sample();
        c.set("dtype", "f64");
        assert!(c.encode().is_err());
    }
}
