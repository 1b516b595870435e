//! The `TIA1` container: magic, version, the config text that produced the
//! run, then named blocks with dtype and shape headers.
//!
//! Layout (little endian): `b"TIA1"`, `u32` version, `u32` config length,
//! config UTF-8, `u32` block count, then per block `u16` name length, name,
//! `u8` dtype (0 f32, 1 f64, 2 u64), `u8` rank, `u32` per dim, raw data.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TIA1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum BlockData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: BlockData,
}

impl Block {
    pub fn from_tensor(name: String, t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F32 => BlockData::F32(flat.to_vec1()?),
            DType::F64 => BlockData::F64(flat.to_vec1()?),
            other => {
                return Err(Error::ParameterBlock {
                    name,
                    reason: format!("unsupported dtype {other:?}"),
                })
            }
        };
        Ok(Self {
            name,
            dims: t.dims().to_vec(),
            data,
        })
    }

    pub fn from_f64s(name: String, values: Vec<f64>) -> Self {
        Self {
            name,
            dims: vec![values.len()],
            data: BlockData::F64(values),
        }
    }

    pub fn from_u64(name: String, value: u64) -> Self {
        Self {
            name,
            dims: vec![1],
            data: BlockData::U64(vec![value]),
        }
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::ParameterBlock {
            name: self.name.clone(),
            reason: reason.into(),
        }
    }

    pub fn to_tensor(&self, dtype: DType, dims: &[usize]) -> Result<Tensor> {
        if self.dims != dims {
            return Err(self.err(format!("shape {:?}, expected {dims:?}", self.dims)));
        }
        let t = match (&self.data, dtype) {
            (BlockData::F32(v), DType::F32) => Tensor::from_slice(v, dims, &Device::Cpu)?,
            (BlockData::F64(v), DType::F64) => Tensor::from_slice(v, dims, &Device::Cpu)?,
            _ => return Err(self.err(format!("dtype does not match {dtype:?}"))),
        };
        Ok(t)
    }

    pub fn to_f64s(&self) -> Result<Vec<f64>> {
        match &self.data {
            BlockData::F64(v) => Ok(v.clone()),
            _ => Err(self.err("expected f64 data")),
        }
    }

    pub fn to_u64(&self) -> Result<u64> {
        match &self.data {
            BlockData::U64(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(self.err("expected one u64")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub blocks: Vec<Block>,
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::ParameterBlock {
                name: name.to_string(),
                reason: "missing from checkpoint".into(),
            })
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.blocks.iter().any(|b| b.name.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            let name = b.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| b.err("name too long"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(match b.data {
                BlockData::F32(_) => 0,
                BlockData::F64(_) => 1,
                BlockData::U64(_) => 2,
            });
            out.push(b.dims.len() as u8);
            for &d in &b.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &b.data {
                BlockData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlockData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlockData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a TIA1 file".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32("config length")? as usize;
        let config = String::from_utf8(r.take(len, "config")?.to_vec())
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let n = r.u32("block count")?;
        let mut blocks = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name_len = u16::from_le_bytes(r.take(2, "block name")?.try_into().expect("2 bytes"));
            let name = String::from_utf8(r.take(name_len as usize, "block name")?.to_vec())
                .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
            let truncated = |_| Error::ParameterBlock {
                name: name.clone(),
                reason: "truncated".into(),
            };
            let header = r.take(2, "").map_err(truncated)?;
            let (code, rank) = (header[0], header[1] as usize);
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("").map_err(truncated)? as usize);
            }
            let count: usize = dims.iter().product();
            let width = match code {
                0 => 4,
                1 | 2 => 8,
                _ => {
                    return Err(Error::ParameterBlock {
                        name,
                        reason: format!("unknown dtype code {code}"),
                    })
                }
            };
            let raw = r.take(count * width, "").map_err(truncated)?;
            let data = match code {
                0 => BlockData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
                1 => BlockData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()),
                _ => BlockData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8"))).collect()),
            };
            blocks.push(Block { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { config, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: "seed = 3\n".into(),
            blocks: vec![
                Block {
                    name: "a/w".into(),
                    dims: vec![2, 2],
                    data: BlockData::F32(vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]),
                },
                Block::from_f64s("state/x".into(), vec![0.1, 1e300]),
                Block::from_u64("state/step".into(), u64::MAX),
            ],
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn shape_mismatch_names_the_block() {
        let c = sample();
        let err = c.block("a/w").unwrap().to_tensor(DType::F32, &[4]).unwrap_err();
        assert!(err.to_string().contains("a/w"), "{err}");
        let err = c.block("nope").unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"XXXX").is_err());
    }
}
