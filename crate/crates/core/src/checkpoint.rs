//! Versioned binary container: a JSON manifest followed by named numeric
//! blocks.
//!
//! Layout (little endian): magic, `u32` version, `u64` manifest length,
//! manifest bytes, `u32` block count, then per block: `u32` name length,
//! name, `u8` dtype (0 = f64, 1 = u32), `u32` rank, `u64` dims, data.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CMORPHCK";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum BlockData {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub shape: Vec<usize>,
    pub data: BlockData,
}

impl Block {
    pub fn f64(shape: &[usize], data: Vec<f64>) -> Self {
        Self {
            shape: shape.to_vec(),
            data: BlockData::F64(data),
        }
    }

    pub fn u32(shape: &[usize], data: Vec<u32>) -> Self {
        Self {
            shape: shape.to_vec(),
            data: BlockData::U32(data),
        }
    }

    fn len(&self) -> usize {
        match &self.data {
            BlockData::F64(v) => v.len(),
            BlockData::U32(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub manifest: serde_json::Value,
    pub blocks: BTreeMap<String, Block>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length overflow"))
    }
}

impl Container {
    pub fn new(manifest: serde_json::Value) -> Self {
        Self {
            manifest,
            blocks: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, block: Block) {
        self.blocks.insert(name.into(), block);
    }

    pub fn f64_block(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let b = self
            .blocks
            .get(name)
            .ok_or_else(|| bad(format!("missing block '{name}'")))?;
        if b.shape != shape {
            return Err(bad(format!(
                "block '{name}' has shape {:?}, expected {shape:?}",
                b.shape
            )));
        }
        match &b.data {
            BlockData::F64(v) => Ok(v),
            BlockData::U32(_) => Err(bad(format!("block '{name}' is not f64"))),
        }
    }

    pub fn u32_block(&self, name: &str) -> Result<(&[usize], &[u32])> {
        let b = self
            .blocks
            .get(name)
            .ok_or_else(|| bad(format!("missing block '{name}'")))?;
        match &b.data {
            BlockData::U32(v) => Ok((&b.shape, v)),
            BlockData::F64(_) => Err(bad(format!("block '{name}' is not u32"))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        let manifest = self.manifest.to_string().into_bytes();
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, b) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match b.data {
                BlockData::F64(_) => 0,
                BlockData::U32(_) => 1,
            });
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &b.data {
                BlockData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlockData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(bad(format!(
                "checkpoint container version {version} is not supported (expected {CONTAINER_VERSION})"
            )));
        }
        let mlen = r.len()?;
        let manifest = serde_json::from_slice(r.take(mlen)?).map_err(|e| bad(format!("manifest: {e}")))?;
        let count = r.u32()?;
        let mut blocks = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| bad("block name is not UTF-8"))?;
            let dtype = r.u8()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.len()?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("block size overflow"))?;
            let data = match dtype {
                0 => BlockData::F64(
                    r.take(n.checked_mul(8).ok_or_else(|| bad("block size overflow"))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                1 => BlockData::U32(
                    r.take(n.checked_mul(4).ok_or_else(|| bad("block size overflow"))?)?
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                other => return Err(bad(format!("unknown block dtype {other}"))),
            };
            let block = Block { shape, data };
            debug_assert_eq!(block.len(), n);
            blocks.insert(name, block);
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after the last block"));
        }
        Ok(Self { manifest, blocks })
    }

    /// Writes via a temporary file and rename so readers never observe a
    /// partial checkpoint.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
