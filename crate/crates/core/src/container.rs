//! Versioned parameter container shared by audited-model and detector checkpoints:
//! 8-byte magic, u32 version, length-prefixed UTF-8 JSON config, u32 parameter
//! count, then per parameter its name, rank, dims and f32 LE values.

use std::fs;
use std::path::Path;

use mint_tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::codec::{Reader, Writer};
use crate::error::{Error, IoContext, Result};

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn encode(&self, magic: &[u8; 8]) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(magic);
        w.u32(CONTAINER_VERSION);
        w.str(&self.config);
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.str(name);
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.f32s(t.data());
        }
        w.buf
    }

    pub fn decode(what: &str, magic: &[u8; 8], bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(what, bytes);
        r.magic(magic)?;
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let config = r.str()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(r.error(format!("parameter `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = match len {
                Some(l) if l > 0 && l <= r.remaining() / 4 => l,
                _ => return Err(r.error(format!("parameter `{name}` shape {shape:?} exceeds file"))),
            };
            let data = r.f32s(len)?;
            tensors.push((name, Tensor::new(&shape, data).map_err(|e| r.error(e.to_string()))?));
        }
        r.finish()?;
        Ok(Container { config, tensors })
    }

    pub fn write(&self, magic: &[u8; 8], path: &Path) -> Result<[u8; 32]> {
        let bytes = self.encode(magic);
        fs::write(path, &bytes).at(path)?;
        Ok(Sha256::digest(&bytes).into())
    }

    /// Read a container and return it with the SHA-256 of the file bytes.
    pub fn read(what: &str, magic: &[u8; 8], path: &Path) -> Result<(Self, [u8; 32])> {
        let bytes = fs::read(path).at(path)?;
        let c = Self::decode(what, magic, &bytes)?;
        Ok((c, Sha256::digest(&bytes).into()))
    }

    /// Take the tensor called `name`, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::format("checkpoint", "parameters", format!("missing parameter `{name}`")))?;
        let (_, t) = self.tensors.remove(pos);
        if t.shape() != shape {
            return Err(Error::format(
                "checkpoint",
                "parameters",
                format!("parameter `{name}` has shape {:?}, expected {shape:?}", t.shape()),
            ));
        }
        Ok(t)
    }
}

pub fn file_hash(path: &Path) -> Result<[u8; 32]> {
    let bytes = fs::read(path).at(path)?;
    Ok(Sha256::digest(&bytes).into())
}
