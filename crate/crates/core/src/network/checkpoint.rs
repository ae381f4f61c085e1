//! Binary checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "WSSHMCKP"
//! version      u32
//! header_len   u32, then header_len bytes of JSON (CheckpointMeta)
//! count        u32
//! per entry:   u16 name_len, name (UTF-8), u8 kind (0 weight, 1 buffer),
//!              u8 ndim, ndim x u32 dims, u64 payload_len, payload (f32 LE)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"WSSHMCKP";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub network: NetworkConfig,
    /// Stage that produced the checkpoint, e.g. `teacher_finetune`.
    pub stage: String,
    /// Optimizer steps completed within that stage.
    pub step: usize,
}

pub fn save_checkpoint<T: Real>(path: &Path, net: &Network<T>, stage: &str, step: usize) -> Result<()> {
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        network: net.config().clone(),
        stage: stage.to_string(),
        step,
    };
    let header = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let entries = net.params().entries();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(match e.kind {
            ParamKind::Weight => 0,
            ParamKind::Buffer => 1,
        });
        buf.push(e.shape.len() as u8);
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&((e.values.len() * 4) as u64).to_le_bytes());
        for v in &e.values {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated archive".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads an archive and rebuilds the network it describes.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Network<T>, CheckpointMeta)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint archive", path.display())));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let header_len = c.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(header_len)?)?;
    let mut net = Network::<T>::build(&meta.network, 0)?;
    let count = c.u32()? as usize;
    if count != net.params().len() {
        return Err(Error::Checkpoint(format!(
            "archive holds {count} tensors, configuration expects {}",
            net.params().len()
        )));
    }
    for entry in net.params_mut().entries_mut() {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != entry.name {
            return Err(Error::Checkpoint(format!("expected tensor {}, found {name}", entry.name)));
        }
        let kind = match c.u8()? {
            0 => ParamKind::Weight,
            1 => ParamKind::Buffer,
            k => return Err(Error::Checkpoint(format!("unknown tensor kind {k}"))),
        };
        if kind != entry.kind {
            return Err(Error::Checkpoint(format!("tensor {name} has the wrong kind")));
        }
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32()? as usize);
        }
        if shape != entry.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {shape:?} does not match {:?}",
                entry.shape
            )));
        }
        let payload_len = c.u64()? as usize;
        if payload_len != entry.values.len() * 4 {
            return Err(Error::Checkpoint(format!("tensor {name}: bad payload length")));
        }
        let payload = c.take(payload_len)?;
        for (v, chunk) in entry.values.iter_mut().zip(payload.chunks_exact(4)) {
            *v = T::lit(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((net, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let cfg = NetworkConfig::r18_half().with_base_width(4);
        let mut net = Network::<f32>::build(&cfg, 11).unwrap();
        net.params_mut().values_mut(1)[0] = f32::from_bits(0x3f80_0001);
        save_checkpoint(&path, &net, "teacher_finetune", 42).unwrap();
        let (back, meta) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(meta.step, 42);
        assert_eq!(meta.stage, "teacher_finetune");
        assert_eq!(meta.network, cfg);
        for (a, b) in net.params().entries().iter().zip(back.params().entries()) {
            assert_eq!(a.name, b.name);
            let bits_a: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());

        let net = Network::<f32>::build(&NetworkConfig::r18_half().with_base_width(4), 1).unwrap();
        save_checkpoint(&path, &net, "seg_pretrain", 0).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Checkpoint(_))));
    }
}
