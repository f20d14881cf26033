//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "DSDN"  u32 version=1  u64 tensor_count
//! per tensor: u16 name_len, name (UTF-8), u8 dtype (0 = f32), u8 rank,
//!             u64 dims[rank], f32 payload
//! meta:       u64 step, u32 config_len, config text (UTF-8)
//! optimizer:  (optional) u64 adam_step, u64 array_count,
//!             per array: u64 len, f32 m[len], f32 v[len]
//! u64 offset of the optimizer block from the start of the file, 0 if absent
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{OptimizerState, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DSDN";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Canonical [`TrainConfig`](super::TrainConfig) text.
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState<f32>>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, config: String, step: u64, optimizer: Option<OptimizerState<f32>>) -> Self {
        Self {
            step,
            config,
            tensors: store.iter().map(|(_, p)| (p.name.clone(), p.tensor.clone())).collect(),
            optimizer,
        }
    }

    /// Copies every tensor into `store`, which must hold the same names and
    /// shapes in the same order. Nothing is written unless all of them match.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let theirs: Vec<(String, [usize; 4])> = store.iter().map(|(_, p)| (p.name.clone(), p.tensor.shape())).collect();
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            let Some((want, shape)) = theirs.get(i) else {
                return Err(Error::CheckpointMismatch {
                    name: name.clone(),
                    detail: "not present in the network".into(),
                });
            };
            if want != name {
                return Err(Error::CheckpointMismatch {
                    name: name.clone(),
                    detail: format!("network expects `{want}` at position {i}"),
                });
            }
            if *shape != t.shape() {
                return Err(Error::CheckpointMismatch {
                    name: name.clone(),
                    detail: format!("checkpoint shape {:?}, network shape {shape:?}", t.shape()),
                });
            }
        }
        if let Some((missing, _)) = theirs.get(self.tensors.len()) {
            return Err(Error::CheckpointMismatch {
                name: missing.clone(),
                detail: "missing from the checkpoint".into(),
            });
        }
        for (i, (_, t)) in self.tensors.iter().enumerate() {
            let id = store.iter().nth(i).map(|(id, _)| id).expect("checked above");
            *store.tensor_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(DTYPE_F32);
            let dims = logical_dims(t.shape());
            b.push(dims.len() as u8);
            for d in &dims {
                b.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        let mut opt_offset = 0u64;
        if let Some(o) = &self.optimizer {
            opt_offset = b.len() as u64;
            b.extend_from_slice(&o.step.to_le_bytes());
            b.extend_from_slice(&(o.m.len() as u64).to_le_bytes());
            for (m, v) in o.m.iter().zip(&o.v) {
                b.extend_from_slice(&(m.len() as u64).to_le_bytes());
                for x in m.iter().chain(v) {
                    b.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        b.extend_from_slice(&opt_offset.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u64()?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt(&format!("tensor {i}: name is not UTF-8")))?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(corrupt(&format!("tensor `{name}`: unknown dtype tag {dtype}")));
            }
            let rank = r.u8()? as usize;
            if rank > 4 {
                return Err(corrupt(&format!("tensor `{name}`: rank {rank} exceeds 4")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(usize::try_from(r.u64()?).map_err(|_| corrupt("dimension overflow"))?);
            }
            let n: usize = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt("element count overflow"))?;
            let data = r.f32s(n)?;
            let mut shape = [1usize; 4];
            shape[4 - rank..].copy_from_slice(&dims);
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let step = r.u64()?;
        let clen = r.u32()? as usize;
        let config = String::from_utf8(r.take(clen)?.to_vec()).map_err(|_| corrupt("config is not UTF-8"))?;
        let body_end = r.pos;
        if bytes.len() < body_end + 8 {
            return Err(corrupt("missing optimizer offset"));
        }
        let trailer = bytes.len() - 8;
        let opt_offset = u64::from_le_bytes(bytes[trailer..].try_into().expect("8 bytes"));
        let optimizer = if opt_offset == 0 {
            if trailer != body_end {
                return Err(corrupt("unexpected bytes before trailer"));
            }
            None
        } else {
            if opt_offset as usize != body_end {
                return Err(corrupt(&format!("optimizer offset {opt_offset} does not follow the meta block at {body_end}")));
            }
            let mut o = Reader {
                bytes: &bytes[..trailer],
                pos: body_end,
            };
            let adam_step = o.u64()?;
            let arrays = o.u64()?;
            if arrays != count {
                return Err(corrupt(&format!("optimizer holds {arrays} arrays for {count} tensors")));
            }
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for (name, t) in &tensors {
                let len = o.u64()? as usize;
                if len != t.len() {
                    return Err(corrupt(&format!("optimizer moments for `{name}` have length {len}")));
                }
                m.push(o.f32s(len)?);
                v.push(o.f32s(len)?);
            }
            if o.pos != trailer {
                return Err(corrupt("unexpected bytes after optimizer block"));
            }
            Some(OptimizerState { step: adam_step, m, v })
        };
        Ok(Self {
            step,
            config,
            tensors,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write-then-rename so a crash never leaves a half-written file behind.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Dimensions with leading unit axes dropped, keeping at least one.
fn logical_dims(shape: [usize; 4]) -> Vec<usize> {
    let first = shape.iter().position(|&d| d != 1).unwrap_or(3);
    shape[first..].to_vec()
}

fn corrupt(msg: &str) -> Error {
    Error::CorruptCheckpoint(msg.to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(corrupt(&format!("truncated at byte {} (wanted {n} more)", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| corrupt("payload overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
