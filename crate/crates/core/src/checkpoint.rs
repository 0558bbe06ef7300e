//! Binary parameter checkpoints.
//!
//! Layout: magic `COALA\x01`, then one record per tensor
//! `[name_len u32 LE][name UTF-8][rank u32][extents u32 * rank][f32 LE payload]`,
//! a record with `name_len == 0` closing the list, and a UTF-8 JSON trailer
//! running to end of file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoalaError, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 6] = b"COALA\x01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub trailer: serde_json::Value,
}

impl Checkpoint {
    /// Snapshot of every parameter and running statistic in `store`.
    pub fn from_store(store: &ParamStore<f32>, trailer: serde_json::Value) -> Self {
        Checkpoint {
            tensors: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            trailer,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies the stored values into `store`, which must hold exactly the same
    /// tensors in the same order with the same shapes.
    pub fn apply_to(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec()))
            .collect();
        for (i, (name, shape)) in names.iter().enumerate() {
            let Some((cname, ct)) = self.tensors.get(i) else {
                return Err(CoalaError::Topology(format!(
                    "checkpoint is missing tensor {name} {shape:?}"
                )));
            };
            if cname != name || ct.shape() != shape.as_slice() {
                return Err(CoalaError::Topology(format!(
                    "first differing tensor at position {i}: model has {name} {shape:?}, checkpoint has {cname} {:?}",
                    ct.shape()
                )));
            }
        }
        if let Some((extra, t)) = self.tensors.get(names.len()) {
            return Err(CoalaError::Topology(format!(
                "checkpoint has extra tensor {extra} {:?}",
                t.shape()
            )));
        }
        for ((_, p), (_, t)) in store.iter_mut().zip(&self.tensors) {
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for (name, t) in &self.tensors {
            if name.is_empty() {
                return Err(CoalaError::Format("tensor names must be non-empty".into()));
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&0u32.to_le_bytes());
        serde_json::to_writer(&mut out, &self.trailer)
            .map_err(|e| CoalaError::Format(format!("checkpoint trailer: {e}")))?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)
            .map_err(|_| CoalaError::Format("checkpoint shorter than its magic".into()))?;
        if &magic != MAGIC {
            return Err(CoalaError::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut tensors = Vec::new();
        loop {
            let len = read_u32(&mut r, "name length")? as usize;
            if len == 0 {
                break;
            }
            let name = String::from_utf8(take(&mut r, len, "name")?.to_vec())
                .map_err(|_| CoalaError::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r, "rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r, "extent")? as usize);
            }
            let count: usize = shape.iter().product();
            let payload = take(&mut r, count * 4, &name)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        let trailer = serde_json::from_slice(r)
            .map_err(|e| CoalaError::Format(format!("checkpoint trailer: {e}")))?;
        Ok(Checkpoint { tensors, trailer })
    }

    /// Writes via a temporary sibling file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| CoalaError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| CoalaError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CoalaError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CoalaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CoalaError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(CoalaError::Format(format!("checkpoint truncated while reading {what}")));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8], what: &str) -> Result<u32> {
    let b = take(r, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}
