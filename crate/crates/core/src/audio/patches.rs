//! Patch store: magic `COALAPAT`, `u32` record count, then per record
//! `[id_len u32][clip id UTF-8][frame offset u32][96*96 f32]`, all little-endian.

use std::fs;
use std::path::Path;

use super::spectral::SpectrogramPatch;
use crate::error::{CoalaError, Result};

pub const PATCH_MAGIC: &[u8; 8] = b"COALAPAT";

pub fn encode_patches(patches: &[SpectrogramPatch]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + patches.len() * (SpectrogramPatch::LEN * 4 + 64));
    out.extend_from_slice(PATCH_MAGIC);
    out.extend_from_slice(&(patches.len() as u32).to_le_bytes());
    for p in patches {
        out.extend_from_slice(&(p.clip_id.len() as u32).to_le_bytes());
        out.extend_from_slice(p.clip_id.as_bytes());
        out.extend_from_slice(&(p.frame_offset as u32).to_le_bytes());
        for &v in &p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_patches(bytes: &[u8]) -> Result<Vec<SpectrogramPatch>> {
    let mut pos = 0;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if bytes.len() < pos + n {
            return Err(CoalaError::Format(format!("patch store truncated in {what}")));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(8, "magic")? != PATCH_MAGIC {
        return Err(CoalaError::Format("not a patch store (bad magic)".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let count = u32_at(take(4, "count")?) as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let len = u32_at(take(4, "clip id length")?) as usize;
        let id = String::from_utf8(take(len, "clip id")?.to_vec())
            .map_err(|_| CoalaError::Format(format!("record {i}: clip id is not UTF-8")))?;
        let offset = u32_at(take(4, "frame offset")?) as usize;
        let values = take(SpectrogramPatch::LEN * 4, "patch values")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(
            SpectrogramPatch::new(id, offset, values)
                .map_err(|e| CoalaError::Format(format!("record {i}: {e}")))?,
        );
    }
    if pos != bytes.len() {
        return Err(CoalaError::Format(format!(
            "{} trailing bytes after {count} patches",
            bytes.len() - pos
        )));
    }
    Ok(out)
}

pub fn write_patches(path: &Path, patches: &[SpectrogramPatch]) -> Result<()> {
    fs::write(path, encode_patches(patches)).map_err(|e| CoalaError::io(path, e))
}

pub fn read_patches(path: &Path) -> Result<Vec<SpectrogramPatch>> {
    let bytes = fs::read(path).map_err(|e| CoalaError::io(path, e))?;
    decode_patches(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let a = SpectrogramPatch::new("clips/a.wav", 24, vec![0.25; SpectrogramPatch::LEN]).unwrap();
        let b = SpectrogramPatch::new("ü", 0, (0..SpectrogramPatch::LEN).map(|i| (i % 2) as f32).collect())
            .unwrap();
        let bytes = encode_patches(&[a.clone(), b.clone()]);
        assert_eq!(&bytes[..8], PATCH_MAGIC);
        assert_eq!(decode_patches(&bytes).unwrap(), vec![a, b]);
        assert!(decode_patches(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_patches(b"COALAPAX\0\0\0\0").is_err());
    }
}
