//! Flat binary container of named f64 arrays with a JSON manifest.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "PARARR01"
//! count    u64
//! repeated count times:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   values   f64 LE, product(dims) of them
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{ParError, Result};

const MAGIC: &[u8; 8] = b"PARARR01";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the first value in the binary file.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayManifest {
    pub format: String,
    pub sha256: String,
    pub arrays: Vec<ManifestEntry>,
}

fn encode(arrays: &[(&str, &Tensor)]) -> (Vec<u8>, Vec<ManifestEntry>) {
    let mut buf = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for (name, t) in arrays {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: buf.len() as u64,
        });
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    (buf, entries)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let count = c.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| e.to_string())?
            .to_string();
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or("array too large")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data).map_err(|e| e.to_string())?));
    }
    if c.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(out)
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save_arrays(dir: &Path, stem: &str, arrays: &[(&str, &Tensor)]) -> Result<()> {
    let (bytes, entries) = encode(arrays);
    let manifest = ArrayManifest {
        format: "par-arrays-v1".into(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        arrays: entries,
    };
    let bin = dir.join(format!("{stem}.bin"));
    std::fs::write(&bin, &bytes).map_err(|e| ParError::io(&bin, e))?;
    let json = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    std::fs::write(&json, text).map_err(|e| ParError::io(&json, e))
}

/// Reads arrays written by [`save_arrays`], verifying the manifest.
pub fn load_arrays(dir: &Path, stem: &str) -> Result<Vec<(String, Tensor)>> {
    let bin = dir.join(format!("{stem}.bin"));
    let json = dir.join(format!("{stem}.json"));
    let bad = |message: String| ParError::Checkpoint {
        path: bin.clone(),
        message,
    };
    let bytes = std::fs::read(&bin).map_err(|e| ParError::io(&bin, e))?;
    let text = std::fs::read_to_string(&json).map_err(|e| ParError::io(&json, e))?;
    let manifest: ArrayManifest =
        serde_json::from_str(&text).map_err(|e| bad(format!("manifest: {e}")))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != manifest.sha256 {
        return Err(bad(format!("sha256 {digest} does not match manifest {}", manifest.sha256)));
    }
    let arrays = decode(&bytes).map_err(bad)?;
    let (_, entries) = encode(
        &arrays
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect::<Vec<_>>(),
    );
    if entries != manifest.arrays {
        return Err(bad("manifest does not describe the binary contents".into()));
    }
    Ok(arrays)
}
