//! Single-file checkpoint archive: a JSON manifest of tensor names and
//! shapes followed by the raw little-endian f32 payload.
//!
//! ```text
//! [ 8 bytes magic "VXCKPT1\n" ][ u64 LE manifest length ][ manifest JSON ][ payload ]
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"VXCKPT1\n";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, &Tensor<f32>)],
) -> Result<()> {
    let manifest = Manifest {
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())
        .map_err(io)?;
    w.write_all(&manifest_bytes).map_err(io)?;
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(serde_json::Value, BTreeMap<String, Tensor<f32>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::corrupt(path, "bad magic"));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(io)?;
    let mlen = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; mlen];
    r.read_exact(&mut manifest_bytes).map_err(io)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::corrupt(path, format!("manifest: {e}")))?;
    let mut out = BTreeMap::new();
    let mut buf = Vec::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        buf.resize(n * 4, 0);
        r.read_exact(&mut buf)
            .map_err(|_| Error::corrupt(path, format!("payload truncated at {}", entry.name)))?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data));
    }
    Ok((manifest.meta, out))
}

/// Read only the manifest metadata without touching the payload.
pub fn load_meta(path: &Path) -> Result<serde_json::Value> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::corrupt(path, "bad magic"));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(io)?;
    let mlen = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; mlen];
    r.read_exact(&mut manifest_bytes).map_err(io)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::corrupt(path, format!("manifest: {e}")))?;
    Ok(manifest.meta)
}
