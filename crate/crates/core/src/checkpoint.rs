//! Binary checkpoints: named f32 tensors with a CRC32 trailer.
//!
//! Layout (all integers and floats little-endian):
//!   magic "SGCK" | version u32 | entry count u32
//!   per entry: name len u32 | name UTF-8 | rank u32 | dims u32[rank] | payload f32[]
//!   crc32 of every preceding byte
//!
//! Writes are atomic (temp file + rename); loads verify magic, version,
//! and CRC before any entry is parsed, so a corrupt file never yields a
//! partial result.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGCK";
pub const VERSION: u32 = 1;

/// Serialize named stores; entry names are `<store>/<param>`.
pub fn save_checkpoint(stores: &[(String, &ParamStore<f32>)], path: &Path) -> Result<()> {
    let mut entries: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (prefix, store) in stores {
        for (name, tensor) in store.iter() {
            entries.push((format!("{prefix}/{name}"), tensor));
        }
    }
    save_entries(&entries, path)
}

pub fn save_entries(entries: &[(String, &Tensor<f32>)], path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        bytes.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name_bytes);
        bytes.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("checkpoint")
    ));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load all entries; validates magic, version, and CRC up front.
pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::Checkpoint(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version} (want {VERSION})",
            path.display()
        )));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let crc = crc32fast::hash(body);
    if crc != stored_crc {
        return Err(Error::Checkpoint(format!(
            "{}: CRC mismatch (stored {stored_crc:#010x}, computed {crc:#010x})",
            path.display()
        )));
    }

    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut at = 12usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let slice = body.get(at..at + n).ok_or_else(|| {
            Error::Checkpoint(format!("{}: truncated entry data", path.display()))
        })?;
        at += n;
        Ok(slice)
    };
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: entry name not UTF-8", path.display())))?;
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = take(numel * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(dims, data)
            .map_err(|e| Error::Checkpoint(format!("{}: entry `{name}`: {e}", path.display())))?;
        out.insert(name, tensor);
    }
    if at != body.len() {
        return Err(Error::Checkpoint(format!(
            "{}: trailing bytes after entries",
            path.display()
        )));
    }
    Ok(out)
}

/// Overwrite the tensors of `store` from `<prefix>/<name>` entries,
/// validating shapes; errors when an expected entry is missing.
pub fn restore_store(
    entries: &BTreeMap<String, Tensor<f32>>,
    prefix: &str,
    store: &mut ParamStore<f32>,
) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let key = format!("{prefix}/{name}");
        let tensor = entries
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{key}`")))?;
        if tensor.shape() != store.get(&name)?.shape() {
            return Err(Error::Checkpoint(format!(
                "entry `{key}` has shape {:?}, expected {:?}",
                tensor.shape(),
                store.get(&name)?.shape()
            )));
        }
        store.set(&name, tensor.clone());
    }
    Ok(())
}
