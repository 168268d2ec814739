//! Versioned binary checkpoints: a JSON manifest (parameter names, shapes,
//! byte offsets, iteration counter, architecture fingerprint) followed by a
//! little-endian f32 blob. Writes are atomic (temp file + rename).

use super::adam::AdamState;
use crate::config::ArchConfig;
use crate::model::ModelParams;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LFCK";
const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the f32 blob.
    offset: usize,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    iteration: usize,
    adam_step: usize,
    /// Serialized [`ArchConfig`]; a checkpoint only loads into the same
    /// architecture.
    fingerprint: String,
    dtype: String,
    entries: Vec<Entry>,
}

/// Everything needed to resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    pub iteration: usize,
}

pub fn fingerprint(arch: &ArchConfig) -> String {
    serde_json::to_string(arch).expect("arch serializes")
}

/// FNV-1a of the checkpoint file, recorded in run provenance.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(format!("{h:016x}"))
}

pub fn save(path: &Path, ckpt: &Checkpoint, arch: &ArchConfig) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<f32> = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>, data: &[f32]| {
        entries.push(Entry {
            name: name.to_string(),
            shape,
            offset: blob.len(),
            count: data.len(),
        });
        blob.extend_from_slice(data);
    };
    ckpt.params
        .visit(|name, p| push(name, p.shape.clone(), &p.data));
    ckpt.params
        .visit_state(|name, s| push(name, vec![s.len()], s));
    for (name, m) in &ckpt.adam.m {
        push(&format!("adam.m.{name}"), vec![m.len()], m);
    }
    for (name, v) in &ckpt.adam.v {
        push(&format!("adam.v.{name}"), vec![v.len()], v);
    }
    let manifest = Manifest {
        iteration: ckpt.iteration,
        adam_step: ckpt.adam.step,
        fingerprint: fingerprint(arch),
        dtype: "f32le".to_string(),
        entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
        f.write_all(&manifest_bytes)?;
        let mut raw = Vec::with_capacity(blob.len() * 4);
        for v in &blob {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&raw)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint; refuses when the stored architecture fingerprint does
/// not match `arch`.
pub fn load(path: &Path, arch: &ArchConfig) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut head = [0u8; 10];
    f.read_exact(&mut head)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &head[0..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic (not a checkpoint)".into()));
    }
    let version = u16::from_le_bytes(head[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, want {VERSION}"
        )));
    }
    let mlen = u32::from_le_bytes(head[6..10].try_into().unwrap()) as usize;
    let mut mbytes = vec![0u8; mlen];
    f.read_exact(&mut mbytes)
        .map_err(|_| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&mbytes)?;
    if manifest.fingerprint != fingerprint(arch) {
        return Err(Error::Checkpoint(format!(
            "architecture fingerprint mismatch.\n  checkpoint: {}\n  requested:  {}",
            manifest.fingerprint,
            fingerprint(arch)
        )));
    }
    let mut raw = Vec::new();
    f.read_to_end(&mut raw)?;
    let blob: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let lookup = |name: &str| -> Result<Vec<f32>> {
        let e = manifest
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        blob.get(e.offset..e.offset + e.count)
            .map(|s| s.to_vec())
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' out of range")))
    };

    let mut params = ModelParams::<f32>::init(arch, 0);
    let mut err = None;
    params.visit_mut(|name, p| {
        if err.is_some() {
            return;
        }
        match lookup(name) {
            Ok(data) if data.len() == p.data.len() => p.data = data,
            Ok(data) => {
                err = Some(Error::Checkpoint(format!(
                    "tensor '{name}' has {} elements, model wants {}",
                    data.len(),
                    p.data.len()
                )))
            }
            Err(e) => err = Some(e),
        }
    });
    params.visit_state_mut(|name, s| {
        if err.is_some() {
            return;
        }
        match lookup(name) {
            Ok(data) if data.len() == s.len() => *s = data,
            Ok(_) => err = Some(Error::Checkpoint(format!("state '{name}' shape mismatch"))),
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }

    let mut adam = AdamState::new();
    adam.step = manifest.adam_step;
    for e in &manifest.entries {
        if let Some(name) = e.name.strip_prefix("adam.m.") {
            adam.m.insert(name.to_string(), lookup(&e.name)?);
        } else if let Some(name) = e.name.strip_prefix("adam.v.") {
            adam.v.insert(name.to_string(), lookup(&e.name)?);
        }
    }
    Ok(Checkpoint {
        params,
        adam,
        iteration: manifest.iteration,
    })
}
