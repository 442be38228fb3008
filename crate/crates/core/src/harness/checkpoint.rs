//! Checkpoint archive: one tar file holding
//!
//! ```text
//! config.json            the run configuration
//! manifest.json          [{name, shape, sha256}] in parameter order
//! tensors/<name>.bin     little-endian f64 values
//! ```
//!
//! Every failure to read or match a checkpoint is reported as
//! [`Error::Checkpoint`].

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sharecmp_nn::{ParamStore, Tensor};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

/// Decoded archive contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub manifest: Vec<ManifestEntry>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn append(builder: &mut tar::Builder<std::fs::File>, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder.append_data(&mut header, name, bytes)
}

pub fn save_checkpoint(path: &Path, config: &impl Serialize, store: &ParamStore) -> Result<()> {
    if !store.is_materialized() {
        return Err(Error::Checkpoint("cannot save a shape-only parameter store".into()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tar.partial");
    let write = || -> std::io::Result<()> {
        let mut builder = tar::Builder::new(std::fs::File::create(&tmp)?);
        let config = serde_json::to_vec_pretty(config)?;
        append(&mut builder, "config.json", &config)?;
        let mut manifest = Vec::with_capacity(store.len());
        let mut blobs = Vec::with_capacity(store.len());
        for (id, p) in store.iter() {
            let bytes = to_bytes(store.value(id));
            let sha256 = hex::encode(Sha256::digest(&bytes));
            manifest.push(ManifestEntry { name: p.name().to_string(), shape: p.shape().to_vec(), sha256 });
            blobs.push((format!("tensors/{}.bin", p.name()), bytes));
        }
        append(&mut builder, "manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
        for (name, bytes) in blobs {
            append(&mut builder, &name, &bytes)?;
        }
        builder.into_inner()?.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let file = std::fs::File::open(path).map_err(|e| bad(e.to_string()))?;
    let mut archive = tar::Archive::new(file);
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for entry in archive.entries().map_err(|e| bad(e.to_string()))? {
        let mut entry = entry.map_err(|e| bad(e.to_string()))?;
        let name = entry.path().map_err(|e| bad(e.to_string()))?.to_string_lossy().into_owned();
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(|e| bad(e.to_string()))?;
        files.insert(name, bytes);
    }
    let json = |name: &str| -> Result<serde_json::Value> {
        let bytes = files.get(name).ok_or_else(|| bad(format!("missing {name}")))?;
        serde_json::from_slice(bytes).map_err(|e| bad(format!("{name}: {e}")))
    };
    let config = json("config.json")?;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_value(json("manifest.json")?).map_err(|e| bad(format!("manifest.json: {e}")))?;
    let mut tensors = BTreeMap::new();
    for m in &manifest {
        let bytes =
            files.get(&format!("tensors/{}.bin", m.name)).ok_or_else(|| bad(format!("missing tensor {}", m.name)))?;
        if hex::encode(Sha256::digest(bytes)) != m.sha256 {
            return Err(bad(format!("checksum mismatch for {}", m.name)));
        }
        let numel: usize = m.shape.iter().product();
        if bytes.len() != numel * 8 {
            return Err(bad(format!(
                "{} holds {} bytes, shape {:?} needs {}",
                m.name,
                bytes.len(),
                m.shape,
                numel * 8
            )));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.insert(m.name.clone(), Tensor::new(m.shape.clone(), data));
    }
    Ok(Checkpoint { config, manifest, tensors })
}

impl Checkpoint {
    /// Copies every tensor into `store`, which must hold exactly the same
    /// names and shapes.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let mut missing = Vec::new();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            match self.tensors.get(&name) {
                Some(t) if t.shape() == store.get(id).shape() => store.set(id, t.clone()),
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                        t.shape(),
                        store.get(id).shape()
                    )))
                }
                None => missing.push(name),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint lacks {} parameters, e.g. {}",
                missing.len(),
                missing[0]
            )));
        }
        if let Some(extra) = self.tensors.keys().find(|n| store.id(n).is_none()) {
            return Err(Error::Checkpoint(format!("checkpoint parameter {extra} does not exist in the model")));
        }
        Ok(())
    }
}
