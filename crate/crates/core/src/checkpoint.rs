//! Checkpoints: every parameter tensor concatenated in store order, plus a
//! JSON sidecar (`<file>.json`) with the network config and, per tensor, its
//! name, byte offset and shape.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::NetConfig;
use crate::error::{DesError, Result};
use crate::network::DesNet;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "DESTNSR1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: NetConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn manifest_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(net: &DesNet) -> (Vec<u8>, CheckpointManifest) {
    let mut bytes = Vec::new();
    let mut tensors = Vec::with_capacity(net.store.len());
    for (name, t) in net.store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            offset: bytes.len() as u64,
            shape: t.shape().to_vec(),
        });
        bytes.extend_from_slice(&t.to_bytes());
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        config: net.config.clone(),
        tensors,
    };
    (bytes, manifest)
}

pub fn save(net: &DesNet, path: &Path) -> Result<()> {
    let (bytes, manifest) = encode(net);
    std::fs::write(path, bytes)?;
    std::fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn decode(bytes: &[u8], manifest: &CheckpointManifest) -> Result<DesNet> {
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(DesError::Checkpoint(format!("unknown format `{}`", manifest.format)));
    }
    let mut net = DesNet::new(manifest.config.clone())?;
    if manifest.tensors.len() != net.store.len() {
        return Err(DesError::Checkpoint(format!(
            "checkpoint holds {} tensors, network has {}",
            manifest.tensors.len(),
            net.store.len()
        )));
    }
    for entry in &manifest.tensors {
        let id = net
            .store
            .find(&entry.name)
            .ok_or_else(|| DesError::Checkpoint(format!("unexpected tensor `{}`", entry.name)))?;
        let offset = usize::try_from(entry.offset)
            .ok()
            .filter(|&o| o <= bytes.len())
            .ok_or_else(|| DesError::Checkpoint(format!("offset of `{}` is past the end", entry.name)))?;
        let t = Tensor::read_from(&mut Cursor::new(&bytes[offset..]))
            .map_err(|e| DesError::Checkpoint(format!("tensor `{}`: {e}", entry.name)))?;
        if t.shape() != entry.shape.as_slice() || t.shape() != net.store.get(id).shape() {
            return Err(DesError::Checkpoint(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                entry.name,
                t.shape(),
                net.store.get(id).shape()
            )));
        }
        *net.store.get_mut(id) = t;
    }
    Ok(net)
}

pub fn load(path: &Path) -> Result<DesNet> {
    let bytes = std::fs::read(path)?;
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath)
        .map_err(|e| DesError::Checkpoint(format!("{}: {e}", mpath.display())))?;
    decode(&bytes, &serde_json::from_str(&text)?)
}
