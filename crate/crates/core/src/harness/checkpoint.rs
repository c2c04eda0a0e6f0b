//! Versioned tensor checkpoints.
//!
//! Layout: 8-byte magic `FTCKPT01`, u32 format version, u64 manifest length,
//! the JSON manifest, then each tensor as little-endian f32 at the offset the
//! manifest records (relative to the start of the payload).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fisher::{self, SparsityMask};
use crate::model::{build_model, ModelConfig, TransformerModel};
use crate::peft::{PeftConfig, PeftModule};
use crate::util::atomic_write;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FTCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

impl TensorEntry {
    fn byte_len(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub peft: Option<PeftConfig>,
    pub tensors: Vec<TensorEntry>,
    /// Mask file, relative to the checkpoint's directory.
    pub mask: Option<PathBuf>,
    /// Fisher score file, relative to the checkpoint's directory.
    pub fisher: Option<PathBuf>,
}

/// State restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TransformerModel,
    pub peft: Option<PeftModule>,
    pub mask: Option<SparsityMask>,
    pub config_hash: String,
    pub fisher_path: Option<PathBuf>,
}

/// Artifacts referenced, not embedded, by a checkpoint.
#[derive(Debug, Clone, Default)]
pub struct ArtifactRefs {
    pub mask: Option<PathBuf>,
    pub fisher: Option<PathBuf>,
}

const THETA: &str = "peft.theta";
const AUX: &str = "peft.aux";

fn relative_to(base: &Path, target: &Path) -> PathBuf {
    target.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| target.to_path_buf())
}

/// Writes model, adapter vectors and artifact references to `path`.
///
/// A mask passed here is written next to the checkpoint unless `refs.mask`
/// already points at a saved copy.
pub fn save_checkpoint(
    path: &Path,
    model: &TransformerModel,
    peft: Option<&PeftModule>,
    mask: Option<&SparsityMask>,
    refs: &ArtifactRefs,
    config_hash: &str,
) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new(""));
    let mask_ref = match (mask, &refs.mask) {
        (_, Some(p)) => Some(p.clone()),
        (Some(m), None) => {
            let p = path.with_extension("mask");
            fisher::io::save_mask(&p, m)?;
            Some(p)
        }
        (None, None) => None,
    };

    let mut tensors: Vec<(String, Vec<usize>, &[f32])> = model
        .named_parameters()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.data()))
        .collect();
    if let Some(p) = peft {
        tensors.push((THETA.into(), vec![p.theta_len()], p.theta()));
        if !p.aux().is_empty() {
            tensors.push((AUX.into(), vec![p.aux().len()], p.aux()));
        }
    }
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, shape, data) in &tensors {
        entries.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset: payload.len() as u64 });
        for v in *data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config_hash: config_hash.to_string(),
        model: model.config.clone(),
        peft: peft.map(|p| p.config().clone()),
        tensors: entries,
        mask: mask_ref.map(|p| relative_to(dir, &p)),
        fisher: refs.fisher.as_ref().map(|p| relative_to(dir, p)),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    atomic_write(path, &out)
}

/// Reads only the manifest of a checkpoint file.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < PREAMBLE {
        return Err(Error::format("checkpoint is shorter than its preamble"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let rest = &bytes[PREAMBLE..];
    if rest.len() < len {
        return Err(Error::format("checkpoint manifest is truncated"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&rest[..len]).map_err(|e| Error::format(format!("corrupt checkpoint manifest: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("manifest version {} mismatch", manifest.format_version)));
    }
    let mut spans: Vec<(u64, u64, &str)> = manifest
        .tensors
        .iter()
        .map(|t| (t.offset, t.offset + t.byte_len(), t.name.as_str()))
        .collect();
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::format(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
        }
    }
    Ok((manifest, &rest[len..]))
}

fn tensor_data(payload: &[u8], entry: &TensorEntry) -> Result<Vec<f32>> {
    let (start, end) = (entry.offset as usize, (entry.offset + entry.byte_len()) as usize);
    if end > payload.len() {
        return Err(Error::format(format!(
            "checkpoint truncated: tensor {} needs bytes {start}..{end} but payload has {}",
            entry.name,
            payload.len()
        )));
    }
    Ok(payload[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let (manifest, payload) = read_manifest(&bytes)?;
    let find = |name: &str| {
        manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::format(format!("checkpoint has no tensor {name}")))
    };

    let mut model = build_model(&manifest.model)?;
    for (name, tensor) in model.named_parameters_mut() {
        let entry = find(&name)?;
        if entry.shape != tensor.shape() {
            return Err(Error::format(format!(
                "tensor {name} has stored shape {:?}, model expects {:?}",
                entry.shape,
                tensor.shape()
            )));
        }
        *tensor = Tensor::new(entry.shape.clone(), tensor_data(payload, entry)?)?;
    }

    let peft = match &manifest.peft {
        Some(cfg) => {
            let theta = tensor_data(payload, find(THETA)?)?;
            let aux = match manifest.tensors.iter().find(|t| t.name == AUX) {
                Some(e) => tensor_data(payload, e)?,
                None => Vec::new(),
            };
            model.freeze();
            Some(PeftModule::from_parts(&manifest.model, cfg, theta, aux)?)
        }
        None => None,
    };

    let dir = path.parent().unwrap_or(Path::new(""));
    let mask = match &manifest.mask {
        Some(rel) => {
            let m = fisher::io::load_mask(&dir.join(rel))?;
            if let Some(p) = &peft {
                if m.len() != p.theta_len() {
                    return Err(Error::format(format!(
                        "referenced mask covers {} coordinates, θ̃ has {}",
                        m.len(),
                        p.theta_len()
                    )));
                }
            }
            Some(m)
        }
        None => None,
    };
    Ok(Checkpoint {
        model,
        peft,
        mask,
        config_hash: manifest.config_hash,
        fisher_path: manifest.fisher.map(|p| dir.join(p)),
    })
}
