//! Binary model checkpoints.
//!
//! Layout: the magic line `ICLKIT-CKPT-v1\n`, a little-endian `u64` giving
//! the length of a JSON header, the header itself, then every tensor's
//! entries as little-endian `f64` in header order.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BackboneSpec, ExpandingModel, Phase, Trainable};

pub const MAGIC: &[u8] = b"ICLKIT-CKPT-v1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// No entry of the tensor was trainable in the phase the model was saved in.
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub feature_dim: usize,
    /// Step at which each classifier row was added.
    pub row_steps: Vec<usize>,
    /// Step at which each branch (and its column block) was added.
    pub branch_steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub step: usize,
    pub phase: Phase,
    pub spec: BackboneSpec,
    pub class_groups: Vec<Vec<usize>>,
    pub block_map: BlockLayout,
    pub eta: f64,
    pub tensors: Vec<TensorEntry>,
}

pub fn header_of(model: &ExpandingModel) -> CheckpointHeader {
    let map = model.block_map();
    CheckpointHeader {
        step: model.step(),
        phase: model.phase(),
        spec: model.spec().clone(),
        class_groups: model.class_groups().to_vec(),
        block_map: BlockLayout {
            feature_dim: map.feature_dim,
            row_steps: map.row_steps,
            branch_steps: map.branch_steps,
        },
        eta: model.classifier().temperature(),
        tensors: model
            .tensor_ids()
            .into_iter()
            .map(|id| TensorEntry {
                name: id.to_string(),
                shape: model.tensor_shape(id),
                frozen: model.trainable(id) == Trainable::Nothing,
            })
            .collect(),
    }
}

pub fn to_bytes(model: &ExpandingModel) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&header_of(model))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + 8 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for id in model.tensor_ids() {
        for v in model.tensor(id) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<ExpandingModel> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| bad("missing checkpoint magic"))?;
    if rest.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let (len, rest) = rest.split_at(8);
    let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
    if rest.len() < len {
        return Err(bad("truncated header"));
    }
    let (header, payload) = rest.split_at(len);
    let header: CheckpointHeader = serde_json::from_slice(header)?;

    // Rebuild the layout with throwaway values, then overwrite every tensor.
    let groups = &header.class_groups;
    let first = groups.first().ok_or_else(|| bad("no class groups"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = ExpandingModel::new(header.spec.clone(), first, &mut rng)?;
    for (i, group) in groups.iter().enumerate().skip(1) {
        if header.block_map.branch_steps.contains(&(i + 1)) {
            model.expand(group, &mut rng)?;
        } else {
            model.extend_classes(group, &mut rng)?;
        }
    }
    let ids = model.tensor_ids();
    if ids.len() != header.tensors.len() {
        return Err(bad(format!(
            "header lists {} tensors, layout has {}",
            header.tensors.len(),
            ids.len()
        )));
    }
    let mut offset = 0;
    for (id, entry) in ids.into_iter().zip(&header.tensors) {
        if entry.name != id.to_string() || entry.shape != model.tensor_shape(id) {
            return Err(bad(format!(
                "tensor {} does not match the stored layout",
                entry.name
            )));
        }
        let dst = model.tensor_mut(id);
        let need = dst.len() * 8;
        let chunk = payload
            .get(offset..offset + need)
            .ok_or_else(|| bad(format!("payload ends inside {}", entry.name)))?;
        for (d, b) in dst.iter_mut().zip(chunk.chunks_exact(8)) {
            *d = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
        offset += need;
    }
    if offset != payload.len() {
        return Err(bad(format!(
            "{} trailing payload bytes",
            payload.len() - offset
        )));
    }
    model.set_phase(header.phase)?;
    Ok(model)
}

pub fn save(model: &ExpandingModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ExpandingModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
