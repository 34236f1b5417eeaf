//! Per-agent checkpoint files.
//!
//! Layout of `agent_<id>.ckpt`:
//!
//! ```text
//! b"OSMOCKPT" | u32 LE header length | JSON header | f64 LE payload
//! ```
//!
//! The payload holds every parameter block, then Adam's first moments, then
//! its second moments, each in the block order listed in the header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AgentModel, EncoderParams};
use crate::numerics::{AdamState, Parameters};
use crate::AgentId;

const MAGIC: &[u8; 8] = b"OSMOCKPT";
const FORMAT: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: u32,
    agent_id: AgentId,
    n_features: usize,
    adam_t: u64,
    sections: Vec<String>,
    blocks: Vec<BlockHeader>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub agent_id: AgentId,
    pub n_features: usize,
}

pub fn checkpoint_file(agent: AgentId) -> String {
    format!("agent_{agent}.ckpt")
}

pub fn encode_checkpoint(model: &AgentModel) -> Vec<u8> {
    let blocks = model.params.blocks();
    let header = Header {
        format: FORMAT,
        agent_id: model.agent_id,
        n_features: model.n_features,
        adam_t: model.optimizer.t,
        sections: vec!["params".into(), "adam_m".into(), "adam_v".into()],
        blocks: blocks
            .iter()
            .map(|(n, b)| BlockHeader {
                name: (*n).to_string(),
                len: b.len(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(12 + header.len() + 24 * model.params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let sections = [
        blocks.iter().map(|(_, b)| *b).collect::<Vec<_>>(),
        model.optimizer.m.iter().map(Vec::as_slice).collect(),
        model.optimizer.v.iter().map(Vec::as_slice).collect(),
    ];
    for section in sections {
        for block in section {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<AgentModel> {
    let bad = |m: &str| Error::schema(path, m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| bad(&format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(&format!("unsupported format {}", header.format)));
    }

    let mut params = EncoderParams::zeros(header.n_features);
    let expected: Vec<(&str, usize)> = params.blocks().iter().map(|(n, b)| (*n, b.len())).collect();
    let listed: Vec<(&str, usize)> = header
        .blocks
        .iter()
        .map(|b| (b.name.as_str(), b.len))
        .collect();
    if expected != listed {
        return Err(bad("parameter blocks do not match the encoder layout"));
    }
    let total: usize = expected.iter().map(|(_, n)| n).sum();
    let payload = &bytes[12 + hlen..];
    if payload.len() != 3 * total * 8 {
        return Err(bad(&format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            3 * total * 8
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };

    let flat = take(total);
    params.assign_flat(&flat);
    let m = expected.iter().map(|(_, n)| take(*n)).collect();
    let v = expected.iter().map(|(_, n)| take(*n)).collect();
    let mut model = AgentModel::from_params(header.agent_id, params);
    model.optimizer = AdamState {
        m,
        v,
        t: header.adam_t,
    };
    Ok(model)
}

/// Writes one file per agent plus a manifest listing the agent set.
pub fn checkpoint(models: &[AgentModel], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for m in models {
        let path = dir.join(checkpoint_file(m.agent_id));
        std::fs::write(&path, encode_checkpoint(m)).map_err(|e| Error::io(&path, e))?;
    }
    let manifest: Vec<ManifestEntry> = models
        .iter()
        .map(|m| ManifestEntry {
            agent_id: m.agent_id,
            n_features: m.n_features,
        })
        .collect();
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads every agent listed in the manifest.
pub fn restore(dir: &Path) -> Result<Vec<AgentModel>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::schema(&path, format!("bad manifest: {e}")))?;
    manifest
        .iter()
        .map(|entry| {
            let path = dir.join(checkpoint_file(entry.agent_id));
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let model = decode_checkpoint(&bytes, &path)?;
            if model.agent_id != entry.agent_id || model.n_features != entry.n_features {
                return Err(Error::schema(&path, "checkpoint disagrees with manifest"));
            }
            Ok(model)
        })
        .collect()
}

/// [`restore`], then insist the agents and feature widths match `expected`.
pub fn restore_expecting(dir: &Path, expected: &[ManifestEntry]) -> Result<Vec<AgentModel>> {
    let models = restore(dir)?;
    let got: Vec<ManifestEntry> = models
        .iter()
        .map(|m| ManifestEntry {
            agent_id: m.agent_id,
            n_features: m.n_features,
        })
        .collect();
    if got != expected {
        let show = |v: &[ManifestEntry]| {
            v.iter()
                .map(|e| format!("{}(k={})", e.agent_id, e.n_features))
                .collect::<Vec<_>>()
                .join(",")
        };
        return Err(Error::schema(
            dir,
            format!(
                "checkpoint agents [{}] do not match expected [{}]",
                show(&got),
                show(expected)
            ),
        ));
    }
    Ok(models)
}
