//! Single-file model checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, then two length-prefixed
//! sections (`u64` little-endian byte count each): a JSON header naming every
//! tensor with its shape and offset, and the payload of little-endian `f64`
//! values. The header carries a SHA-256 over the config and payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BACKBONE_PREFIX};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel, FLOW_PREFIX};
use crate::io_util::{sha256_hex, write_atomic};
use crate::nn::Parameters;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TTTFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Backbone,
    Flow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub content_hash: String,
}

fn content_hash(config: &serde_json::Value, payload: &[u8]) -> String {
    let mut bytes = serde_json::to_vec(config).expect("json value");
    bytes.extend_from_slice(payload);
    sha256_hex(&bytes)
}

fn encode(kind: CheckpointKind, config: serde_json::Value, tensors: Vec<(String, Tensor)>) -> Vec<u8> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind,
        content_hash: content_hash(&config, &payload),
        config,
        tensors: entries,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + 4 + 16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn take_u64(bytes: &mut &[u8], what: &str) -> Result<usize> {
    let raw = take(bytes, 8, what)?;
    Ok(u64::from_le_bytes(raw.try_into().expect("8 bytes")) as usize)
}

/// Parses and verifies a checkpoint, returning its header and named tensors.
pub fn decode(mut bytes: &[u8]) -> Result<(Header, Vec<(String, Tensor)>)> {
    let b = &mut bytes;
    if take(b, 8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(b, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = take_u64(b, "header length")?;
    let header: Header = serde_json::from_slice(take(b, hlen, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let plen = take_u64(b, "payload length")?;
    let payload = take(b, plen, "payload")?;
    if !b.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    if content_hash(&header.config, payload) != header.content_hash {
        return Err(Error::Checkpoint("content hash mismatch; refusing to load".into()));
    }
    if plen % 8 != 0 {
        return Err(Error::Checkpoint("payload is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let len: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + len)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the payload", e.name)))?;
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data.to_vec())?));
    }
    Ok((header, tensors))
}

/// Overwrites every visited tensor from `stored`, requiring an exact name/shape match.
fn restore(
    stored: Vec<(String, Tensor)>,
    visit: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Tensor)),
) -> Result<()> {
    let mut map: std::collections::BTreeMap<String, Tensor> = stored.into_iter().collect();
    let mut problem: Option<String> = None;
    visit(&mut |name, t| match map.remove(name) {
        Some(s) if s.shape() == t.shape() => *t = s,
        Some(s) => {
            problem.get_or_insert(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                s.shape(),
                t.shape()
            ));
        }
        None => {
            problem.get_or_insert(format!("tensor `{name}` missing"));
        }
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(())
}

fn backbone_tensors(b: &Backbone) -> Vec<(String, Tensor)> {
    let mut out = b.named_parameters(BACKBONE_PREFIX);
    b.visit_bn_stats(&mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

pub fn backbone_to_bytes(b: &Backbone) -> Vec<u8> {
    let config = serde_json::to_value(b.config()).expect("config serializes");
    encode(CheckpointKind::Backbone, config, backbone_tensors(b))
}

pub fn flow_to_bytes(f: &FlowModel) -> Vec<u8> {
    let config = serde_json::to_value(f.config()).expect("config serializes");
    encode(CheckpointKind::Flow, config, f.named_parameters(FLOW_PREFIX))
}

fn expect_kind(h: &Header, kind: CheckpointKind) -> Result<()> {
    if h.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind:?} checkpoint, found {:?}",
            h.kind
        )));
    }
    Ok(())
}

pub fn backbone_from_bytes(bytes: &[u8]) -> Result<Backbone> {
    let (h, tensors) = decode(bytes)?;
    expect_kind(&h, CheckpointKind::Backbone)?;
    let config: BackboneConfig =
        serde_json::from_value(h.config).map_err(|e| Error::Checkpoint(format!("bad backbone config: {e}")))?;
    let mut b = Backbone::new(config, 0)?;
    let (params, stats): (Vec<_>, Vec<_>) = tensors.into_iter().partition(|(n, _)| !n.contains(".running_"));
    restore(params, &mut |f| b.visit_mut(BACKBONE_PREFIX, f))?;
    restore(stats, &mut |f| b.visit_bn_stats_mut(f))?;
    Ok(b)
}

pub fn flow_from_bytes(bytes: &[u8]) -> Result<FlowModel> {
    let (h, tensors) = decode(bytes)?;
    expect_kind(&h, CheckpointKind::Flow)?;
    let config: FlowConfig =
        serde_json::from_value(h.config).map_err(|e| Error::Checkpoint(format!("bad flow config: {e}")))?;
    let mut f = FlowModel::new(config, 0)?;
    restore(tensors, &mut |v| f.visit_mut(FLOW_PREFIX, v))?;
    Ok(f)
}

pub fn save_backbone(b: &Backbone, path: &Path) -> Result<()> {
    write_atomic(path, &backbone_to_bytes(b))
}

pub fn save_flow(f: &FlowModel, path: &Path) -> Result<()> {
    write_atomic(path, &flow_to_bytes(f))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    backbone_from_bytes(&read(path)?)
}

pub fn load_flow(path: &Path) -> Result<FlowModel> {
    flow_from_bytes(&read(path)?)
}
