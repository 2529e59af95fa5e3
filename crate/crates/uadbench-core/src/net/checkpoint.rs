//! Model checkpoints: the architecture spec travels with the weights, so a
//! file can never be loaded into a mismatched graph.
//!
//! Layout: 8-byte magic, little-endian u64 header length, JSON header
//! (spec, tensor manifest, caller extras), then each tensor's f64 values
//! in manifest order, little-endian.

use super::{NetError, NetGraph, NetSpec};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"UADCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetSpec,
    tensors: Vec<TensorMeta>,
    extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

/// Write `graph` (and caller metadata, e.g. the stopped epoch) to `path`.
pub fn save_checkpoint(
    path: &Path,
    graph: &NetGraph,
    extra: &serde_json::Value,
) -> Result<(), NetError> {
    let io_err = |e: std::io::Error| NetError::UnreadableCheckpoint {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let header = Header {
        spec: graph.spec.clone(),
        tensors: graph
            .params()
            .iter()
            .map(|(name, v)| TensorMeta {
                name: name.clone(),
                shape: v.shape().to_vec(),
            })
            .collect(),
        extra: extra.clone(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::with_capacity(header_bytes.len() + 8 * graph.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for v in graph.params().values() {
        for &x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(&out).map_err(io_err)?;
    Ok(())
}

/// Read a checkpoint. When `expected` is given, the embedded spec must be
/// identical — a different architecture is a hard error, not a warning.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&NetSpec>,
) -> Result<(NetGraph, serde_json::Value), NetError> {
    let io_err = |reason: String| NetError::UnreadableCheckpoint {
        path: path.display().to_string(),
        reason,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(e.to_string()))?;

    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(io_err("not a checkpoint file (bad magic)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| io_err("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| io_err(format!("bad header: {e}")))?;
    header.spec.validate().map_err(|e| io_err(e.to_string()))?;

    if let Some(want) = expected {
        if *want != header.spec {
            return Err(NetError::CheckpointMismatch {
                path: path.display().to_string(),
                detail: format!(
                    "checkpoint was trained with a different architecture \
                     (stored {:?}, expected {:?})",
                    header.spec, want
                ),
            });
        }
    }

    let mut params = BTreeMap::new();
    let mut cursor = 16 + header_len;
    for meta in &header.tensors {
        let len: usize = meta.shape.iter().product();
        let end = cursor + 8 * len;
        let raw = bytes
            .get(cursor..end)
            .ok_or_else(|| io_err(format!("tensor {} truncated", meta.name)))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&meta.shape), values)
            .map_err(|e| io_err(format!("tensor {}: {e}", meta.name)))?;
        params.insert(meta.name.clone(), arr);
        cursor = end;
    }
    if cursor != bytes.len() {
        return Err(io_err("trailing bytes after last tensor".into()));
    }

    let graph = NetGraph::from_parts(header.spec, params)?;
    Ok((graph, header.extra))
}

impl NetGraph {
    /// Rebuild a graph from a spec plus a full parameter map, verifying the
    /// map holds exactly the tensors the spec implies (by shape and name).
    pub fn from_parts(
        spec: NetSpec,
        params: BTreeMap<String, ArrayD<f64>>,
    ) -> Result<NetGraph, NetError> {
        let reference = NetGraph::initialize(spec.clone(), 0);
        if reference.params().len() != params.len() {
            return Err(NetError::CheckpointMismatch {
                path: String::new(),
                detail: format!(
                    "expected {} tensors, found {}",
                    reference.params().len(),
                    params.len()
                ),
            });
        }
        for (name, v) in reference.params() {
            let found = params.get(name).ok_or_else(|| NetError::CheckpointMismatch {
                path: String::new(),
                detail: format!("missing tensor {name}"),
            })?;
            if found.shape() != v.shape() {
                return Err(NetError::CheckpointMismatch {
                    path: String::new(),
                    detail: format!(
                        "tensor {name}: shape {:?}, expected {:?}",
                        found.shape(),
                        v.shape()
                    ),
                });
            }
        }
        let mut graph = reference;
        *graph.params_mut() = params;
        Ok(graph)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_network, BottleneckSpec, NetSpec};

    fn spec() -> NetSpec {
        NetSpec {
            input_size: 16,
            widths: [2, 3, 4, 4],
            kernel: 3,
            leaky_slope: 0.2,
            bottleneck: BottleneckSpec {
                dense_dim: 8,
                ..BottleneckSpec::dense(true)
            },
            critic: crate::net::CriticKind::None,
        }
    }

    #[test]
    fn checkpoint_round_trips_every_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = build_network(&spec(), 9).unwrap();
        let extra = serde_json::json!({"stopped_epoch": 17});
        save_checkpoint(&path, &net, &extra).unwrap();

        let (loaded, got_extra) = load_checkpoint(&path, Some(&spec())).unwrap();
        assert_eq!(got_extra, extra);
        assert_eq!(loaded.spec, net.spec);
        for (name, v) in net.params() {
            assert_eq!(loaded.param(name), v, "tensor {name} changed in transit");
        }
    }

    #[test]
    fn loading_into_a_different_architecture_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = build_network(&spec(), 9).unwrap();
        save_checkpoint(&path, &net, &serde_json::Value::Null).unwrap();

        let mut other = spec();
        other.bottleneck.dense_dim = 16;
        let err = load_checkpoint(&path, Some(&other)).unwrap_err();
        assert!(matches!(err, NetError::CheckpointMismatch { .. }));
    }

    #[test]
    fn garbage_files_report_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("noise.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        let err = load_checkpoint(&path, None).unwrap_err();
        assert!(matches!(err, NetError::UnreadableCheckpoint { .. }));
    }
}
