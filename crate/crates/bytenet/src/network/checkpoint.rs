//! Checkpoint files.
//!
//! Layout: an 8-byte magic, a little-endian u64 header length, a JSON
//! header (format version, model config, named parameter shapes, Sub-BN
//! statistics directory), the parameter blobs as little-endian f32 in
//! header order, the statistics blobs (mean then variance per entry), and
//! a SHA-256 checksum of everything before it.
//!
//! Training runs at f32, and the file format is fixed at f32, so
//! checkpointing is implemented for `Model<f32>`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::bucket::BucketId;
use crate::error::{Error, Result};
use crate::layers::norm::RunningStats;

use super::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"BNETCKP1";
const FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
    stats: Vec<StatEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct StatEntry {
    layer: String,
    bucket: BucketId,
    channels: usize,
    updates: u64,
}

fn push_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    buf.reserve(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8], count: usize, cursor: &mut usize, what: &str) -> Result<Vec<f32>> {
    let need = count * 4;
    let end = *cursor + need;
    if end > bytes.len() {
        return Err(Error::Checkpoint(format!("truncated blob for {}", what)));
    }
    let out = bytes[*cursor..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    *cursor = end;
    Ok(out)
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    let params = model.visit_params_ref();
    let mut stats_dir = Vec::new();
    model.visit_bn(&mut |layer, bn| {
        for (bucket, rs) in &bn.running {
            stats_dir.push((layer.clone(), *bucket, rs.clone()));
        }
    });

    let header = Header {
        format: FORMAT,
        config: model.config.clone(),
        params: params
            .iter()
            .map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
        stats: stats_dir
            .iter()
            .map(|(layer, bucket, rs)| StatEntry {
                layer: layer.clone(),
                bucket: *bucket,
                channels: rs.mean.len(),
                updates: rs.updates,
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization: {}", e)))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, t) in &params {
        push_f32s(&mut buf, t.values());
    }
    for (_, _, rs) in &stats_dir {
        push_f32s(&mut buf, &rs.mean);
        push_f32s(&mut buf, &rs.var);
    }
    let digest: [u8; 32] = Sha256::digest(&buf).into();
    buf.extend_from_slice(&digest);
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |m: String| Err(Error::Checkpoint(format!("{}: {}", path.display(), m)));
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return fail("file too short".into());
    }
    if &bytes[..8] != MAGIC {
        return fail("not a checkpoint (bad magic)".into());
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let computed: [u8; 32] = Sha256::digest(body).into();
    if computed.as_slice() != digest {
        return fail("checksum mismatch (file corrupted)".into());
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    if 16 + header_len > body.len() {
        return fail("header length exceeds file".into());
    }
    let header: Header = serde_json::from_slice(&body[16..16 + header_len])
        .map_err(|e| Error::Checkpoint(format!("{}: header parse: {}", path.display(), e)))?;
    if header.format != FORMAT {
        return fail(format!("unsupported format version {}", header.format));
    }
    header
        .config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("{}: config invalid: {}", path.display(), e)))?;

    let mut model = Model::<f32>::init(header.config, 0)?;
    let mut cursor = 16 + header_len;

    {
        let mut tensors = model.visit_params();
        if tensors.len() != header.params.len() {
            return fail(format!(
                "{} parameters in file, model defines {}",
                header.params.len(),
                tensors.len()
            ));
        }
        for (entry, (name, tensor)) in header.params.iter().zip(tensors.iter_mut()) {
            if entry.name != *name {
                return fail(format!("parameter order mismatch: {} vs {}", entry.name, name));
            }
            if entry.shape != tensor.shape() {
                return fail(format!(
                    "parameter {}: shape {:?} in file, {:?} in model",
                    name,
                    entry.shape,
                    tensor.shape()
                ));
            }
            let values = read_f32s(body, tensor.numel(), &mut cursor, name)?;
            tensor.values_mut().copy_from_slice(&values);
        }
    }

    let mut pending: std::collections::VecDeque<&StatEntry> = header.stats.iter().collect();
    let mut stat_blobs = Vec::with_capacity(header.stats.len());
    for entry in &header.stats {
        let mean = read_f32s(body, entry.channels, &mut cursor, &entry.layer)?;
        let var = read_f32s(body, entry.channels, &mut cursor, &entry.layer)?;
        stat_blobs.push((mean, var));
    }
    if cursor != body.len() {
        return fail(format!("{} trailing bytes after blobs", body.len() - cursor));
    }

    let mut blob_iter = stat_blobs.into_iter();
    let mut error: Option<String> = None;
    model.visit_bn_mut(&mut |layer, bn| {
        while let Some(entry) = pending.front() {
            if entry.layer != layer {
                break;
            }
            let entry = pending.pop_front().expect("front exists");
            let (mean, var) = blob_iter.next().expect("one blob per directory entry");
            if mean.len() != bn.channels() && error.is_none() {
                error = Some(format!(
                    "statistics for {} carry {} channels, layer has {}",
                    layer,
                    mean.len(),
                    bn.channels()
                ));
                return;
            }
            bn.running.insert(entry.bucket, RunningStats { mean, var, updates: entry.updates });
        }
    });
    if let Some(m) = error {
        return fail(m);
    }
    if !pending.is_empty() {
        return fail(format!(
            "statistics entry for unknown layer {}",
            pending.front().expect("nonempty").layer
        ));
    }
    Ok(model)
}
