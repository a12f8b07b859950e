//! Self-describing binary checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header,
//! raw little-endian `f64` tensor data in header order, then a SHA-256 of
//! everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Group, Model, ModelConfig, ModelParams, ParamGroup};
use crate::numcore::Tensor;
use crate::rng::RngState;
use crate::text::Vocab;

const MAGIC: &[u8; 8] = b"KPCKPT01";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab_hash: String,
    pub rng: Option<RngState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GroupEntry {
    group: Group,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    lineage: Vec<String>,
    rng: Option<RngState>,
    groups: Vec<GroupEntry>,
}

pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ck.model.params;
    let header = Header {
        config: ck.model.config.clone(),
        vocab_hash: ck.vocab_hash.clone(),
        lineage: ck.model.lineage.clone(),
        rng: ck.rng.clone(),
        groups: Group::ALL
            .iter()
            .map(|g| GroupEntry {
                group: *g,
                tensors: p
                    .group(*g)
                    .iter()
                    .map(|(name, t)| TensorEntry {
                        name: name.to_string(),
                        shape: t.shape().to_vec(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for g in Group::ALL {
        for (_, t) in p.group(g).iter() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, to_bytes(ck)?)?;
    Ok(())
}

pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |d: &str| Error::corrupt(path, d);
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch, the file was modified or truncated"));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let json = body.get(16..16 + hlen).ok_or_else(|| corrupt("header runs past end of file"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(&format!("header: {e}")))?;
    let mut data = &body[16 + hlen..];
    let mut params = ModelParams {
        encoder: ParamGroup::new(),
        decoder: ParamGroup::new(),
        kws: ParamGroup::new(),
        prefix: ParamGroup::new(),
    };
    for entry in header.groups {
        let group = params.group_mut(entry.group);
        for t in entry.tensors {
            let n: usize = t.shape.iter().product();
            if data.len() < n * 8 {
                return Err(corrupt(&format!("tensor {} truncated", t.name)));
            }
            let (raw, rest) = data.split_at(n * 8);
            data = rest;
            let values = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            group.push(t.name, Tensor::new(t.shape, values)?);
        }
    }
    if !data.is_empty() {
        return Err(corrupt(&format!("{} unexpected trailing bytes", data.len())));
    }
    let model = Model::from_parts(header.config, params, header.lineage)?;
    Ok(Checkpoint {
        model,
        vocab_hash: header.vocab_hash,
        rng: header.rng,
    })
}

/// Loads and validates a checkpoint; with `vocab`, its hash must match the
/// one recorded at save time.
pub fn load(path: &Path, vocab: Option<&Vocab>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let ck = from_bytes(path, &bytes)?;
    if let Some(v) = vocab {
        let h = v.hash();
        if h != ck.vocab_hash {
            return Err(Error::Mismatch(format!(
                "{}: saved with vocabulary {}, tokenizer has {}",
                path.display(),
                ck.vocab_hash,
                h
            )));
        }
        if v.len() != ck.model.config.vocab_size {
            return Err(Error::Mismatch(format!(
                "{}: model vocabulary size {} differs from tokenizer size {}",
                path.display(),
                ck.model.config.vocab_size,
                v.len()
            )));
        }
    }
    Ok(ck)
}
