//! Checkpoint files: an 8-byte little-endian header length, a JSON header
//! listing `(name, shape, offset)` per tensor, then a flat little-endian
//! `f32` blob. Offsets are byte offsets into the blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::nn::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub dtype: String,
    pub params: Vec<TensorEntry>,
}

impl CheckpointHeader {
    /// Size of the parameter blob in bytes.
    pub fn blob_bytes(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>() * 4).sum()
    }
}

pub fn encode<T: Scalar>(kind: &str, params: &ParamSet<T>) -> Vec<u8> {
    let mut entries = Vec::with_capacity(params.len());
    let mut blob = Vec::with_capacity(params.numel() * 4);
    for (name, t) in params.iter() {
        entries.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset: blob.len() });
        for v in t.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let header = CheckpointHeader { kind: kind.to_string(), dtype: "f32le".into(), params: entries };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

pub fn decode_header(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < 8 {
        return Err(malformed(path, "truncated header length"));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let end = 8usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| malformed(path, "header length exceeds file"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..end])?;
    if header.dtype != "f32le" {
        return Err(malformed(path, format!("unsupported dtype {}", header.dtype)));
    }
    Ok((header, end))
}

pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(String, ParamSet<T>)> {
    let (header, start) = decode_header(bytes, path)?;
    let blob = &bytes[start..];
    if blob.len() != header.blob_bytes() {
        return Err(malformed(
            path,
            format!("blob has {} bytes, header describes {}", blob.len(), header.blob_bytes()),
        ));
    }
    let mut params = ParamSet::new();
    for entry in &header.params {
        let numel: usize = entry.shape.iter().product();
        let raw = blob
            .get(entry.offset..entry.offset + numel * 4)
            .ok_or_else(|| malformed(path, format!("tensor {} out of bounds", entry.name)))?;
        let data =
            raw.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)).collect();
        params.push(entry.name.clone(), Tensor::new(&entry.shape, data)?);
    }
    Ok((header.kind, params))
}

pub fn save<T: Scalar>(path: &Path, kind: &str, params: &ParamSet<T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, encode(kind, params)).at(path)
}

pub fn load<T: Scalar>(path: &Path) -> Result<(String, ParamSet<T>)> {
    let bytes = fs::read(path).at(path)?;
    decode(&bytes, path)
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).at(path)?;
    Ok(decode_header(&bytes, path)?.0)
}
