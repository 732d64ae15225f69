//! Portable weights container.
//!
//! Layout:
//!
//! ```text
//! [u64 little-endian: header length n][n bytes: UTF-8 JSON header][payload]
//! ```
//!
//! The header carries the model configuration and a tensor table
//! `{name, dtype, shape, offset, length}`; offsets are relative to the start
//! of the payload, which holds little-endian `f32` blobs. Canonical files list
//! tensors in [`ModelConfig::tensor_specs`] order with contiguous offsets and
//! compact JSON, so writing a loaded canonical file reproduces it byte for
//! byte.

use std::collections::{BTreeMap, HashSet};
use std::io::ErrorKind;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const FORMAT_NAME: &str = "vitrc-weights";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Named tensors of one model, immutable once loaded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Weights {
    tensors: BTreeMap<String, Tensor>,
}

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let tensors = cfg
            .tensor_specs()
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(shape)))
            .collect();
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Checks that every canonical tensor is present with its expected shape
    /// and nothing else is.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        if self.tensors.contains_key("dist_token") {
            return Err(distilled());
        }
        if let Some(pos) = self.tensors.get("pos_embed") {
            if pos.shape.len() == 3 && pos.shape[1] == cfg.tokens() + 1 {
                return Err(distilled());
            }
        }
        let specs = cfg.tensor_specs();
        for (name, shape) in &specs {
            let tensor = self.get(name)?;
            if &tensor.shape != shape {
                return Err(Error::shape(
                    format!("tensor `{name}`"),
                    format!("{shape:?}"),
                    format!("{:?}", tensor.shape),
                ));
            }
            if tensor.data.len() != shape.iter().product::<usize>() {
                return Err(Error::shape(
                    format!("tensor `{name}` data"),
                    shape.iter().product::<usize>(),
                    tensor.data.len(),
                ));
            }
        }
        let known: HashSet<&str> = specs.iter().map(|(n, _)| n.as_str()).collect();
        if let Some(extra) = self.names().find(|n| !known.contains(n)) {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }
}

fn distilled() -> Error {
    Error::InvalidConfig("distillation-token variants are not supported".into())
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

fn truncated(path: &Path, what: String) -> Error {
    Error::io(path, std::io::Error::new(ErrorKind::UnexpectedEof, what))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelConfig, Weights)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_container(&bytes, path)
}

pub fn load_model_from_bytes(bytes: &[u8]) -> Result<(ModelConfig, Weights)> {
    parse_container(bytes, Path::new("<memory>"))
}

fn parse_container(bytes: &[u8], path: &Path) -> Result<(ModelConfig, Weights)> {
    if bytes.len() < 8 {
        return Err(truncated(path, "file shorter than header length field".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let header_end = 8u64
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| truncated(path, format!("header of {header_len} bytes runs past EOF")))?
        as usize;
    let header: Header = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported container {} v{}",
            header.format, header.version
        )));
    }
    let cfg = header.config;
    cfg.validate()?;

    let payload = &bytes[header_end..];
    let mut weights = Weights::default();
    let mut spans = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Format(format!(
                "tensor `{}` has dtype {}, only f32 is supported",
                entry.name, entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.length != numel as u64 * 4 {
            return Err(Error::shape(
                format!("byte length of `{}`", entry.name),
                numel * 4,
                entry.length,
            ));
        }
        let end = entry
            .offset
            .checked_add(entry.length)
            .filter(|&end| end <= payload.len() as u64)
            .ok_or_else(|| {
                truncated(
                    path,
                    format!(
                        "tensor `{}` at offset {} (+{}) past end of {}-byte payload",
                        entry.name,
                        entry.offset,
                        entry.length,
                        payload.len()
                    ),
                )
            })?;
        let blob = &payload[entry.offset as usize..end as usize];
        let data = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if weights.tensors.contains_key(&entry.name) {
            return Err(Error::Format(format!("duplicate tensor `{}`", entry.name)));
        }
        weights.insert(
            entry.name.clone(),
            Tensor {
                shape: entry.shape.clone(),
                data,
            },
        );
        spans.push((entry.offset, end, entry.name.as_str()));
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::Format(format!(
                "tensors `{}` and `{}` overlap",
                pair[0].2, pair[1].2
            )));
        }
    }
    weights.validate(&cfg)?;
    Ok((cfg, weights))
}

/// Serializes a model into canonical container bytes.
pub fn to_bytes(cfg: &ModelConfig, weights: &Weights) -> Result<Vec<u8>> {
    weights.validate(cfg)?;
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, shape) in cfg.tensor_specs() {
        let length = shape.iter().product::<usize>() as u64 * 4;
        entries.push(TensorEntry {
            name,
            dtype: "f32".into(),
            shape,
            offset,
            length,
        });
        offset += length;
    }
    let header = serde_json::to_vec(&Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        config: *cfg,
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (name, _) in cfg.tensor_specs() {
        for v in &weights.get(&name)?.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_model(path: impl AsRef<Path>, cfg: &ModelConfig, weights: &Weights) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(cfg, weights)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Deterministic toy weights: one [`SplitMix64`] stream seeded with `seed`
/// fills every tensor in canonical order with uniform `[-1, 1)` values scaled
/// by `1/√D`.
pub fn synth_toy_model(seed: u64, cfg: &ModelConfig) -> Result<Weights> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(seed);
    let scale = 1.0 / (cfg.embed_dim as f32).sqrt();
    let mut weights = Weights::default();
    for (name, shape) in cfg.tensor_specs() {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.next_signed() * scale).collect();
        weights.insert(name, Tensor { shape, data });
    }
    Ok(weights)
}
