//! Checkpoint container.
//!
//! ```text
//! deltalogit-checkpoint v1
//! checksum <sha256 hex of header bytes followed by payload bytes>
//! header_bytes <N>
//! <N bytes of TOML: model kind, config, tensor manifest>
//! <payload: little-endian IEEE-754 float32 arrays in manifest order>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::probe::{GatedProbe, ProbeConfig};
use super::transformer::{Transformer, TransformerConfig};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

const FORMAT_TAG: &str = "deltalogit-checkpoint v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Transformer,
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: ModelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transformer: Option<TransformerConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint contents before they are bound to a model type.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor<f32>>,
}

fn encode(header_kind: Header, tensors: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut header = header_kind;
    let mut payload = Vec::new();
    header.tensors.clear();
    for (name, t) in tensors {
        header.tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: DType::Float32,
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let toml_text = toml::to_string(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(toml_text.as_bytes());
    hasher.update(&payload);
    let checksum = hex::encode(hasher.finalize());
    let mut out = format!(
        "{FORMAT_TAG}\nchecksum {checksum}\nheader_bytes {}\n",
        toml_text.len()
    )
    .into_bytes();
    out.extend_from_slice(toml_text.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

fn read_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("truncated preamble".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint("preamble is not UTF-8".into()))
}

impl Checkpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let tag = read_line(bytes, &mut pos)?;
        if tag != FORMAT_TAG {
            return Err(Error::Checkpoint(format!("unknown format/version {tag:?}")));
        }
        let checksum = read_line(bytes, &mut pos)?
            .strip_prefix("checksum ")
            .ok_or_else(|| Error::Checkpoint("missing checksum".into()))?
            .to_string();
        let header_len: usize = read_line(bytes, &mut pos)?
            .strip_prefix("header_bytes ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("bad header length".into()))?;
        if bytes.len() < pos + header_len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let (header_bytes, payload) = bytes[pos..].split_at(header_len);
        let mut hasher = Sha256::new();
        hasher.update(header_bytes);
        hasher.update(payload);
        if hex::encode(hasher.finalize()) != checksum {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let header_text = std::str::from_utf8(header_bytes)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let header: Header = toml::from_str(header_text)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = payload
                .get(entry.offset..entry.offset + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("{} exceeds payload", entry.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::param(data, &entry.shape)?);
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn named(&self) -> BTreeMap<&str, &Tensor<f32>> {
        self.header
            .tensors
            .iter()
            .map(|e| e.name.as_str())
            .zip(&self.tensors)
            .collect()
    }

    /// Binds the stored tensors onto a transformer of `config`, listing
    /// every missing or mis-shaped parameter on failure.
    pub fn into_transformer_with(self, config: TransformerConfig) -> Result<Transformer> {
        let mut model = Transformer::<f32>::zeros(config)?;
        let stored = self.named();
        let mut problems = Vec::new();
        for (name, slot) in model.params_mut() {
            match stored.get(name.as_str()) {
                Some(t) if t.shape() == slot.shape() => *slot = (*t).clone(),
                Some(t) => problems.push(format!(
                    "{name}: expected {:?}, found {:?}",
                    slot.shape(),
                    t.shape()
                )),
                None => problems.push(format!("{name}: missing")),
            }
        }
        if !problems.is_empty() {
            return Err(Error::IncompatibleShapes(problems.join("; ")));
        }
        Ok(model)
    }

    pub fn into_transformer(self) -> Result<Transformer> {
        let config = match (self.header.kind, self.header.transformer) {
            (ModelKind::Transformer, Some(c)) => c,
            _ => return Err(Error::Checkpoint("not a transformer checkpoint".into())),
        };
        self.into_transformer_with(config)
    }

    pub fn into_probe(self) -> Result<GatedProbe> {
        if self.header.kind != ModelKind::Probe {
            return Err(Error::Checkpoint("not a probe checkpoint".into()));
        }
        let stored = self.named();
        let get = |n: &str| {
            stored
                .get(n)
                .map(|t| (*t).clone())
                .ok_or_else(|| Error::Checkpoint(format!("probe tensor {n} missing")))
        };
        GatedProbe::from_weights(
            get("w_gate")?,
            get("w_up")?,
            get("w_down")?,
            get("b_gate")?,
            get("b_up")?,
            get("b_down")?,
        )
    }
}

impl Transformer<f32> {
    pub fn to_checkpoint_bytes(&self, metadata: BTreeMap<String, String>) -> Result<Vec<u8>> {
        let header = Header {
            kind: ModelKind::Transformer,
            transformer: Some(self.config),
            probe: None,
            metadata,
            tensors: Vec::new(),
        };
        encode(header, &self.params())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_checkpoint_bytes(BTreeMap::new())?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::read(path)?.into_transformer()
    }

    /// Hex SHA-256 over every parameter's bytes in manifest order.
    pub fn param_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.params() {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

impl GatedProbe<f32> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            kind: ModelKind::Probe,
            transformer: None,
            probe: Some(self.config),
            metadata: BTreeMap::new(),
            tensors: Vec::new(),
        };
        let bytes = encode(header, &self.params())?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::read(path)?.into_probe()
    }
}
