//! GSLM model container.
//!
//! ```text
//! "GSLM" | version: u32 LE | header_len: u32 LE | header (UTF-8 JSON)
//! | zero padding to a 64-byte file boundary | tensor payloads
//! ```
//!
//! The header carries the model config, an optional spike config, and the
//! ordered tensor manifest. Payloads are little-endian `f32`, stored in
//! manifest order; each starts on a 64-byte boundary and its `offset` is
//! relative to the start of the payload section.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelWeights};
use crate::synth::SpikeConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GSLM";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spike: Option<SpikeConfig>,
    pub tensors: Vec<TensorEntry>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let named = model.weights.named();
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0usize;
    for (name, t) in &named {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: offset as u64,
        });
        offset = align_up(offset + t.len() * 4);
    }
    let header = Header {
        config: model.config.clone(),
        spike: model.spike.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + offset + ALIGN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(align_up(out.len()), 0);
    let base = out.len();
    for ((_, t), e) in named.iter().zip(&header.tensors) {
        out.resize(base + e.offset as usize, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let fail = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(fail("missing GSLM magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let hend = 12 + hlen;
    if bytes.len() < hend {
        return Err(fail("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..hend])?;
    header.config.validate()?;
    let base = align_up(hend);
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.offset as usize % ALIGN != 0 {
            return Err(Error::Format(format!("tensor {} is not 64-byte aligned", e.name)));
        }
        let n: usize = e.shape.iter().product();
        let start = base + e.offset as usize;
        let end = start + n * 4;
        if end > bytes.len() {
            return Err(Error::Format(format!("tensor {} runs past end of file", e.name)));
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    let weights = ModelWeights::from_named(&header.config, tensors)?;
    let mut model = Model::new(header.config, weights)?;
    model.spike = header.spike;
    Ok(model)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

/// Reads only the header.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing GSLM magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    Ok(serde_json::from_slice(&bytes[12..12 + hlen])?)
}
