//! Versioned checkpoint archives.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `NLFCKPT\0` |
//! | 4     | format version |
//! | 4     | header length `n` |
//! | n     | TOML header: step, model and sampler configuration, tensor directory |
//! | ...   | every tensor as `f32`, in directory order |
//! | ...   | if present: Adam step (`u64`), first moments, second moments |
//! | 4     | CRC-32 of everything above |

use std::fs;
use std::path::Path;

use nlf_core::model::{ModelConfig, ModelParams};
use nlf_core::sampler::SamplerConfig;
use nlf_core::tensor::Tensor;
use nlf_core::train::OptState;
use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};

pub const MAGIC: &[u8; 8] = b"NLFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    step: u64,
    has_optimizer: bool,
    model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sampler: Option<SamplerConfig>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub optimizer: Option<OptState<f32>>,
    /// Training steps taken when the checkpoint was written.
    pub step: u64,
    /// Sampler the model was trained with, used as the rendering default.
    pub sampler: Option<SamplerConfig>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.params.store;
        let header = Header {
            step: self.step,
            has_optimizer: self.optimizer.is_some(),
            model: self.params.config.clone(),
            sampler: self.sampler.clone(),
            tensors: store
                .iter()
                .map(|(name, t)| TensorEntry { name: name.to_string(), rows: t.rows(), cols: t.cols() })
                .collect(),
        };
        let header = toml::to_string(&header).expect("header fields are representable in TOML");
        let mut out = Vec::with_capacity(20 + header.len() + 12 * store.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let put = |out: &mut Vec<u8>, tensors: &[Tensor<f32>]| {
            for t in tensors {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        put(&mut out, store.tensors());
        if let Some(opt) = &self.optimizer {
            out.extend_from_slice(&(opt.step as u64).to_le_bytes());
            put(&mut out, &opt.m);
            put(&mut out, &opt.v);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptArchive(m.to_string());
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        if bytes.len() < 20 {
            return Err(corrupt("file is truncated"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(corrupt("checksum mismatch (file truncated or modified)"));
        }
        let header_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
        let header = body.get(16..16 + header_len).ok_or_else(|| corrupt("header runs past the end"))?;
        let header = std::str::from_utf8(header).map_err(|_| corrupt("header is not UTF-8"))?;
        let header: Header = toml::from_str(header).map_err(|e| Error::CorruptArchive(format!("bad header: {e}")))?;

        let mut reader = Reader { data: &body[16 + header_len..] };
        let take = |reader: &mut Reader| -> Result<Vec<Tensor<f32>>> {
            header.tensors.iter().map(|e| reader.tensor(e.rows, e.cols)).collect()
        };
        let tensors = take(&mut reader)?;
        let optimizer = if header.has_optimizer {
            let step = reader.u64()? as usize;
            let m = take(&mut reader)?;
            let v = take(&mut reader)?;
            Some(OptState { m, v, step })
        } else {
            None
        };
        if !reader.data.is_empty() {
            return Err(corrupt("trailing bytes after the last tensor"));
        }
        let named = header.tensors.iter().map(|e| e.name.clone()).zip(tensors).collect();
        let params = params_from_named(&header.model, named)?;
        Ok(Self { params, optimizer, step: header.step, sampler: header.sampler })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename, so a crash never leaves a half-written checkpoint
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(io(&tmp))?;
        fs::rename(&tmp, path).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(io(path))?)
    }

    /// Parameters checked against the configuration the caller expects.
    pub fn params_for(&self, expected: &ModelConfig) -> Result<ModelParams<f32>> {
        let named = self.params.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        params_from_named(expected, named)
    }
}

/// Matches named tensors against the shapes `config` implies, reporting the
/// first tensor that differs.
fn params_from_named(config: &ModelConfig, tensors: Vec<(String, Tensor<f32>)>) -> Result<ModelParams<f32>> {
    let expected = ModelParams::<f32>::shapes(config)?;
    for (name, rows, cols) in &expected {
        match tensors.iter().find(|(n, _)| n == name) {
            None => return Err(Error::CorruptArchive(format!("tensor `{name}` is missing"))),
            Some((_, t)) if t.shape() != (*rows, *cols) => {
                return Err(Error::ShapeMismatch { tensor: name.clone(), expected: (*rows, *cols), found: t.shape() })
            }
            Some(_) => {}
        }
    }
    if let Some((name, _)) = tensors.iter().find(|(n, _)| !expected.iter().any(|e| &e.0 == n)) {
        return Err(Error::CorruptArchive(format!("unexpected tensor `{name}`")));
    }
    Ok(ModelParams::from_named(config, tensors)?)
}

struct Reader<'a> {
    data: &'a [u8],
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<&[u8]> {
        if self.data.len() < n {
            return Err(Error::CorruptArchive("tensor data runs past the end".into()));
        }
        let (head, rest) = self.data.split_at(n);
        self.data = rest;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor<f32>> {
        let raw = self.bytes(rows * cols * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Tensor::from_vec(rows, cols, data))
    }
}
