//! Binary checkpoint: `"PSML"`, a little-endian `u32` version, a `u32`
//! length-prefixed JSON header, then every tensor listed in the header as
//! little-endian `f32` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{param_shapes, ModelConfig, ModelError, ModelParams, Result, PARAM_NAMES};
use crate::tensor::Tensor;
use crate::train::{OptimizerKind, OptimizerState};

pub const MAGIC: &[u8; 4] = b"PSML";
pub const FORMAT_VERSION: u32 = 1;

/// Position of the data stream at the time of the checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
    /// Next batch within `epoch`.
    pub batch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub optimizer: Option<OptimizerState>,
    /// Optimizer steps completed.
    pub step: u64,
    pub rng: RngState,
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    kind: OptimizerKind,
    step: u64,
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    dims: ModelConfig,
    step: u64,
    rng: RngState,
    config: serde_json::Value,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<Entry>,
}

fn format_err(msg: impl Into<String>) -> ModelError {
    ModelError::Format(msg.into())
}

fn entries(dims: &ModelConfig, opt: Option<OptimizerKind>) -> Vec<Entry> {
    let shapes = param_shapes(dims);
    let mut prefixes = vec![""];
    match opt {
        Some(OptimizerKind::SgdMomentum) => prefixes.push("opt.first."),
        Some(OptimizerKind::Adam) => prefixes.extend(["opt.first.", "opt.second."]),
        None => {}
    }
    prefixes
        .iter()
        .flat_map(|pre| {
            PARAM_NAMES.iter().zip(&shapes).map(move |(n, s)| Entry {
                name: format!("{pre}{n}"),
                shape: s.clone(),
            })
        })
        .collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format_err("unexpected end of file"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| format_err("tensor too large"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dims = *self.params.dims();
        let header = Header {
            dtype: "f32".into(),
            dims,
            step: self.step,
            rng: self.rng,
            config: self.config.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                kind: o.kind,
                step: o.step,
            }),
            tensors: entries(&dims, self.optimizer.as_ref().map(|o| o.kind)),
        };
        let json = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let len = u32::try_from(json.len()).map_err(|_| format_err("header too large"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        let mut payloads: Vec<&[f32]> = self.params.tensors().iter().map(Tensor::data).collect();
        if let Some(o) = &self.optimizer {
            payloads.extend(o.first.iter().map(Vec::as_slice));
            payloads.extend(o.second.iter().map(Vec::as_slice));
        }
        for p in payloads {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| format_err(format!("header: {e}")))?;
        if header.dtype != "f32" {
            return Err(format_err(format!("unsupported dtype {}", header.dtype)));
        }
        header.dims.validate().map_err(|e| format_err(e.to_string()))?;
        let kind = header.optimizer.as_ref().map(|o| o.kind);
        if header.tensors != entries(&header.dims, kind) {
            return Err(format_err("tensor table does not match the model dims"));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n = e.shape.iter().product();
            tensors.push(Tensor::new(e.shape.clone(), r.f32s(n)?)?);
        }
        if r.pos != buf.len() {
            return Err(format_err("trailing bytes after payload"));
        }
        let mut rest = tensors.split_off(PARAM_NAMES.len());
        let params = ModelParams::from_tensors(header.dims, tensors)?;
        let optimizer = header.optimizer.map(|o| {
            let second = rest.split_off(PARAM_NAMES.len());
            OptimizerState {
                kind: o.kind,
                step: o.step,
                first: rest.into_iter().map(Tensor::into_data).collect(),
                second: second.into_iter().map(Tensor::into_data).collect(),
            }
        });
        Ok(Self {
            params,
            optimizer,
            step: header.step,
            rng: header.rng,
            config: header.config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
