//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "MODSCOPE"
//! version      u32       1
//! header_len   u64
//! header       header_len bytes of JSON (config, routing restrictions, tensor directory)
//! tensors      f32 values, row-major, in directory order
//! ```
//!
//! Weights are written as 32-bit floats; models created by [`Model::init`]
//! and by the trainer always hold f32-representable values, so a save/load
//! cycle is bit-exact for them.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::config::{LayerKind, Mixing, ModelConfig};
use super::weights::{AttentionWeights, LayerWeights, Model};
use crate::error::{Error, Result};
use crate::util::write_file;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MODSCOPE";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    route_allow: BTreeMap<usize, Vec<bool>>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let header = Header {
        config: model.config.clone(),
        route_allow: model
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.route_allow.clone().map(|a| (i, a)))
            .collect(),
        tensors: model
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header_bytes.len() + 4 * model.num_parameters());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    model.visit_params(|_, p| {
        for &v in p {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    Ok(out)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    write_file(path.as_ref(), &bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        let raw = self.take(len * 4, name)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 8,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let header_len = cur.u64("header length")? as usize;
    let header_offset = cur.pos as u64;
    let header: Header = serde_json::from_slice(cur.take(header_len, "header")?).map_err(|e| Error::Parse {
        offset: header_offset,
        message: format!("bad header: {e}"),
    })?;
    header.config.validate().map_err(|e| Error::Parse {
        offset: header_offset,
        message: e.to_string(),
    })?;

    // Build a skeleton with the right shapes, then fill it tensor by tensor.
    let mut model = skeleton(&header.config);
    for (layer, allow) in &header.route_allow {
        match model.layers.get_mut(*layer) {
            Some(l) => l.route_allow = Some(allow.clone()),
            None => {
                return Err(Error::Parse {
                    offset: header_offset,
                    message: format!("routing restriction on missing layer {layer}"),
                })
            }
        }
    }
    let expected = model.tensor_shapes();
    if expected.len() != header.tensors.len()
        || expected
            .iter()
            .zip(&header.tensors)
            .any(|((n, s), t)| *n != t.name || *s != t.shape)
    {
        return Err(Error::Parse {
            offset: header_offset,
            message: "tensor directory does not match the declared config".into(),
        });
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let len: usize = shape.iter().product();
        tensors.push(cur.tensor(name, len)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Parse {
            offset: cur.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    let mut it = tensors.into_iter();
    model.visit_params_mut(|_, p| p.copy_from_slice(&it.next().expect("one tensor per parameter")));
    model.validate().map_err(|e| Error::Parse {
        offset: header_offset,
        message: e.to_string(),
    })?;
    Ok(model)
}

fn skeleton(config: &ModelConfig) -> Model {
    let (v, d, dff) = (config.vocab_size, config.d_model, config.d_ff);
    let layers = (0..config.num_layers)
        .map(|i| LayerWeights {
            attention: matches!(config.mixing, Mixing::Attention { .. }).then(|| AttentionWeights {
                wq: Array2::zeros((d, d)),
                wk: Array2::zeros((d, d)),
                wv: Array2::zeros((d, d)),
                wo: Array2::zeros((d, d)),
            }),
            w_in: Array2::zeros((dff, d)),
            w_out: Array2::zeros((d, dff)),
            b_in: config.use_bias.then(|| Array1::zeros(dff)),
            b_out: config.use_bias.then(|| Array1::zeros(d)),
            gate: match config.layer_kind(i) {
                LayerKind::Routed { experts, .. } => Some(Array2::zeros((experts, d))),
                _ => None,
            },
            route_allow: None,
        })
        .collect();
    Model {
        config: config.clone(),
        embed: Array2::zeros((v, d)),
        lm_head: Array2::zeros((v, d)),
        layers,
    }
}
