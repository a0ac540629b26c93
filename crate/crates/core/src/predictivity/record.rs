use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::SubFunctionDataset;
use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::util::write_file;

const RECORD_MAGIC: &[u8; 8] = b"MSACTREC";
const RECORD_VERSION: u32 = 1;

/// Sequence-level activations `a_ij = max_k σ(W_in[j,:]·x_k)` of every neuron
/// of one layer on every instance of one sub-function.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub sub_function: String,
    pub layer: usize,
    /// `[instances × d_ff]`, rows in dataset order.
    pub activations: Array2<f64>,
    pub labels: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    sub_function: String,
    layer: usize,
    instances: usize,
    d_ff: usize,
}

/// Max-over-tokens aggregation of per-instance traces.
pub fn sequence_activations(dataset: &SubFunctionDataset, traces: &[ForwardTrace], layer: usize) -> Result<ActivationRecord> {
    if traces.len() != dataset.instances.len() {
        return Err(Error::Input(format!(
            "{} traces for {} instances of {}",
            traces.len(),
            dataset.instances.len(),
            dataset.id
        )));
    }
    let d_ff = match traces.first() {
        Some(t) => t
            .neuron_activations
            .get(layer)
            .ok_or_else(|| Error::Input(format!("trace has no layer {layer}")))?
            .ncols(),
        None => 0,
    };
    let mut activations = Array2::zeros((traces.len(), d_ff));
    for (i, trace) in traces.iter().enumerate() {
        let acts = trace
            .neuron_activations
            .get(layer)
            .ok_or_else(|| Error::Input(format!("trace {i} has no layer {layer}")))?;
        if acts.ncols() != d_ff {
            return Err(Error::Input(format!("trace {i} has width {}, expected {d_ff}", acts.ncols())));
        }
        max_over_tokens(acts, activations.row_mut(i).as_slice_mut().expect("standard layout"));
    }
    Ok(ActivationRecord {
        sub_function: dataset.id.clone(),
        layer,
        activations,
        labels: dataset.labels(),
    })
}

pub(crate) fn max_over_tokens(acts: &Array2<f64>, out: &mut [f64]) {
    out.fill(f64::NEG_INFINITY);
    for row in acts.rows() {
        for (o, &a) in out.iter_mut().zip(row) {
            if a > *o {
                *o = a;
            }
        }
    }
}

impl ActivationRecord {
    pub fn d_ff(&self) -> usize {
        self.activations.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.activations.nrows() != self.labels.len() {
            return Err(Error::Input(format!(
                "record {}: {} rows but {} labels",
                self.sub_function,
                self.activations.nrows(),
                self.labels.len()
            )));
        }
        if self.labels.iter().any(|&l| l > 1) {
            return Err(Error::Input(format!("record {}: labels must be 0/1", self.sub_function)));
        }
        if self.activations.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Input(format!(
                "record {}: activations must be finite and non-negative",
                self.sub_function
            )));
        }
        Ok(())
    }

    /// Binary encoding: magic, version, JSON header, labels (u8), then the
    /// activation matrix as little-endian f32, row-major.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = serde_json::to_vec(&RecordHeader {
            sub_function: self.sub_function.clone(),
            layer: self.layer,
            instances: self.labels.len(),
            d_ff: self.d_ff(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(RECORD_MAGIC);
        out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.labels);
        for &a in self.activations.iter() {
            out.extend_from_slice(&(a as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, message: String| Error::Parse {
            offset: offset as u64,
            message,
        };
        if bytes.len() < 20 || &bytes[..8] != RECORD_MAGIC {
            return Err(parse(0, "not an activation record".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != RECORD_VERSION {
            return Err(parse(8, format!("unsupported record version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| parse(12, "truncated header".into()))?;
        let header: RecordHeader =
            serde_json::from_slice(&bytes[20..body]).map_err(|e| parse(20, format!("bad header: {e}")))?;
        let n = header.instances;
        let want = n * header.d_ff * 4 + n;
        if bytes.len() - body != want {
            return Err(parse(
                body,
                format!("payload has {} bytes, header implies {want}", bytes.len() - body),
            ));
        }
        let labels = bytes[body..body + n].to_vec();
        let values: Vec<f64> = bytes[body + n..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let rec = ActivationRecord {
            sub_function: header.sub_function,
            layer: header.layer,
            activations: Array2::from_shape_vec((n, header.d_ff), values).expect("length checked"),
            labels,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
