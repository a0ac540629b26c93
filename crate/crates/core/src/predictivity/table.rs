use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ap::bidirectional_ap;
use super::record::{max_over_tokens, ActivationRecord};
use crate::dataset::{FunctionSuite, SubFunctionDataset};
use crate::error::{Error, Result};
use crate::model::{Model, NoHooks, TraceOptions};
use crate::partition::Partition;
use crate::util::write_file;

const TABLE_MAGIC: &[u8; 8] = b"MSPTABLE";
const TABLE_VERSION: u32 = 1;

/// What the rows of a [`PredictivityTable`] index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Neuron,
    Expert,
}

impl Unit {
    fn column_name(self) -> &'static str {
        match self {
            Unit::Neuron => "neuron",
            Unit::Expert => "expert",
        }
    }
}

/// Predictivity per (layer, unit, sub-function). Each layer holds a
/// `[units × sub_functions]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictivityTable {
    unit: Unit,
    sub_functions: Vec<String>,
    layers: BTreeMap<usize, Array2<f64>>,
    degenerate: usize,
}

#[derive(Serialize, Deserialize)]
struct TableHeader {
    unit: Unit,
    sub_functions: Vec<String>,
    layers: Vec<(usize, usize)>,
    degenerate: usize,
}

impl PredictivityTable {
    pub fn from_parts(unit: Unit, sub_functions: Vec<String>, layers: BTreeMap<usize, Array2<f64>>) -> Result<Self> {
        for (l, m) in &layers {
            if m.ncols() != sub_functions.len() {
                return Err(Error::Input(format!(
                    "layer {l}: {} columns for {} sub-functions",
                    m.ncols(),
                    sub_functions.len()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("layer {l}: non-finite predictivity")));
            }
        }
        Ok(PredictivityTable {
            unit,
            sub_functions,
            layers,
            degenerate: 0,
        })
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn sub_functions(&self) -> &[String] {
        &self.sub_functions
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }

    pub fn layer(&self, layer: usize) -> Result<&Array2<f64>> {
        self.layers
            .get(&layer)
            .ok_or_else(|| Error::Input(format!("table has no layer {layer}")))
    }

    /// Number of units (neurons or experts) on a layer.
    pub fn units(&self, layer: usize) -> Result<usize> {
        Ok(self.layer(layer)?.nrows())
    }

    /// Number of (unit, sub-function) cells whose predictivity was flagged
    /// as degenerate while building the table.
    pub fn degenerate_count(&self) -> usize {
        self.degenerate
    }

    pub fn sub_function_index(&self, id: &str) -> Result<usize> {
        self.sub_functions
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::Input(format!("sub-function {id:?} missing from table")))
    }

    pub fn get(&self, layer: usize, unit: usize, sub_function: usize) -> Result<f64> {
        self.layer(layer)?
            .get((unit, sub_function))
            .copied()
            .ok_or_else(|| Error::Input(format!("no entry for unit {unit}, sub-function {sub_function}")))
    }

    /// Predictivity of every unit on one layer for one sub-function.
    pub fn column(&self, layer: usize, sub_function: &str) -> Result<Vec<f64>> {
        let j = self.sub_function_index(sub_function)?;
        Ok(self.layer(layer)?.column(j).to_vec())
    }

    /// Assembles a neuron table from precomputed activation records (for
    /// example, records exported from an external model).
    pub fn from_records(records: &[ActivationRecord]) -> Result<Self> {
        let mut sub_functions: Vec<String> = Vec::new();
        for r in records {
            if !sub_functions.contains(&r.sub_function) {
                sub_functions.push(r.sub_function.clone());
            }
        }
        let mut cells: BTreeMap<usize, BTreeMap<usize, (Vec<f64>, usize)>> = BTreeMap::new();
        for r in records {
            r.validate()?;
            let j = sub_functions.iter().position(|s| *s == r.sub_function).expect("collected above");
            let (col, degenerate) = record_predictivity(r)?;
            if cells.entry(r.layer).or_default().insert(j, (col, degenerate)).is_some() {
                return Err(Error::Input(format!(
                    "duplicate record for {} on layer {}",
                    r.sub_function, r.layer
                )));
            }
        }
        let mut layers = BTreeMap::new();
        let mut degenerate = 0;
        for (layer, cols) in cells {
            if cols.len() != sub_functions.len() {
                return Err(Error::Input(format!("layer {layer} is missing some sub-functions")));
            }
            let d_ff = cols.values().next().map(|c| c.0.len()).unwrap_or(0);
            let mut m = Array2::zeros((d_ff, sub_functions.len()));
            for (j, (col, deg)) in cols {
                if col.len() != d_ff {
                    return Err(Error::Input(format!("layer {layer}: inconsistent neuron counts")));
                }
                m.column_mut(j).assign(&ndarray::ArrayView1::from(&col));
                degenerate += deg;
            }
            layers.insert(layer, m);
        }
        let mut t = Self::from_parts(Unit::Neuron, sub_functions, layers)?;
        t.degenerate = degenerate;
        Ok(t)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("layer,{},sub_function,ap\n", self.unit.column_name());
        for (layer, m) in &self.layers {
            for (u, row) in m.rows().into_iter().enumerate() {
                for (sf, ap) in self.sub_functions.iter().zip(row) {
                    writeln!(out, "{layer},{u},{sf},{ap}").expect("string write");
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&TableHeader {
            unit: self.unit,
            sub_functions: self.sub_functions.clone(),
            layers: self.layers.iter().map(|(&l, m)| (l, m.nrows())).collect(),
            degenerate: self.degenerate,
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(TABLE_MAGIC);
        out.extend_from_slice(&TABLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for m in self.layers.values() {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, message: String| Error::Parse {
            offset: offset as u64,
            message,
        };
        if bytes.len() < 20 || &bytes[..8] != TABLE_MAGIC {
            return Err(parse(0, "not a predictivity table".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != TABLE_VERSION {
            return Err(parse(8, format!("unsupported table version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let mut pos = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| parse(12, "truncated header".into()))?;
        let header: TableHeader =
            serde_json::from_slice(&bytes[20..pos]).map_err(|e| parse(20, format!("bad header: {e}")))?;
        let cols = header.sub_functions.len();
        let mut layers = BTreeMap::new();
        for (layer, rows) in header.layers {
            let n = rows * cols * 8;
            if bytes.len() - pos < n {
                return Err(parse(pos, format!("truncated values for layer {layer}")));
            }
            let values: Vec<f64> = bytes[pos..pos + n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            layers.insert(layer, Array2::from_shape_vec((rows, cols), values).expect("length checked"));
            pos += n;
        }
        if pos != bytes.len() {
            return Err(parse(pos, "trailing bytes".into()));
        }
        let mut t = Self::from_parts(header.unit, header.sub_functions, layers)?;
        t.degenerate = header.degenerate;
        Ok(t)
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

fn record_predictivity(r: &ActivationRecord) -> Result<(Vec<f64>, usize)> {
    let mut degenerate = 0;
    let col = (0..r.d_ff())
        .map(|j| {
            let scores = r.activations.column(j).to_vec();
            let b = bidirectional_ap(&scores, &r.labels)?;
            degenerate += b.degenerate as usize;
            Ok(b.ap)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((col, degenerate))
}

/// Sequence-level activation records of one sub-function for several layers,
/// computed instance by instance without keeping full traces.
pub fn activation_records(model: &Model, dataset: &SubFunctionDataset, layers: &[usize]) -> Result<Vec<ActivationRecord>> {
    let d_ff = model.config.d_ff;
    let mut mats: Vec<Array2<f64>> = layers.iter().map(|_| Array2::zeros((dataset.instances.len(), d_ff))).collect();
    for (i, inst) in dataset.instances.iter().enumerate() {
        let cache = model.forward_cached(&inst.tokens, TraceOptions::default(), &mut NoHooks)?;
        for (m, &layer) in mats.iter_mut().zip(layers) {
            let mut row = m.row_mut(i);
            max_over_tokens(
                &cache.layers[layer].recorded,
                row.as_slice_mut().expect("standard layout"),
            );
        }
    }
    let labels = dataset.labels();
    Ok(mats
        .into_iter()
        .zip(layers)
        .map(|(activations, &layer)| ActivationRecord {
            sub_function: dataset.id.clone(),
            layer,
            activations,
            labels: labels.clone(),
        })
        .collect())
}

/// Neuron predictivity for every (layer, neuron, sub-function) cell.
///
/// Sub-functions are processed in parallel; the result does not depend on
/// scheduling.
pub fn build_table(model: &Model, suite: &FunctionSuite, layers: &[usize]) -> Result<PredictivityTable> {
    suite.validate()?;
    if layers.is_empty() {
        return Err(Error::Input("no layers requested".into()));
    }
    if let Some(&l) = layers.iter().find(|&&l| l >= model.config.num_layers) {
        return Err(Error::Input(format!("layer {l} out of range")));
    }
    let mut layers = layers.to_vec();
    layers.sort_unstable();
    layers.dedup();
    let per_sf: Vec<Vec<ActivationRecord>> = suite
        .sub_functions
        .par_iter()
        .map(|sf| activation_records(model, sf, &layers))
        .collect::<Result<_>>()?;
    let columns: Vec<Vec<(Vec<f64>, usize)>> = per_sf
        .par_iter()
        .map(|recs| recs.iter().map(record_predictivity).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let d_ff = model.config.d_ff;
    let mut out = BTreeMap::new();
    let mut degenerate = 0;
    for (li, &layer) in layers.iter().enumerate() {
        let mut m = Array2::zeros((d_ff, suite.sub_functions.len()));
        for (j, cols) in columns.iter().enumerate() {
            let (col, deg) = &cols[li];
            m.column_mut(j).assign(&ndarray::ArrayView1::from(col));
            degenerate += deg;
        }
        out.insert(layer, m);
    }
    let mut t = PredictivityTable::from_parts(Unit::Neuron, suite.ids(), out)?;
    t.degenerate = degenerate;
    Ok(t)
}

/// Expert predictivity: the mean neuron predictivity over each expert's
/// members, per sub-function.
pub fn expert_predictivity(table: &PredictivityTable, partition: &Partition) -> Result<PredictivityTable> {
    if table.unit != Unit::Neuron {
        return Err(Error::Input("expert predictivity needs a neuron-level table".into()));
    }
    let mut layers = BTreeMap::new();
    for layer in partition.layer_ids() {
        let m = table.layer(layer)?;
        if m.nrows() != partition.d_ff() {
            return Err(Error::Input(format!(
                "layer {layer}: partition covers {} neurons, table has {}",
                partition.d_ff(),
                m.nrows()
            )));
        }
        let mut e = Array2::zeros((partition.num_experts(), m.ncols()));
        for expert in 0..partition.num_experts() {
            let members = partition.members(layer, expert)?;
            for j in 0..m.ncols() {
                let sum: f64 = members.iter().map(|&n| m[(n, j)]).sum();
                e[(expert, j)] = sum / members.len() as f64;
            }
        }
        layers.insert(layer, e);
    }
    PredictivityTable::from_parts(Unit::Expert, table.sub_functions.clone(), layers)
}
