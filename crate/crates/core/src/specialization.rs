//! Sub-functional neurons and how they are shared across functions.
//!
//! The sub-functional neurons of a sub-function are the `k` most predictive
//! neurons of a layer, where `k = max(1, round(fraction · d_ff))` with halves
//! rounded up. Two sub-functions' overlap is `|A ∩ B| / k`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::dataset::{FunctionCategory, FunctionSuite};
use crate::error::{Error, Result};
use crate::predictivity::{PredictivityTable, Unit};
use crate::util::argsort_desc;

/// Number of sub-functional neurons for a fraction of `d_ff`.
pub fn top_k_size(fraction: f64, d_ff: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} must lie in (0, 1]")));
    }
    Ok(((fraction * d_ff as f64 + 0.5).floor() as usize).clamp(1, d_ff))
}

/// The top-`k` neurons of one layer for one sub-function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NeuronSet {
    pub sub_function: String,
    pub layer: usize,
    /// Ascending neuron indices.
    pub members: Vec<usize>,
    pub k: usize,
}

impl NeuronSet {
    pub fn contains(&self, neuron: usize) -> bool {
        self.members.binary_search(&neuron).is_ok()
    }
}

/// The `k` highest-predictivity neurons; equal values go to the lower index.
pub fn top_k_neurons(table: &PredictivityTable, sub_function: &str, layer: usize, fraction: f64) -> Result<NeuronSet> {
    if table.unit() != Unit::Neuron {
        return Err(Error::Input("sub-functional neurons need a neuron-level table".into()));
    }
    let col = table.column(layer, sub_function)?;
    let k = top_k_size(fraction, col.len())?;
    let mut members = argsort_desc(&col);
    members.truncate(k);
    members.sort_unstable();
    Ok(NeuronSet {
        sub_function: sub_function.to_string(),
        layer,
        members,
        k,
    })
}

/// Neuron sets of every sub-function in the table, in table order.
pub fn neuron_sets(table: &PredictivityTable, layer: usize, fraction: f64) -> Result<Vec<NeuronSet>> {
    table
        .sub_functions()
        .iter()
        .map(|sf| top_k_neurons(table, sf, layer, fraction))
        .collect()
}

pub fn overlap_score(a: &NeuronSet, b: &NeuronSet) -> Result<f64> {
    if a.layer != b.layer {
        return Err(Error::Input(format!("sets come from layers {} and {}", a.layer, b.layer)));
    }
    if a.k != b.k {
        return Err(Error::Input(format!("sets have sizes {} and {}", a.k, b.k)));
    }
    let shared = a.members.iter().filter(|&&n| b.contains(n)).count();
    Ok(shared as f64 / a.k as f64)
}

/// Mean pairwise overlap between every pair of functions on one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSimilarity {
    pub layer: usize,
    pub functions: Vec<FunctionCategory>,
    /// `overlap[a][b]`; a diagonal entry is `None` when its function has a
    /// single sub-function, since self-pairs are excluded.
    pub overlap: Vec<Vec<Option<f64>>>,
}

impl LayerSimilarity {
    pub fn get(&self, a: FunctionCategory, b: FunctionCategory) -> Option<f64> {
        let i = self.functions.iter().position(|&f| f == a)?;
        let j = self.functions.iter().position(|&f| f == b)?;
        self.overlap[i][j]
    }
}

fn grouped_ids(table: &PredictivityTable, suite: &FunctionSuite) -> Result<BTreeMap<FunctionCategory, Vec<String>>> {
    let groups = suite.by_category();
    for id in groups.values().flatten() {
        table.sub_function_index(id)?;
    }
    if groups.is_empty() {
        return Err(Error::Input("suite has no sub-functions".into()));
    }
    Ok(groups)
}

/// Average overlap within and across functions on one layer. Within a
/// function the average runs over distinct sub-function pairs only.
pub fn function_similarity(
    table: &PredictivityTable,
    suite: &FunctionSuite,
    layer: usize,
    fraction: f64,
) -> Result<LayerSimilarity> {
    let groups = grouped_ids(table, suite)?;
    let sets: BTreeMap<FunctionCategory, Vec<NeuronSet>> = groups
        .iter()
        .map(|(&c, ids)| {
            let v = ids
                .iter()
                .map(|id| top_k_neurons(table, id, layer, fraction))
                .collect::<Result<Vec<_>>>()?;
            Ok((c, v))
        })
        .collect::<Result<_>>()?;
    let functions: Vec<FunctionCategory> = sets.keys().copied().collect();
    let mut overlap = vec![vec![None; functions.len()]; functions.len()];
    for (i, fa) in functions.iter().enumerate() {
        for (j, fb) in functions.iter().enumerate().skip(i) {
            let (a, b) = (&sets[fa], &sets[fb]);
            let mut total = 0.0;
            let mut pairs = 0usize;
            for (x, sa) in a.iter().enumerate() {
                for (y, sb) in b.iter().enumerate() {
                    if i == j && y <= x {
                        continue;
                    }
                    total += overlap_score(sa, sb)?;
                    pairs += 1;
                }
            }
            let v = (pairs > 0).then(|| total / pairs as f64);
            overlap[i][j] = v;
            overlap[j][i] = v;
        }
    }
    Ok(LayerSimilarity {
        layer,
        functions,
        overlap,
    })
}

/// Per layer and function: the mean over the function's sub-functions of the
/// best neuron predictivity on that layer.
pub fn layer_best_predictivity(
    table: &PredictivityTable,
    suite: &FunctionSuite,
) -> Result<BTreeMap<usize, BTreeMap<FunctionCategory, f64>>> {
    let groups = grouped_ids(table, suite)?;
    let mut out = BTreeMap::new();
    for layer in table.layer_ids() {
        let mut per = BTreeMap::new();
        for (&c, ids) in &groups {
            let mut sum = 0.0;
            for id in ids {
                sum += table.column(layer, id)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
            }
            per.insert(c, sum / ids.len() as f64);
        }
        out.insert(layer, per);
    }
    Ok(out)
}

/// Overlap matrices and best-predictivity curves for every layer of a table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilaritySummary {
    pub fraction: f64,
    pub layers: Vec<LayerSimilarity>,
    pub best_predictivity: BTreeMap<usize, BTreeMap<FunctionCategory, f64>>,
}

impl SimilaritySummary {
    pub fn compute(table: &PredictivityTable, suite: &FunctionSuite, fraction: f64) -> Result<Self> {
        top_k_size(fraction, 1)?;
        let layers = table
            .layer_ids()
            .par_iter()
            .map(|&l| function_similarity(table, suite, l, fraction))
            .collect::<Result<Vec<_>>>()?;
        Ok(SimilaritySummary {
            fraction,
            layers,
            best_predictivity: layer_best_predictivity(table, suite)?,
        })
    }

    /// `layer,function_a,function_b,overlap`; absent cells are left empty.
    pub fn overlap_csv(&self) -> String {
        let mut out = String::from("layer,function_a,function_b,overlap\n");
        for ls in &self.layers {
            for (i, a) in ls.functions.iter().enumerate() {
                for (j, b) in ls.functions.iter().enumerate() {
                    let v = ls.overlap[i][j].map(|v| v.to_string()).unwrap_or_default();
                    writeln!(out, "{},{a},{b},{v}", ls.layer).expect("string write");
                }
            }
        }
        out
    }

    pub fn best_predictivity_csv(&self) -> String {
        let mut out = String::from("layer,function,best_predictivity\n");
        for (layer, per) in &self.best_predictivity {
            for (f, v) in per {
                writeln!(out, "{layer},{f},{v}").expect("string write");
            }
        }
        out
    }

    /// Heatmap cells and per-function curves for external plotting.
    pub fn plot_json(&self) -> serde_json::Value {
        let heatmaps: Vec<_> = self
            .layers
            .iter()
            .map(|ls| {
                json!({
                    "layer": ls.layer,
                    "x_labels": ls.functions,
                    "y_labels": ls.functions,
                    "cells": ls.overlap,
                })
            })
            .collect();
        let mut series: BTreeMap<FunctionCategory, Vec<f64>> = BTreeMap::new();
        for per in self.best_predictivity.values() {
            for (&f, &v) in per {
                series.entry(f).or_default().push(v);
            }
        }
        json!({
            "fraction": self.fraction,
            "overlap_heatmaps": heatmaps,
            "best_predictivity": {
                "layers": self.best_predictivity.keys().collect::<Vec<_>>(),
                "series": series,
            },
        })
    }
}
