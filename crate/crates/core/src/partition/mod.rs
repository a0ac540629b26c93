//! Expert partitions of feedforward neurons.
//!
//! A [`Partition`] assigns every neuron of each covered layer to one of `E`
//! equally sized experts. Partitions come from the architecture itself
//! ([`pre_moe_partition`]), from seeded shuffles ([`random_partition`]) or
//! from balanced k-means over input weight rows ([`cluster_partition`]).

mod cluster;
mod moefy;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, Model};
use crate::util::{mix_seed, rng, write_file};

pub use cluster::{cluster_partition, cluster_partition_layers, ClusterLog};
pub use moefy::{moefy_model, unmoefy_model, Moefied};

/// Where a partition came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PreMoe,
    Random,
    Clustered,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::PreMoe => "pre_moe",
            Provenance::Random => "random",
            Provenance::Clustered => "clustered",
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_moe" => Ok(Provenance::PreMoe),
            "random" => Ok(Provenance::Random),
            "clustered" => Ok(Provenance::Clustered),
            other => Err(Error::Input(format!("unknown partition provenance {other:?}"))),
        }
    }
}

/// Balanced assignment of neurons to experts, per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    num_experts: usize,
    d_ff: usize,
    provenance: Provenance,
    layers: BTreeMap<usize, Vec<usize>>,
}

impl Partition {
    /// Validates balance and coverage of every layer's assignment vector.
    pub fn new(num_experts: usize, provenance: Provenance, layers: BTreeMap<usize, Vec<usize>>) -> Result<Self> {
        let d_ff = layers.values().next().map(Vec::len).unwrap_or(0);
        if layers.is_empty() || d_ff == 0 {
            return Err(Error::Input("partition covers no neurons".into()));
        }
        if num_experts == 0 || d_ff % num_experts != 0 {
            return Err(Error::Config(format!("{num_experts} experts do not divide {d_ff} neurons")));
        }
        let size = d_ff / num_experts;
        for (layer, assign) in &layers {
            if assign.len() != d_ff {
                return Err(Error::Input(format!(
                    "layer {layer} assigns {} neurons, expected {d_ff}",
                    assign.len()
                )));
            }
            let mut counts = vec![0usize; num_experts];
            for (n, &e) in assign.iter().enumerate() {
                if e >= num_experts {
                    return Err(Error::Input(format!("layer {layer}, neuron {n}: expert {e} out of range")));
                }
                counts[e] += 1;
            }
            if let Some((e, &c)) = counts.iter().enumerate().find(|(_, &c)| c != size) {
                return Err(Error::Input(format!(
                    "layer {layer}: expert {e} has {c} neurons, balanced size is {size}"
                )));
            }
        }
        Ok(Partition {
            num_experts,
            d_ff,
            provenance,
            layers,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff
    }

    /// Neurons per expert.
    pub fn expert_size(&self) -> usize {
        self.d_ff / self.num_experts
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }

    pub fn assignment(&self, layer: usize) -> Result<&[usize]> {
        self.layers
            .get(&layer)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Input(format!("partition does not cover layer {layer}")))
    }

    /// Member neurons of one expert, ascending.
    pub fn members(&self, layer: usize, expert: usize) -> Result<Vec<usize>> {
        if expert >= self.num_experts {
            return Err(Error::Input(format!("expert {expert} out of range")));
        }
        Ok(self
            .assignment(layer)?
            .iter()
            .enumerate()
            .filter(|(_, &e)| e == expert)
            .map(|(n, _)| n)
            .collect())
    }

    /// Combines per-layer partitions with the same shape and provenance.
    pub fn merge(parts: impl IntoIterator<Item = Partition>) -> Result<Partition> {
        let mut iter = parts.into_iter();
        let mut base = iter.next().ok_or_else(|| Error::Input("nothing to merge".into()))?;
        for p in iter {
            if p.num_experts != base.num_experts || p.d_ff != base.d_ff || p.provenance != base.provenance {
                return Err(Error::Input("cannot merge partitions of different shape or provenance".into()));
            }
            for (l, a) in p.layers {
                if base.layers.insert(l, a).is_some() {
                    return Err(Error::Input(format!("layer {l} appears in two partitions")));
                }
            }
        }
        Ok(base)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,neuron,expert,provenance\n");
        for (layer, assign) in &self.layers {
            for (n, e) in assign.iter().enumerate() {
                writeln!(out, "{layer},{n},{e},{}", self.provenance.as_str()).expect("string write");
            }
        }
        out
    }

    /// Parses the `layer,neuron,expert,provenance` form. The expert count is
    /// inferred as one more than the largest expert index.
    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Validation {
            path: source.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "layer,neuron,expert,provenance" => {}
            _ => return Err(bad(1, "expected header layer,neuron,expert,provenance".into())),
        }
        let mut provenance = None;
        let mut cells: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
        let mut max_expert = 0;
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != 4 {
                return Err(bad(lineno, format!("expected 4 fields, found {}", fields.len())));
            }
            let num = |s: &str, what: &str| {
                s.parse::<usize>()
                    .map_err(|_| bad(lineno, format!("{what} {s:?} is not a non-negative integer")))
            };
            let (layer, neuron, expert) = (num(fields[0], "layer")?, num(fields[1], "neuron")?, num(fields[2], "expert")?);
            let p: Provenance = fields[3].parse().map_err(|e: Error| bad(lineno, e.to_string()))?;
            if *provenance.get_or_insert(p) != p {
                return Err(bad(lineno, "mixed provenance in one partition file".into()));
            }
            if cells.entry(layer).or_default().insert(neuron, expert).is_some() {
                return Err(bad(lineno, format!("neuron {neuron} of layer {layer} assigned twice")));
            }
            max_expert = max_expert.max(expert);
        }
        let provenance = provenance.ok_or_else(|| bad(1, "partition file has no rows".into()))?;
        let mut layers = BTreeMap::new();
        for (layer, m) in cells {
            if m.keys().copied().ne(0..m.len()) {
                return Err(Error::Input(format!("{source}: layer {layer} has gaps in neuron indices")));
            }
            layers.insert(layer, m.into_values().collect());
        }
        Partition::new(max_expert + 1, provenance, layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_csv().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, &path.display().to_string())
    }
}

/// The architectural partition: expert `e` owns the contiguous block of
/// neurons `[e·n_E, (e+1)·n_E)` on every routed or block-structured layer.
pub fn pre_moe_partition(model: &Model) -> Result<Partition> {
    let cfg = &model.config;
    let mut layers = BTreeMap::new();
    let mut experts = None;
    for l in 0..cfg.num_layers {
        let e = match cfg.layer_kind(l) {
            LayerKind::Dense => continue,
            LayerKind::Routed { experts, .. } | LayerKind::Blocks { experts } => experts,
        };
        if *experts.get_or_insert(e) != e {
            return Err(Error::Config("expert layers disagree on the expert count".into()));
        }
        let size = cfg.d_ff / e;
        layers.insert(l, (0..cfg.d_ff).map(|n| n / size).collect());
    }
    let experts = experts.ok_or_else(|| Error::Config("model has no MoE layers".into()))?;
    Partition::new(experts, Provenance::PreMoe, layers)
}

/// Uniformly random balanced partition of `d_ff` neurons into `experts`
/// experts on each listed layer. Layers draw independent streams.
pub fn random_partition(layers: &[usize], d_ff: usize, experts: usize, seed: u64) -> Result<Partition> {
    if experts == 0 || d_ff % experts != 0 {
        return Err(Error::Config(format!("{experts} experts do not divide {d_ff} neurons")));
    }
    let size = d_ff / experts;
    let mut out = BTreeMap::new();
    for &l in layers {
        let mut order: Vec<usize> = (0..d_ff).collect();
        order.shuffle(&mut rng(mix_seed(seed, l as u64)));
        let mut assign = vec![0; d_ff];
        for (pos, &n) in order.iter().enumerate() {
            assign[n] = pos / size;
        }
        out.insert(l, assign);
    }
    Partition::new(experts, Provenance::Random, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn pre_moe_blocks() {
        let cfg = ModelConfig::dense(10, 2, 4, 8).with_moe([1], 2, 1);
        let m = Model::init(cfg, 1).unwrap();
        let p = pre_moe_partition(&m).unwrap();
        assert_eq!(p.layer_ids(), vec![1]);
        assert_eq!(p.assignment(1).unwrap(), &[0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(p.provenance(), Provenance::PreMoe);
    }

    #[test]
    fn pre_moe_rejects_dense() {
        let m = Model::init(ModelConfig::dense(10, 2, 4, 8), 1).unwrap();
        assert!(matches!(pre_moe_partition(&m), Err(Error::Config(_))));
    }

    #[test]
    fn random_is_balanced_and_seeded() {
        let p = random_partition(&[0, 3], 64, 16, 9).unwrap();
        for l in [0, 3] {
            for e in 0..16 {
                assert_eq!(p.members(l, e).unwrap().len(), 4);
            }
        }
        assert_eq!(p, random_partition(&[0, 3], 64, 16, 9).unwrap());
        assert_ne!(p.assignment(0).unwrap(), p.assignment(3).unwrap());
        assert!(random_partition(&[0], 10, 3, 0).is_err());
    }

    #[test]
    fn unbalanced_rejected() {
        let layers = BTreeMap::from([(0, vec![0, 0, 0, 1])]);
        assert!(Partition::new(2, Provenance::Random, layers).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let p = random_partition(&[1, 2], 8, 4, 3).unwrap();
        let text = p.to_csv();
        assert_eq!(Partition::from_csv(&text, "mem").unwrap(), p);
    }

    #[test]
    fn csv_reports_line() {
        let text = "layer,neuron,expert,provenance\n0,0,0,pre_moe\n0,1,x,pre_moe\n";
        match Partition::from_csv(text, "p.csv") {
            Err(Error::Validation { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
