use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token-mixing sublayer placed before each feedforward layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Mixing {
    /// No cross-token interaction; each position is processed alone.
    Identity,
    /// Adds the mean hidden state over positions (parameter-free).
    Mean,
    /// Standard scaled dot-product self-attention.
    Attention { heads: usize },
}

/// Architecture of a ReLU encoder. The nonlinearity is always rectified-linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Layers whose feedforward is a routed mixture of experts.
    #[serde(default)]
    pub moe_layers: BTreeSet<usize>,
    /// Experts per routed MoE layer.
    #[serde(default = "one")]
    pub num_experts: usize,
    #[serde(default = "one")]
    pub top_k: usize,
    #[serde(default)]
    pub use_bias: bool,
    pub mixing: Mixing,
    /// Dense layers that were regrouped into expert blocks (post-MoE), mapped
    /// to their expert count. Every block is always selected with weight 1.
    #[serde(default)]
    pub expert_blocks: BTreeMap<usize, usize>,
    #[serde(default)]
    pub init_seed: u64,
}

fn one() -> usize {
    1
}

/// How a layer's feedforward neurons are grouped and weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    /// Routed MoE with a learned gate.
    Routed { experts: usize, top_k: usize },
    /// Post-MoE block layout; all experts selected with unit weight.
    Blocks { experts: usize },
}

impl ModelConfig {
    pub fn dense(vocab_size: usize, num_layers: usize, d_model: usize, d_ff: usize) -> Self {
        ModelConfig {
            vocab_size,
            num_layers,
            d_model,
            d_ff,
            moe_layers: BTreeSet::new(),
            num_experts: 1,
            top_k: 1,
            use_bias: false,
            mixing: Mixing::Identity,
            expert_blocks: BTreeMap::new(),
            init_seed: 0,
        }
    }

    pub fn with_moe(mut self, layers: impl IntoIterator<Item = usize>, experts: usize, top_k: usize) -> Self {
        self.moe_layers = layers.into_iter().collect();
        self.num_experts = experts;
        self.top_k = top_k;
        self
    }

    pub fn with_mixing(mut self, mixing: Mixing) -> Self {
        self.mixing = mixing;
        self
    }

    pub fn with_bias(mut self, use_bias: bool) -> Self {
        self.use_bias = use_bias;
        self
    }

    pub fn layer_kind(&self, layer: usize) -> LayerKind {
        if self.moe_layers.contains(&layer) {
            LayerKind::Routed {
                experts: self.num_experts,
                top_k: self.top_k,
            }
        } else if let Some(&experts) = self.expert_blocks.get(&layer) {
            LayerKind::Blocks { experts }
        } else {
            LayerKind::Dense
        }
    }

    /// Neurons per expert on a layer with expert structure.
    pub fn expert_size(&self, layer: usize) -> Option<usize> {
        match self.layer_kind(layer) {
            LayerKind::Dense => None,
            LayerKind::Routed { experts, .. } | LayerKind::Blocks { experts } => Some(self.d_ff / experts),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_layers == 0 {
            return fail("num_layers must be >= 1".into());
        }
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("vocab_size, d_model and d_ff must be positive".into());
        }
        if let Some(&l) = self.moe_layers.iter().find(|&&l| l >= self.num_layers) {
            return fail(format!("MoE layer {l} out of range for {} layers", self.num_layers));
        }
        if !self.moe_layers.is_empty() {
            if self.num_experts == 0 || self.d_ff % self.num_experts != 0 {
                return fail(format!(
                    "d_ff ({}) must be divisible by the expert count ({})",
                    self.d_ff, self.num_experts
                ));
            }
            if self.top_k == 0 || self.top_k > self.num_experts {
                return fail(format!("top_k {} must lie in [1, {}]", self.top_k, self.num_experts));
            }
        }
        for (&layer, &experts) in &self.expert_blocks {
            if layer >= self.num_layers || self.moe_layers.contains(&layer) {
                return fail(format!("expert block layout on invalid layer {layer}"));
            }
            if experts == 0 || self.d_ff % experts != 0 {
                return fail(format!("d_ff ({}) not divisible by {experts} expert blocks", self.d_ff));
            }
        }
        if let Mixing::Attention { heads } = self.mixing {
            if heads == 0 || self.d_model % heads != 0 {
                return fail(format!("d_model ({}) not divisible by {heads} heads", self.d_model));
            }
        }
        Ok(())
    }
}

/// A single neuron: one row of the input projection paired with the matching
/// column of the output projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronRef {
    pub layer: usize,
    pub neuron: usize,
}

impl NeuronRef {
    pub fn new(layer: usize, neuron: usize) -> Self {
        NeuronRef { layer, neuron }
    }

    /// Owning expert under a contiguous block layout of `expert_size` neurons.
    pub fn expert(&self, expert_size: usize) -> usize {
        self.neuron / expert_size
    }
}
