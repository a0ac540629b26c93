//! ReLU Transformer encoder with dense and mixture-of-experts feedforward
//! layers, written so that every feedforward neuron is individually visible.
//!
//! A feedforward layer computes `Σ_i σ(W_in[i,:]·x) W_out[:,i]`: neuron `i` is
//! row `i` of the input projection paired with column `i` of the output
//! projection. In a routed MoE layer the neurons are split into `E`
//! contiguous blocks and block `e` is scaled by its gate weight `α_e`, which
//! is zero for unselected experts.

mod checkpoint;
mod config;
mod forward;
mod weights;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{LayerKind, Mixing, ModelConfig, NeuronRef};
pub use forward::{ForwardHooks, ForwardTrace, NoHooks, TraceOptions};
pub use weights::{AttentionWeights, LayerWeights, Model};

pub(crate) use forward::LayerCache;
