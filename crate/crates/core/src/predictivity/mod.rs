//! Neuron and expert predictivity for binary sub-functions.
//!
//! A neuron's sequence-level activation on an instance is its maximum
//! rectified activation over the instance's tokens. Its predictivity for a
//! sub-function is the bidirectional average precision of those activations
//! against the labels; an expert's predictivity is the mean over its neurons.

mod ap;
mod manifest;
mod record;
mod table;

pub use ap::{average_precision, bidirectional_ap, BidirectionalAp};
pub use manifest::{ExportManifest, EXPORT_DTYPE};
pub use record::{sequence_activations, ActivationRecord};
pub use table::{activation_records, build_table, expert_predictivity, PredictivityTable, Unit};
