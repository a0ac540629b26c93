//! # modscope
//!
//! Measures functional specialization of Transformer feedforward neurons and
//! detects modular (Mixture-of-Experts) structure among them.
//!
//! The pipeline, bottom up:
//!
//! - [`model`]: a small ReLU encoder with dense and routed-MoE feedforward
//!   layers whose forward pass exposes every neuron activation.
//! - [`dataset`]: binary-classification sub-function suites, plus
//!   [`planted`] fixtures with known ground truth.
//! - [`predictivity`]: max-over-token sequence activations and bidirectional
//!   average precision per neuron and per expert.
//! - [`specialization`]: top-fraction sub-functional neurons, overlap scores
//!   and function-level similarity.
//! - [`partition`]: architectural, random and balanced-clustering expert
//!   partitions; lossless MoE-fication of dense layers.
//! - [`modularity`]: hypergeometric/binomial null tests for functional experts
//!   (Prop and Degree).
//! - [`perturbation`]: activation noise and routing restriction, evaluated
//!   with frozen linear readouts.
//! - [`dynamics`]: Spearman stabilization, emergence curves and clustering
//!   scores across checkpoint series.
//! - [`train`]: a masked-token training loop that produces checkpoint series.

pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod model;
pub mod modularity;
pub mod partition;
pub mod perturbation;
pub mod planted;
pub mod predictivity;
pub mod specialization;
pub mod train;

mod util;

pub use dataset::{FunctionCategory, FunctionSuite, Instance, SubFunctionDataset};
pub use dynamics::{spearman, CheckpointSeries, StabilizationCurve};
pub use error::{Error, ErrorClass, Result};
pub use model::{ForwardTrace, LayerWeights, Mixing, Model, ModelConfig, NeuronRef};
pub use modularity::{FunctionalExpertReport, PValueMode};
pub use partition::{Partition, Provenance};
pub use perturbation::{PerturbationPlan, Readout};
pub use predictivity::{ActivationRecord, ExportManifest, PredictivityTable, Unit};
pub use specialization::{NeuronSet, SimilaritySummary};
pub use train::TrainConfig;
