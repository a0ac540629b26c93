//! `modscope` command-line pipelines. Every command writes its reports and a
//! `manifest.json` into `--out`.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use run::{invalid, Failure, Outcome};

#[derive(Parser)]
#[command(name = "modscope", version, about = "Neuron specialization and functional expert analysis")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "MODSCOPE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Build a planted model, its sub-function suites and ground truth.
    Synth(SynthArgs),
    /// Train a toy masked-token encoder and write a checkpoint series.
    Train(TrainArgs),
    /// Neuron (and optionally expert) predictivity tables.
    Predictivity(PredictivityArgs),
    /// Sub-functional neuron overlap between functions, per layer.
    Specialize(SpecializeArgs),
    /// Functional experts (Prop and Degree) under one or more partitionings.
    Experts(ExpertsArgs),
    /// Noise and routing-restriction perturbations with frozen readouts.
    Perturb(PerturbArgs),
    /// Stabilization and emergence over a checkpoint series.
    Dynamics(DynamicsArgs),
    /// Agreement between sub-function similarity and shared top experts.
    ClusterScore(ClusterScoreArgs),
}

#[derive(Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub sub_functions: usize,
    /// Host experts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "3,11")]
    pub hosts: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 2)]
    pub num_layers: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 16)]
    pub experts: usize,
    /// Make the host layer a routed MoE layer and write its partition.
    #[arg(long)]
    pub routed: bool,
    #[arg(long, default_value_t = 3)]
    pub neurons_per_sub_function: usize,
    #[arg(long, default_value_t = 50)]
    pub instances_per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    pub strength: f64,
    #[arg(long, default_value_t = 64)]
    pub filler_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
    /// Seed of the main suite.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write an independently drawn evaluation suite.
    #[arg(long)]
    pub eval_seed: Option<u64>,
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// One whitespace-separated token sequence per line. Without it a topic
    /// corpus is generated.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub topics: usize,
    #[arg(long, default_value_t = 4000)]
    pub sequences: usize,
    #[arg(long, default_value_t = 8)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub corpus_seed: u64,
    /// Vocabulary size; defaults to 49 for a generated corpus, else the
    /// largest token plus one.
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 24)]
    pub d_model: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    /// identity, mean, or attention:<heads>
    #[arg(long, default_value = "mean")]
    pub mixing: String,
    /// Routed MoE layers, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub moe_layers: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub experts: usize,
    #[arg(long, default_value_t = 1)]
    pub top_k: usize,
    #[arg(long)]
    pub bias: bool,
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    #[arg(long, default_value_t = 300)]
    pub steps: u64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.15)]
    pub mask_probability: f64,
    #[arg(long, default_value_t = 15)]
    pub checkpoint_every: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Serialize)]
pub struct PredictivityArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, conflicts_with = "export_manifest")]
    pub model: Option<PathBuf>,
    #[arg(long, conflicts_with = "export_manifest")]
    pub suite: Option<PathBuf>,
    /// Activation records listed by an exporter manifest, instead of a model.
    #[arg(long)]
    pub export_manifest: Option<PathBuf>,
    /// Layers to analyse (default: all).
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    /// Also write expert predictivity under this partition.
    #[arg(long)]
    pub partition: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct SpecializeArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub fraction: f64,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PMode {
    Binomial,
    Exact,
}

#[derive(Args, Serialize)]
pub struct ExpertsArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0.001)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = PMode::Binomial)]
    pub mode: PMode,
    /// Labelled partition files, `name=path`; repeatable.
    #[arg(long = "partition")]
    pub partitions: Vec<String>,
    /// Cluster this model's dense layers into `--cluster-experts` experts.
    #[arg(long, requires = "cluster_experts")]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    pub cluster_experts: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub cluster_iterations: usize,
    /// Random partitions averaged into the `random` row.
    #[arg(long, default_value_t = 1000)]
    pub random_draws: usize,
    /// Experts per random partition (default: same as the first partitioning).
    #[arg(long)]
    pub random_experts: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    Noise,
    Route,
}

#[derive(Args, Serialize)]
pub struct PerturbArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Suite used to rank units and fit readouts.
    #[arg(long)]
    pub train_suite: PathBuf,
    /// Suite used for accuracy (default: the training suite).
    #[arg(long)]
    pub eval_suite: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PerturbMode::Noise)]
    pub mode: PerturbMode,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Expert partition; routed layers default to their own experts.
    #[arg(long)]
    pub partition: Option<PathBuf>,
    /// Fractions of experts (or neurons) perturbed, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    pub proportions: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 4.0)]
    pub variance: f64,
    #[arg(long, default_value_t = 0.01)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0.001)]
    pub alpha: f64,
}

#[derive(Args, Serialize)]
pub struct DynamicsArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// `series.json` written by `train`.
    #[arg(long)]
    pub series: PathBuf,
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long, conflicts_with = "cluster_experts")]
    pub partition: Option<PathBuf>,
    /// Cluster the last checkpoint into this many experts.
    #[arg(long)]
    pub cluster_experts: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub cluster_iterations: usize,
    #[arg(long, default_value_t = 1000)]
    pub random_draws: usize,
    #[arg(long, default_value_t = 0.01)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0.001)]
    pub alpha: f64,
    /// Stabilization level whose first crossing is reported.
    #[arg(long, default_value_t = 0.9)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Serialize)]
pub struct ClusterScoreArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Neuron-level table (with `--partition`) or expert-level table.
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub partition: Option<PathBuf>,
    /// Square CSV: `sub_function,id1,id2,...` then one row per id.
    #[arg(long)]
    pub similarity: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub max_k: usize,
}

fn set_threads(n: Option<usize>) -> Outcome {
    if let Some(n) = n {
        if n == 0 {
            return Err(invalid("thread count must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Compute(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = set_threads(cli.threads).and_then(|_| commands::run(&cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.report());
            ExitCode::from(f.exit_code())
        }
    }
}

