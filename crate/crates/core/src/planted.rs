//! Synthetic model/suite pairs with known functional neurons.
//!
//! Each sub-function `s` owns a trigger token whose embedding is the unit
//! vector on coordinate `s`. A sub-function's planted neurons read that
//! coordinate and write to a private output coordinate; every other neuron
//! reads and writes only a block of noise coordinates driven by filler
//! tokens. Positive instances contain the trigger somewhere in the sequence,
//! negatives contain a null token (zero embedding) in its place, so at full
//! strength a planted neuron's sequence activation separates the classes
//! perfectly while unplanted neurons carry no label signal.
//!
//! Model layout, in coordinates: `[0, S)` triggers, `[S, 2S)` outputs,
//! `[2S, 2S + d_noise)` noise, where `S` is the total sub-function count.
//! Vocabulary: token 0 is null, tokens `1..=S` are triggers, the rest fillers.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{FunctionCategory, FunctionSuite, Instance, SubFunctionDataset};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, NeuronRef};
use crate::util::{mix_seed, rng, to_f32_grid};

/// One planted function: a group of sub-functions whose neurons all live in
/// the given host experts of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFunction {
    pub name: String,
    pub category: FunctionCategory,
    pub sub_functions: usize,
    pub layer: usize,
    /// Expert blocks that receive this function's neurons. Sub-function `i`
    /// is hosted by `host_experts[i % len]`.
    pub host_experts: Vec<usize>,
    pub neurons_per_sub_function: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub functions: Vec<PlantedFunction>,
    pub num_layers: usize,
    pub d_ff: usize,
    pub num_experts: usize,
    /// Make every layer that hosts a function a routed MoE layer whose gate
    /// sends each trigger to its host expert.
    pub routed: bool,
    pub d_noise: usize,
    pub filler_tokens: usize,
    pub seq_len: usize,
    pub instances_per_class: usize,
    /// Probability that trigger presence follows the label; otherwise it is a
    /// fair coin. Must lie in (0, 1].
    pub strength: f64,
    /// Input weight of a planted neuron on its trigger coordinate.
    pub gain: f64,
    /// Output weight of a planted neuron on its output coordinate.
    pub out_gain: f64,
    /// Router logit of a trigger's host expert.
    pub router_gain: f64,
    pub model_seed: u64,
}

impl PlantedConfig {
    /// One function with `sub_functions` sub-functions planted into
    /// `host_experts` on `layer`, with desk-scale defaults elsewhere.
    pub fn single(sub_functions: usize, host_experts: Vec<usize>, layer: usize) -> Self {
        PlantedConfig {
            functions: vec![PlantedFunction {
                name: "planted".into(),
                category: FunctionCategory::Custom,
                sub_functions,
                layer,
                host_experts,
                neurons_per_sub_function: 3,
            }],
            num_layers: 2,
            d_ff: 256,
            num_experts: 16,
            routed: false,
            d_noise: 16,
            filler_tokens: 64,
            seq_len: 6,
            instances_per_class: 50,
            strength: 1.0,
            gain: 1.0,
            out_gain: 1.0,
            router_gain: 8.0,
            model_seed: 0,
        }
    }

    pub fn total_sub_functions(&self) -> usize {
        self.functions.iter().map(|f| f.sub_functions).sum()
    }

    pub fn d_model(&self) -> usize {
        2 * self.total_sub_functions() + self.d_noise
    }

    pub fn vocab_size(&self) -> usize {
        1 + self.total_sub_functions() + self.filler_tokens
    }

    pub fn expert_size(&self) -> usize {
        self.d_ff / self.num_experts
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return fail(format!("signal strength {} must lie in (0, 1]", self.strength));
        }
        if self.num_experts == 0 || self.d_ff % self.num_experts != 0 {
            return fail(format!("{} experts do not divide d_ff {}", self.num_experts, self.d_ff));
        }
        if self.functions.is_empty() {
            return fail("no planted functions".into());
        }
        if self.seq_len == 0 || self.instances_per_class == 0 || self.filler_tokens == 0 || self.d_noise == 0 {
            return fail("seq_len, instances_per_class, filler_tokens and d_noise must be positive".into());
        }
        for f in &self.functions {
            if f.layer >= self.num_layers {
                return fail(format!("function {} planted on missing layer {}", f.name, f.layer));
            }
            if f.host_experts.is_empty() || f.host_experts.iter().any(|&e| e >= self.num_experts) {
                return fail(format!("function {} has invalid host experts", f.name));
            }
            let mut hosts = f.host_experts.clone();
            hosts.sort_unstable();
            hosts.dedup();
            if hosts.len() != f.host_experts.len() {
                return fail(format!("function {} repeats a host expert", f.name));
            }
            if f.neurons_per_sub_function == 0 || f.neurons_per_sub_function > self.expert_size() {
                return fail(format!(
                    "function {}: {} neurons per sub-function do not fit an expert of {}",
                    f.name,
                    f.neurons_per_sub_function,
                    self.expert_size()
                ));
            }
        }
        Ok(())
    }

    fn sub_function_ids(&self) -> Vec<(usize, String)> {
        self.functions
            .iter()
            .enumerate()
            .flat_map(|(fi, f)| (0..f.sub_functions).map(move |i| (fi, format!("{}-{i:03}", f.name))))
            .collect()
    }
}

/// Planted structure of a model, independent of any dataset seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Planted neurons per sub-function id.
    pub neurons: BTreeMap<String, Vec<NeuronRef>>,
    /// Host expert per sub-function id.
    pub host: BTreeMap<String, usize>,
    /// Host experts per function name.
    pub function_hosts: BTreeMap<String, Vec<usize>>,
    /// Trigger token per sub-function id.
    pub trigger: BTreeMap<String, u32>,
    pub expert_size: usize,
}

/// Builds the planted model and its ground truth.
pub fn planted_model(cfg: &PlantedConfig) -> Result<(Model, GroundTruth)> {
    cfg.validate()?;
    let s_total = cfg.total_sub_functions();
    let d = cfg.d_model();
    let noise0 = 2 * s_total;
    let size = cfg.expert_size();
    let routed_layers: Vec<usize> = if cfg.routed {
        let mut v: Vec<usize> = cfg.functions.iter().map(|f| f.layer).collect();
        v.sort_unstable();
        v.dedup();
        v
    } else {
        Vec::new()
    };
    let mut mcfg = ModelConfig::dense(cfg.vocab_size(), cfg.num_layers, d, cfg.d_ff);
    if cfg.routed {
        mcfg = mcfg.with_moe(routed_layers.iter().copied(), cfg.num_experts, 1);
    }
    let mut model = Model::init(mcfg, cfg.model_seed)?;
    let mut r = rng(mix_seed(cfg.model_seed, 0x9a7e));

    // Embeddings: null is zero, trigger s is e_s, fillers live on noise coords.
    model.embed.fill(0.0);
    for s in 0..s_total {
        model.embed[(1 + s, s)] = 1.0;
    }
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    for t in 1 + s_total..cfg.vocab_size() {
        for j in noise0..d {
            model.embed[(t, j)] = to_f32_grid(unit.sample(&mut r));
        }
    }

    // Unplanted neurons: noise-only reads and writes.
    let w_in_std = 1.0 / (cfg.d_noise as f64).sqrt();
    let w_out_std = 1.0 / (cfg.d_ff as f64).sqrt();
    for lw in &mut model.layers {
        lw.w_in = Array2::zeros((cfg.d_ff, d));
        lw.w_out = Array2::zeros((d, cfg.d_ff));
        for n in 0..cfg.d_ff {
            for j in noise0..d {
                lw.w_in[(n, j)] = to_f32_grid(w_in_std * unit.sample(&mut r));
                lw.w_out[(j, n)] = to_f32_grid(w_out_std * unit.sample(&mut r));
            }
        }
        if let Some(g) = &mut lw.gate {
            *g = Array2::zeros((cfg.num_experts, d));
            for e in 0..cfg.num_experts {
                for j in noise0..d {
                    g[(e, j)] = to_f32_grid(0.5 * unit.sample(&mut r));
                }
            }
        }
    }

    // Planted neurons: balanced reuse within each host block.
    let mut truth = GroundTruth {
        neurons: BTreeMap::new(),
        host: BTreeMap::new(),
        function_hosts: BTreeMap::new(),
        trigger: BTreeMap::new(),
        expert_size: size,
    };
    let mut planted_rows: BTreeMap<(usize, usize), ()> = BTreeMap::new();
    let mut usage: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let ids = cfg.sub_function_ids();
    for (s, (fi, id)) in ids.iter().enumerate() {
        let f = &cfg.functions[*fi];
        let local = s - ids.iter().position(|(g, _)| g == fi).expect("function present");
        let host = f.host_experts[local % f.host_experts.len()];
        let mut block: Vec<usize> = (host * size..(host + 1) * size).collect();
        block.shuffle(&mut r);
        block.sort_by_key(|&n| usage.get(&(f.layer, n)).copied().unwrap_or(0));
        let mut chosen: Vec<usize> = block[..f.neurons_per_sub_function].to_vec();
        chosen.sort_unstable();
        let lw = &mut model.layers[f.layer];
        for &n in &chosen {
            *usage.entry((f.layer, n)).or_default() += 1;
            if planted_rows.insert((f.layer, n), ()).is_none() {
                lw.w_in.row_mut(n).fill(0.0);
                for j in 0..d {
                    lw.w_out[(j, n)] = 0.0;
                }
            }
            lw.w_in[(n, s)] = cfg.gain;
            lw.w_out[(s_total + s, n)] = cfg.out_gain;
        }
        if let Some(g) = &mut lw.gate {
            g[(host, s)] = cfg.router_gain;
        }
        truth.neurons.insert(id.clone(), chosen.iter().map(|&n| NeuronRef::new(f.layer, n)).collect());
        truth.host.insert(id.clone(), host);
        truth.trigger.insert(id.clone(), 1 + s as u32);
        truth.function_hosts.insert(f.name.clone(), f.host_experts.clone());
    }
    for lw in &mut model.layers {
        if let Some(b) = &mut lw.b_in {
            *b = Array1::zeros(cfg.d_ff);
        }
    }
    model.round_to_f32();
    model.validate()?;
    Ok((model, truth))
}

/// Generates the planted suite. The ground truth depends only on the model
/// seed; `seed` controls the instances.
pub fn synth_planted_suite(cfg: &PlantedConfig, seed: u64) -> Result<(FunctionSuite, GroundTruth)> {
    let (_, truth) = planted_model(cfg)?;
    let s_total = cfg.total_sub_functions();
    let mut subs = Vec::with_capacity(s_total);
    for (s, (fi, id)) in cfg.sub_function_ids().into_iter().enumerate() {
        let mut r = rng(mix_seed(seed, s as u64));
        let trigger = 1 + s as u32;
        let filler_base = 1 + s_total as u32;
        let mut instances = Vec::with_capacity(2 * cfg.instances_per_class);
        for label in [1u8, 0u8] {
            for _ in 0..cfg.instances_per_class {
                let present = if r.random::<f64>() < cfg.strength {
                    label == 1
                } else {
                    r.random::<bool>()
                };
                let mut tokens: Vec<u32> = (0..cfg.seq_len)
                    .map(|_| filler_base + r.random_range(0..cfg.filler_tokens as u32))
                    .collect();
                let pos = r.random_range(0..cfg.seq_len);
                tokens[pos] = if present { trigger } else { 0 };
                instances.push(Instance { tokens, label });
            }
        }
        instances.shuffle(&mut r);
        subs.push(SubFunctionDataset {
            id,
            category: cfg.functions[fi].category,
            instances,
        });
    }
    Ok((FunctionSuite::new(subs)?, truth))
}
