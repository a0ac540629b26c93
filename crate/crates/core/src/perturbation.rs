//! Causal tests: Gaussian noise on chosen neuron activations, and router
//! restriction to chosen experts, scored with frozen linear readouts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SubFunctionDataset;
use crate::error::{Error, Result};
use crate::model::{ForwardHooks, LayerKind, Model, NoHooks};
use crate::partition::Partition;
use crate::predictivity::{expert_predictivity, PredictivityTable, Unit};
use crate::util::{argsort_desc, mix_seed, rng, write_file};

pub const DEFAULT_NOISE_VARIANCE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    Noise,
    RouteRestrict,
}

/// How the targets of a plan were chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingBasis {
    SingleDataset,
    SumOverSeen,
    Random,
    ExpertSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Neuron,
    Expert,
}

fn default_variance() -> f64 {
    DEFAULT_NOISE_VARIANCE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPlan {
    pub mode: PerturbationMode,
    /// Per layer: neurons to perturb (noise) or experts to allow
    /// (route restriction).
    pub targets: BTreeMap<usize, Vec<usize>>,
    #[serde(default = "default_variance")]
    pub noise_variance: f64,
    pub ranking_basis: RankingBasis,
}

impl PerturbationPlan {
    pub fn noise(targets: BTreeMap<usize, Vec<usize>>, ranking_basis: RankingBasis) -> Self {
        PerturbationPlan {
            mode: PerturbationMode::Noise,
            targets,
            noise_variance: DEFAULT_NOISE_VARIANCE,
            ranking_basis,
        }
    }

    pub fn route_restrict(allow: BTreeMap<usize, Vec<usize>>, ranking_basis: RankingBasis) -> Self {
        PerturbationPlan {
            mode: PerturbationMode::RouteRestrict,
            targets: allow,
            noise_variance: DEFAULT_NOISE_VARIANCE,
            ranking_basis,
        }
    }

    pub fn layers(&self) -> Vec<usize> {
        self.targets.keys().copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            PerturbationMode::Noise => {
                if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
                    return Err(Error::Config(format!(
                        "noise variance {} must be positive",
                        self.noise_variance
                    )));
                }
            }
            PerturbationMode::RouteRestrict => {
                if let Some((l, _)) = self.targets.iter().find(|(_, v)| v.is_empty()) {
                    return Err(Error::Config(format!("empty expert allow-list for layer {l}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_json()?.as_bytes())
    }
}

/// Units of one layer ordered by their summed predictivity over the seen
/// sub-functions, highest first, lower index first on ties.
pub fn rank_targets(
    table: &PredictivityTable,
    seen: &[String],
    layer: usize,
    granularity: Granularity,
    partition: Option<&Partition>,
) -> Result<Vec<usize>> {
    if seen.is_empty() {
        return Err(Error::Input("no seen sub-functions to rank by".into()));
    }
    let expert_table;
    let source = match granularity {
        Granularity::Neuron => {
            if table.unit() != Unit::Neuron {
                return Err(Error::Input("neuron ranking needs a neuron-level table".into()));
            }
            table
        }
        Granularity::Expert => {
            let p = partition.ok_or_else(|| Error::Input("expert ranking needs a partition".into()))?;
            expert_table = expert_predictivity(table, p)?;
            &expert_table
        }
    };
    let mut score = vec![0.0; source.units(layer)?];
    for s in seen {
        for (acc, v) in score.iter_mut().zip(source.column(layer, s)?) {
            *acc += v;
        }
    }
    Ok(argsort_desc(&score))
}

/// Adds independent Gaussian draws to the targeted post-ReLU activations.
/// Values are not clamped.
pub struct NoiseHooks<'a> {
    targets: &'a BTreeMap<usize, Vec<usize>>,
    normal: Normal<f64>,
    rng: ChaCha8Rng,
}

impl<'a> NoiseHooks<'a> {
    pub fn new(plan: &'a PerturbationPlan, seed: u64) -> Result<Self> {
        if plan.mode != PerturbationMode::Noise {
            return Err(Error::Config("plan is not a noise plan".into()));
        }
        plan.validate()?;
        Ok(NoiseHooks {
            targets: &plan.targets,
            normal: Normal::new(0.0, plan.noise_variance.sqrt()).map_err(|e| Error::Config(e.to_string()))?,
            rng: rng(seed),
        })
    }
}

impl ForwardHooks for NoiseHooks<'_> {
    fn edit_activations(&mut self, layer: usize, acts: &mut Array2<f64>) {
        let Some(targets) = self.targets.get(&layer) else {
            return;
        };
        for mut row in acts.rows_mut() {
            for &n in targets {
                row[n] += self.normal.sample(&mut self.rng);
            }
        }
    }
}

fn check_noise_targets(model: &Model, plan: &PerturbationPlan) -> Result<()> {
    for (&l, ns) in &plan.targets {
        if l >= model.config.num_layers {
            return Err(Error::Input(format!("noise target layer {l} out of range")));
        }
        if let Some(&n) = ns.iter().find(|&&n| n >= model.config.d_ff) {
            return Err(Error::Input(format!("noise target neuron {n} out of range on layer {l}")));
        }
    }
    Ok(())
}

/// Final hidden states with noise injected into the plan's target neurons.
pub fn noise_forward(model: &Model, plan: &PerturbationPlan, tokens: &[u32], seed: u64) -> Result<Array2<f64>> {
    check_noise_targets(model, plan)?;
    let mut hooks = NoiseHooks::new(plan, seed)?;
    model.encode(tokens, &mut hooks)
}

/// Copy of the model whose routers may only pick the allowed experts; the
/// softmax is renormalized over the allowed set.
pub fn restrict_routing(model: &Model, allow_lists: &BTreeMap<usize, Vec<usize>>) -> Result<Model> {
    let mut out = model.clone();
    for (&layer, allowed) in allow_lists {
        let LayerKind::Routed { experts, .. } = model.config.layer_kind(layer) else {
            return Err(Error::Config(format!("layer {layer} is not a routed MoE layer")));
        };
        if allowed.is_empty() {
            return Err(Error::Config(format!("empty expert allow-list for layer {layer}")));
        }
        let mut mask = vec![false; experts];
        for &e in allowed {
            *mask
                .get_mut(e)
                .ok_or_else(|| Error::Config(format!("expert {e} out of range on layer {layer}")))? = true;
        }
        out.layers[layer].route_allow = Some(mask);
    }
    Ok(out)
}

/// Removes every routing restriction.
pub fn allow_all(model: &Model) -> Model {
    let mut out = model.clone();
    for lw in &mut out.layers {
        lw.route_allow = None;
    }
    out
}

/// Mean over tokens of the final hidden state.
fn pooled(h: &Array2<f64>) -> Vec<f64> {
    h.mean_axis(ndarray::Axis(0)).expect("non-empty sequence").to_vec()
}

/// Probe training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: 1e-3,
            learning_rate: 0.5,
            epochs: 500,
        }
    }
}

/// Frozen logistic-regression probe on standardized mean-pooled final hidden
/// states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Readout {
    /// Fits the probe on the unperturbed model by full-batch gradient
    /// descent.
    pub fn fit(model: &Model, dataset: &SubFunctionDataset, cfg: ProbeConfig) -> Result<Self> {
        dataset.validate()?;
        let feats = features(model, dataset, |_| Box::new(NoHooks))?;
        let labels: Vec<f64> = dataset.labels().iter().map(|&y| y as f64).collect();
        let d = feats[0].len();
        let n = feats.len() as f64;
        let mut center = vec![0.0; d];
        for f in &feats {
            for (c, v) in center.iter_mut().zip(f) {
                *c += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for f in &feats {
            for ((s, v), c) in scale.iter_mut().zip(f).zip(&center) {
                *s += (v - c).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        let z: Vec<Vec<f64>> = feats
            .iter()
            .map(|f| f.iter().zip(&center).zip(&scale).map(|((v, c), s)| (v - c) / s).collect())
            .collect();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..cfg.epochs {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (x, &y) in z.iter().zip(&labels) {
                let p = sigmoid(dot(&w, x) + b);
                let err = p - y;
                for (g, v) in gw.iter_mut().zip(x) {
                    *g += err * v / n;
                }
                gb += err / n;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= cfg.learning_rate * (g + cfg.l2 * *wi);
            }
            b -= cfg.learning_rate * gb;
        }
        Ok(Readout {
            weights: w,
            bias: b,
            center,
            scale,
        })
    }

    pub fn predict(&self, pooled: &[f64]) -> u8 {
        let z: f64 = pooled
            .iter()
            .zip(&self.center)
            .zip(&self.scale)
            .zip(&self.weights)
            .map(|(((v, c), s), w)| (v - c) / s * w)
            .sum();
        u8::from(z + self.bias > 0.0)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pooled final states of every instance, each computed with its own hooks.
fn features<'h>(
    model: &Model,
    dataset: &SubFunctionDataset,
    hooks: impl Fn(usize) -> Box<dyn ForwardHooks + 'h> + Sync,
) -> Result<Vec<Vec<f64>>> {
    dataset
        .instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut h = hooks(i);
            Ok(pooled(&model.encode(&inst.tokens, h.as_mut())?))
        })
        .collect()
}

fn accuracy(readout: &Readout, feats: &[Vec<f64>], dataset: &SubFunctionDataset) -> f64 {
    let correct = feats
        .iter()
        .zip(&dataset.instances)
        .filter(|(f, inst)| readout.predict(f) == inst.label)
        .count();
    correct as f64 / feats.len() as f64
}

/// Fraction of instances the frozen readout classifies correctly.
pub fn evaluate_accuracy(model: &Model, dataset: &SubFunctionDataset, readout: &Readout) -> Result<f64> {
    let feats = features(model, dataset, |_| Box::new(NoHooks))?;
    Ok(accuracy(readout, &feats, dataset))
}

/// Accuracy under activation noise. Each instance draws from its own stream
/// derived from `seed`, so the result does not depend on evaluation order.
pub fn evaluate_noise_accuracy(
    model: &Model,
    dataset: &SubFunctionDataset,
    readout: &Readout,
    plan: &PerturbationPlan,
    seed: u64,
) -> Result<f64> {
    check_noise_targets(model, plan)?;
    NoiseHooks::new(plan, seed)?;
    let feats = features(model, dataset, |i| {
        Box::new(NoiseHooks::new(plan, mix_seed(seed, i as u64)).expect("plan validated"))
    })?;
    Ok(accuracy(readout, &feats, dataset))
}

/// Mean noise accuracy over several seeds.
pub fn mean_noise_accuracy(
    model: &Model,
    dataset: &SubFunctionDataset,
    readout: &Readout,
    plan: &PerturbationPlan,
    seeds: &[u64],
) -> Result<f64> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut total = 0.0;
    for &s in seeds {
        total += evaluate_noise_accuracy(model, dataset, readout, plan, s)?;
    }
    Ok(total / seeds.len() as f64)
}

/// One accuracy measurement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationResult {
    pub condition: String,
    pub proportion: f64,
    pub seed: u64,
    pub accuracy: f64,
}

pub fn results_csv(results: &[PerturbationResult]) -> String {
    let mut out = String::from("condition,proportion,seed,accuracy\n");
    for r in results {
        writeln!(out, "{},{},{},{}", r.condition, r.proportion, r.seed, r.accuracy).expect("string write");
    }
    out
}

/// One-sided exact sign test: probability of at least `wins` successes out
/// of `trials` fair coin flips.
pub fn sign_test_pvalue(wins: usize, trials: usize) -> f64 {
    let mut choose = 1.0f64;
    let mut tail = 0.0;
    for k in 0..=trials {
        if k > 0 {
            choose *= (trials - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            tail += choose;
        }
    }
    tail / 2f64.powi(trials as i32)
}
