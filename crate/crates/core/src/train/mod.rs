//! Masked-token training of toy models, producing checkpoint series.
//!
//! Gradients are computed by hand-written backpropagation in f64 and summed
//! over the batch in a fixed order. Updates use Adam, skipping entries whose
//! gradient is exactly zero, so experts that no token was routed to keep
//! their weights. Parameters are rounded to f32 after every step.

mod backward;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::CheckpointSeries;
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, ForwardHooks, Model, NoHooks, TraceOptions};
use crate::util::{mix_seed, read_maybe_gz, rng, write_file};

pub use backward::MaskedSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_probability: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Token substituted at masked positions.
    #[serde(default)]
    pub mask_token: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 16,
            learning_rate: 3e-3,
            mask_probability: 0.15,
            checkpoint_every: 25,
            seed: 0,
            mask_token: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_size and checkpoint_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.mask_probability > 0.0 && self.mask_probability < 1.0) {
            return Err(Error::Config(format!(
                "mask probability {} must lie in (0, 1)",
                self.mask_probability
            )));
        }
        Ok(())
    }
}

/// Reads a corpus with one whitespace-separated token-id sequence per line.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Validation {
        path: path.display().to_string(),
        line: 0,
        message: "corpus is not UTF-8".into(),
    })?;
    parse_corpus(&text, &path.display().to_string())
}

pub fn parse_corpus(text: &str, source: &str) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seq = line
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Validation {
                path: source.to_string(),
                line: i + 1,
                message: format!("bad token id: {e}"),
            })?;
        out.push(seq);
    }
    if out.is_empty() {
        return Err(Error::Input(format!("{source}: corpus is empty")));
    }
    Ok(out)
}

pub fn corpus_to_text(corpus: &[Vec<u32>]) -> String {
    let mut out = String::new();
    for seq in corpus {
        let line: Vec<String> = seq.iter().map(u32::to_string).collect();
        writeln!(out, "{}", line.join(" ")).expect("string write");
    }
    out
}

/// A learnable corpus: each sequence draws all its tokens from one topic's
/// block of the vocabulary, so masked tokens are predictable from context.
/// Token 0 is reserved for the mask and never emitted.
pub fn topic_corpus(vocab_size: usize, topics: usize, seq_len: usize, sequences: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if topics == 0 || vocab_size <= topics || seq_len == 0 {
        return Err(Error::Config("topic corpus needs vocab_size > topics > 0 and seq_len > 0".into()));
    }
    let per = (vocab_size - 1) / topics;
    let mut r = rng(seed);
    Ok((0..sequences)
        .map(|_| {
            let t = r.random_range(0..topics);
            (0..seq_len)
                .map(|_| (1 + t * per + r.random_range(0..per)) as u32)
                .collect()
        })
        .collect())
}

/// Masks each position with the given probability (at least one position
/// per sequence).
pub fn mask_sequence(tokens: &[u32], probability: f64, mask_token: u32, r: &mut impl Rng) -> MaskedSequence {
    let mut input = tokens.to_vec();
    let mut targets = vec![None; tokens.len()];
    for (t, &tok) in tokens.iter().enumerate() {
        if r.random::<f64>() < probability {
            targets[t] = Some(tok);
            input[t] = mask_token;
        }
    }
    if targets.iter().all(Option::is_none) && !tokens.is_empty() {
        let t = r.random_range(0..tokens.len());
        targets[t] = Some(tokens[t]);
        input[t] = mask_token;
    }
    MaskedSequence { input, targets }
}

/// Mean masked-token cross-entropy of a batch and its gradient.
pub fn loss_and_grad(model: &Model, batch: &[MaskedSequence]) -> Result<(f64, Model)> {
    loss_and_grad_with(model, batch, |_| Box::new(NoHooks))
}

fn loss_and_grad_with<'h>(
    model: &Model,
    batch: &[MaskedSequence],
    hooks: impl Fn(usize) -> Box<dyn ForwardHooks + 'h> + Sync,
) -> Result<(f64, Model)> {
    let norm = batch.iter().map(MaskedSequence::masked_count).sum::<usize>() as f64;
    if norm == 0.0 {
        return Err(Error::Input("batch has no masked positions".into()));
    }
    let parts: Vec<(f64, Model)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut g = model.zeros_like();
            let mut h = hooks(i);
            let loss = backward::accumulate(model, seq, norm, h.as_mut(), &mut g)?;
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grad = model.zeros_like();
    for (loss, g) in parts {
        total += loss;
        add_into(&mut grad, &g);
    }
    Ok((total / norm, grad))
}

/// Mean masked-token cross-entropy without gradients.
pub fn batch_loss(model: &Model, batch: &[MaskedSequence]) -> Result<f64> {
    let norm = batch.iter().map(MaskedSequence::masked_count).sum::<usize>() as f64;
    let mut total = 0.0;
    for seq in batch {
        total += sequence_loss(model, seq, &mut NoHooks)?;
    }
    Ok(total / norm)
}

fn sequence_loss(model: &Model, seq: &MaskedSequence, hooks: &mut dyn ForwardHooks) -> Result<f64> {
    let h = model.forward_cached(&seq.input, TraceOptions::default(), hooks)?.output;
    let logits = h.dot(&model.lm_head.t());
    let mut loss = 0.0;
    for (t, target) in seq.targets.iter().enumerate() {
        let Some(y) = *target else { continue };
        let row = logits.row(t);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - row[y as usize];
    }
    Ok(loss)
}

fn flatten(m: &Model) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.num_parameters());
    m.visit_params(|_, p| out.extend_from_slice(p));
    out
}

fn add_into(acc: &mut Model, g: &Model) {
    let flat = flatten(g);
    let mut off = 0;
    acc.visit_params_mut(|_, p| {
        for v in p.iter_mut() {
            *v += flat[off];
            off += 1;
        }
    });
}

/// Adam with per-entry lazy updates.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, model: &mut Model, grad: &Model) {
        self.t += 1;
        let g = flatten(grad);
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let mut off = 0;
        let (m, v, lr) = (&mut self.m, &mut self.v, self.lr);
        model.visit_params_mut(|_, p| {
            for w in p.iter_mut() {
                let gi = g[off];
                if gi != 0.0 {
                    m[off] = Self::BETA1 * m[off] + (1.0 - Self::BETA1) * gi;
                    v[off] = Self::BETA2 * v[off] + (1.0 - Self::BETA2) * gi * gi;
                    let update = lr * (m[off] / c1) / ((v[off] / c2).sqrt() + Self::EPS);
                    *w = crate::util::to_f32_grid(*w - update);
                }
                off += 1;
            }
        });
    }
}

/// Result of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// `(step, loss)` of each optimizer step's batch, before the update.
    pub losses: Vec<(u64, f64)>,
    pub checkpoint_steps: Vec<u64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (s, l) in &self.losses {
            writeln!(out, "{s},{l}").expect("string write");
        }
        out
    }
}

/// Trains in place, calling `on_checkpoint` at step 0, every
/// `checkpoint_every` steps, and after the final step.
pub fn train_with(
    model: &mut Model,
    corpus: &[Vec<u32>],
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(u64, &Model) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    model.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    if cfg.mask_token as usize >= model.config.vocab_size {
        return Err(Error::Config(format!("mask token {} outside vocabulary", cfg.mask_token)));
    }
    model.round_to_f32();
    let mut adam = Adam::new(model.num_parameters(), cfg.learning_rate);
    let mut r = rng(mix_seed(cfg.seed, 0x7a11));
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    let mut checkpoint_steps = vec![0];
    on_checkpoint(0, model)?;
    let mut order: Vec<usize> = Vec::new();
    for step in 1..=cfg.steps {
        let batch: Vec<MaskedSequence> = (0..cfg.batch_size)
            .map(|_| {
                if order.is_empty() {
                    order = (0..corpus.len()).collect();
                    order.shuffle(&mut r);
                }
                let i = order.pop().expect("refilled");
                mask_sequence(&corpus[i], cfg.mask_probability, cfg.mask_token, &mut r)
            })
            .collect();
        let (loss, grad) = loss_and_grad(model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push((step, loss));
        adam.step(model, &grad);
        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            checkpoint_steps.push(step);
            on_checkpoint(step, model)?;
        }
    }
    Ok(TrainLog {
        losses,
        checkpoint_steps,
    })
}

/// Trains and keeps every checkpoint in memory.
pub fn train_in_memory(model: &Model, corpus: &[Vec<u32>], cfg: &TrainConfig) -> Result<(Vec<(u64, Model)>, TrainLog)> {
    let mut m = model.clone();
    let mut snapshots = Vec::new();
    let log = train_with(&mut m, corpus, cfg, |s, cur| {
        snapshots.push((s, cur.clone()));
        Ok(())
    })?;
    Ok((snapshots, log))
}

/// Trains and writes `ckpt_<step>.msck` files, `series.json` and
/// `train_log.csv` into `out_dir`.
pub fn train(model: &Model, corpus: &[Vec<u32>], cfg: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<(CheckpointSeries, TrainLog)> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries: Vec<(u64, PathBuf)> = Vec::new();
    let mut m = model.clone();
    let log = train_with(&mut m, corpus, cfg, |s, cur| {
        let name = format!("ckpt_{s:08}.msck");
        save_checkpoint(cur, dir.join(&name))?;
        entries.push((s, PathBuf::from(name)));
        Ok(())
    })?;
    CheckpointSeries::new(entries.clone())?.save(dir.join("series.json"))?;
    write_file(&dir.join("train_log.csv"), log.to_csv().as_bytes())?;
    let full = entries.into_iter().map(|(s, p)| (s, dir.join(p))).collect();
    Ok((CheckpointSeries::new(full)?, log))
}

/// Holds a recorded expert selection fixed during a forward pass.
struct FixedRouting<'a> {
    selections: &'a BTreeMap<usize, Vec<Vec<usize>>>,
}

impl ForwardHooks for FixedRouting<'_> {
    fn fixed_selection(&self, layer: usize, token: usize) -> Option<&[usize]> {
        self.selections.get(&layer).map(|s| s[token].as_slice())
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Entries whose ±h stencil flipped a ReLU, where the loss is not
    /// differentiable and central differences are meaningless.
    pub kinks: usize,
}

/// Relative-error floor that keeps near-zero gradients from dividing by
/// roundoff.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// Compares analytic gradients with central differences at step `h` for
/// every parameter. Expert selections of routed layers are recorded once
/// and held fixed.
pub fn grad_check(model: &Model, batch: &[MaskedSequence], h: f64) -> Result<GradCheck> {
    let selections: Vec<BTreeMap<usize, Vec<Vec<usize>>>> = batch
        .iter()
        .map(|seq| {
            let cache = model.forward_cached(&seq.input, TraceOptions::default(), &mut NoHooks)?;
            Ok(cache
                .layers
                .iter()
                .enumerate()
                .filter_map(|(l, lc)| lc.selection.clone().map(|s| (l, s)))
                .collect())
        })
        .collect::<Result<_>>()?;
    let (_, grad) = loss_and_grad_with(model, batch, |i| Box::new(FixedRouting { selections: &selections[i] }))?;
    let analytic = flatten(&grad);
    let norm = batch.iter().map(MaskedSequence::masked_count).sum::<usize>() as f64;
    let signature = |m: &Model| -> Result<(f64, Vec<bool>)> {
        let mut loss = 0.0;
        let mut mask = Vec::new();
        for (seq, sel) in batch.iter().zip(&selections) {
            let mut hooks = FixedRouting { selections: sel };
            let cache = m.forward_cached(&seq.input, TraceOptions::default(), &mut hooks)?;
            for lc in &cache.layers {
                mask.extend(lc.pre.iter().map(|&p| p > 0.0));
            }
            let logits = cache.output.dot(&m.lm_head.t());
            for (t, target) in seq.targets.iter().enumerate() {
                let Some(y) = *target else { continue };
                let row = logits.row(t);
                let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                loss += lse - row[y as usize];
            }
        }
        Ok((loss / norm, mask))
    };
    let (_, base_mask) = signature(model)?;
    let n = analytic.len();
    let results: Vec<Option<f64>> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let perturbed = |delta: f64| {
                let mut m = model.clone();
                let mut off = 0;
                m.visit_params_mut(|_, p| {
                    if idx >= off && idx < off + p.len() {
                        p[idx - off] += delta;
                    }
                    off += p.len();
                });
                m
            };
            let (lp, mp) = signature(&perturbed(h))?;
            let (lm, mm) = signature(&perturbed(-h))?;
            if mp != base_mask || mm != base_mask {
                return Ok(None);
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[idx];
            Ok(Some((a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)))
        })
        .collect::<Result<_>>()?;
    let kinks = results.iter().filter(|r| r.is_none()).count();
    let max_relative_error = results.iter().flatten().copied().fold(0.0, f64::max);
    Ok(GradCheck {
        max_relative_error,
        checked: n - kinks,
        kinks,
    })
}
