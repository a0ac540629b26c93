use ndarray::{s, Array2, Axis};

use super::config::{LayerKind, Mixing};
use super::weights::{LayerWeights, Model};
use crate::error::{Error, Result};

/// Interception points inside the forward pass.
pub trait ForwardHooks {
    /// Called with a layer's post-ReLU activations `[tokens × d_ff]` before
    /// they are projected by the output matrix.
    fn edit_activations(&mut self, _layer: usize, _acts: &mut Array2<f64>) {}

    /// Overrides the router's expert selection for one token.
    fn fixed_selection(&self, _layer: usize, _token: usize) -> Option<&[usize]> {
        None
    }
}

/// Hooks that change nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHooks;

impl ForwardHooks for NoHooks {}

/// Options controlling what a trace records.
#[derive(Debug, Clone, Copy, Default)]
pub struct TraceOptions {
    /// Record `σ(W_in·x + b_in)` rather than the bias-free `σ(W_in·x)`.
    pub bias_in_activations: bool,
}

/// Everything recorded during one encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Residual stream `[tokens × d_model]`: entry 0 is the embedding, entry
    /// `l + 1` the output of layer `l`.
    pub hidden_states: Vec<Array2<f64>>,
    /// Feedforward input of each layer (after token mixing).
    pub ffn_inputs: Vec<Array2<f64>>,
    /// Rectified neuron activations `[tokens × d_ff]` per layer, recorded
    /// before any activation hook runs.
    pub neuron_activations: Vec<Array2<f64>>,
    /// Hard top-k gate weights `[tokens × E]` on routed MoE layers.
    pub gate_weights: Vec<Option<Array2<f64>>>,
}

impl ForwardTrace {
    pub fn num_tokens(&self) -> usize {
        self.hidden_states[0].nrows()
    }

    pub fn output(&self) -> &Array2<f64> {
        self.hidden_states.last().expect("at least the embedding")
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Attention probabilities per head `[tokens × tokens]`.
    pub probs: Vec<Array2<f64>>,
    pub z: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub input: Array2<f64>,
    pub attention: Option<AttentionCache>,
    /// Feedforward input `u = input + mix(input)`.
    pub mixed: Array2<f64>,
    /// `W_in·u + b_in`.
    pub pre: Array2<f64>,
    /// Activations after hooks; these are what the output matrix sees.
    pub act: Array2<f64>,
    /// Activations as recorded for analysis (before hooks).
    pub recorded: Array2<f64>,
    /// Router softmax over allowed experts.
    pub router_probs: Option<Array2<f64>>,
    pub selection: Option<Vec<Vec<usize>>>,
    /// Per-expert weights `[tokens × E]` for routed and block layers.
    pub gates: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub embedded: Array2<f64>,
    pub output: Array2<f64>,
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Softmax over the allowed entries of `logits`; disallowed entries get 0.
pub(crate) fn masked_softmax(logits: &[f64], allow: Option<&[bool]>) -> Vec<f64> {
    let allowed = |e: usize| allow.is_none_or(|a| a[e]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(e, _)| allowed(*e))
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(e, &z)| if allowed(e) { (z - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

/// Indices of the `k` largest allowed probabilities, lower index first on ties.
pub(crate) fn top_k_experts(probs: &[f64], k: usize, allow: Option<&[bool]>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).filter(|&e| allow.is_none_or(|a| a[e])).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

impl LayerWeights {
    /// Router decision for a single feedforward input: the softmax
    /// probabilities and the hard top-k gate vector.
    pub(crate) fn route(&self, x: &[f64], top_k: usize, fixed: Option<&[usize]>) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
        let gate = self.gate.as_ref().expect("routed layer has a gate");
        let logits: Vec<f64> = gate
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        let allow = self.route_allow.as_deref();
        let probs = masked_softmax(&logits, allow);
        let selected = match fixed {
            Some(sel) => sel.to_vec(),
            None => top_k_experts(&probs, top_k, allow),
        };
        let mut gates = vec![0.0; probs.len()];
        for &e in &selected {
            gates[e] = probs[e];
        }
        (probs, selected, gates)
    }
}

impl Model {
    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.d_model {
            return Err(Error::Config(format!(
                "input has length {}, model width is {}",
                x.len(),
                self.config.d_model
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite feedforward input".into()));
        }
        Ok(())
    }

    /// Neuron activations `σ(W_in·x [+ b_in])` of one layer for one input.
    fn neuron_activations(&self, lw: &LayerWeights, x: &[f64]) -> Vec<f64> {
        lw.w_in
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let mut pre: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                if let Some(b) = &lw.b_in {
                    pre += b[i];
                }
                relu(pre)
            })
            .collect()
    }

    /// Dense feedforward as a sum over neurons: each neuron adds its
    /// activation times its output column.
    pub fn ffn_forward(&self, x: &[f64], layer: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let lw = self.layer(layer)?;
        if let LayerKind::Routed { .. } = self.config.layer_kind(layer) {
            return Err(Error::Config(format!("layer {layer} is a routed MoE layer")));
        }
        self.check_input(x)?;
        let acts = self.neuron_activations(lw, x);
        let mut out = match &lw.b_out {
            Some(b) => b.to_vec(),
            None => vec![0.0; self.config.d_model],
        };
        for (i, &a) in acts.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(lw.w_out.column(i)) {
                *o += a * w;
            }
        }
        Ok((out, acts))
    }

    /// Routed MoE layer in neuron form, `Σ_{i,j} σ(W_in[i,j]·x) α_i W_out[i][:, j]`.
    ///
    /// Activations of unselected experts are still computed and returned.
    pub fn moe_forward(&self, x: &[f64], layer: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let lw = self.layer(layer)?;
        let LayerKind::Routed { top_k, .. } = self.config.layer_kind(layer) else {
            return Err(Error::Config(format!("layer {layer} is not a routed MoE layer")));
        };
        self.check_input(x)?;
        let (_, _, gates) = lw.route(x, top_k, None);
        let (out, acts) = self.moe_with_gates_unchecked(lw, x, &gates);
        Ok((out, acts, gates))
    }

    /// MoE layer with caller-supplied expert weights (e.g. forced routing).
    pub fn moe_forward_with_gates(&self, x: &[f64], layer: usize, gates: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let lw = self.layer(layer)?;
        let LayerKind::Routed { experts, .. } = self.config.layer_kind(layer) else {
            return Err(Error::Config(format!("layer {layer} is not a routed MoE layer")));
        };
        self.check_input(x)?;
        if gates.len() != experts {
            return Err(Error::Config(format!("{} gate weights for {experts} experts", gates.len())));
        }
        Ok(self.moe_with_gates_unchecked(lw, x, gates))
    }

    fn moe_with_gates_unchecked(&self, lw: &LayerWeights, x: &[f64], gates: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let expert_size = self.config.d_ff / gates.len();
        let acts = self.neuron_activations(lw, x);
        let mut out = match &lw.b_out {
            Some(b) => b.to_vec(),
            None => vec![0.0; self.config.d_model],
        };
        for (j, &a) in acts.iter().enumerate() {
            let alpha = gates[j / expert_size];
            if a == 0.0 || alpha == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(lw.w_out.column(j)) {
                *o += a * alpha * w;
            }
        }
        (out, acts)
    }

    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        let vocab = self.config.vocab_size;
        let mut h = Array2::zeros((tokens.len(), self.config.d_model));
        for (t, &tok) in tokens.iter().enumerate() {
            if tok as usize >= vocab {
                return Err(Error::Input(format!("token id {tok} at position {t} outside vocabulary of {vocab}")));
            }
            h.row_mut(t).assign(&self.embed.row(tok as usize));
        }
        Ok(h)
    }

    /// Runs the encoder and records every layer's hidden states, neuron
    /// activations and gate weights.
    pub fn encoder_forward(&self, tokens: &[u32]) -> Result<ForwardTrace> {
        self.trace_with(tokens, TraceOptions::default(), &mut NoHooks)
    }

    pub fn trace_with(&self, tokens: &[u32], opts: TraceOptions, hooks: &mut dyn ForwardHooks) -> Result<ForwardTrace> {
        let cache = self.forward_cached(tokens, opts, hooks)?;
        let mut hidden_states = Vec::with_capacity(cache.layers.len() + 1);
        hidden_states.push(cache.embedded);
        let mut ffn_inputs = Vec::with_capacity(cache.layers.len());
        let mut neuron_activations = Vec::with_capacity(cache.layers.len());
        let mut gate_weights = Vec::with_capacity(cache.layers.len());
        let n = cache.layers.len();
        for (i, lc) in cache.layers.into_iter().enumerate() {
            if i > 0 {
                hidden_states.push(lc.input);
            }
            ffn_inputs.push(lc.mixed);
            neuron_activations.push(lc.recorded);
            gate_weights.push(lc.router_probs.is_some().then_some(lc.gates).flatten());
            if i + 1 == n {
                hidden_states.push(cache.output.clone());
            }
        }
        Ok(ForwardTrace {
            hidden_states,
            ffn_inputs,
            neuron_activations,
            gate_weights,
        })
    }

    /// Final hidden states only.
    pub fn encode(&self, tokens: &[u32], hooks: &mut dyn ForwardHooks) -> Result<Array2<f64>> {
        Ok(self.forward_cached(tokens, TraceOptions::default(), hooks)?.output)
    }

    pub(crate) fn forward_cached(
        &self,
        tokens: &[u32],
        opts: TraceOptions,
        hooks: &mut dyn ForwardHooks,
    ) -> Result<ForwardCache> {
        let embedded = self.embed_tokens(tokens)?;
        let mut h = embedded.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, lw) in self.layers.iter().enumerate() {
            let (mixed, attention) = self.mix(lw, &h);
            let mut pre = mixed.dot(&lw.w_in.t());
            let recorded_bias_free = match (&lw.b_in, opts.bias_in_activations) {
                (Some(_), false) => Some(pre.mapv(relu)),
                _ => None,
            };
            if let Some(b) = &lw.b_in {
                pre += b;
            }
            let act_clean = pre.mapv(relu);
            let recorded = recorded_bias_free.unwrap_or_else(|| act_clean.clone());
            let mut act = act_clean;
            hooks.edit_activations(l, &mut act);

            let (router_probs, selection, gates) = match self.config.layer_kind(l) {
                LayerKind::Dense => (None, None, None),
                LayerKind::Blocks { experts } => (None, None, Some(Array2::ones((tokens.len(), experts)))),
                LayerKind::Routed { experts, top_k } => {
                    let mut probs = Array2::zeros((tokens.len(), experts));
                    let mut gates = Array2::zeros((tokens.len(), experts));
                    let mut sel = Vec::with_capacity(tokens.len());
                    for t in 0..tokens.len() {
                        let x = mixed.row(t).to_vec();
                        let (p, s, g) = lw.route(&x, top_k, hooks.fixed_selection(l, t));
                        probs.row_mut(t).assign(&ndarray::ArrayView1::from(&p));
                        gates.row_mut(t).assign(&ndarray::ArrayView1::from(&g));
                        sel.push(s);
                    }
                    (Some(probs), Some(sel), Some(gates))
                }
            };

            let weighted = match &gates {
                Some(g) => {
                    let expert_size = self.config.d_ff / g.ncols();
                    let mut w = act.clone();
                    for (mut row, grow) in w.rows_mut().into_iter().zip(g.rows()) {
                        for (j, v) in row.iter_mut().enumerate() {
                            *v *= grow[j / expert_size];
                        }
                    }
                    w
                }
                None => act.clone(),
            };
            let mut out = weighted.dot(&lw.w_out.t());
            if let Some(b) = &lw.b_out {
                out += b;
            }
            let next = &mixed + &out;
            layers.push(LayerCache {
                input: std::mem::replace(&mut h, next),
                attention,
                mixed,
                pre,
                act,
                recorded,
                router_probs,
                selection,
                gates,
            });
        }
        Ok(ForwardCache {
            layers,
            embedded,
            output: h,
        })
    }

    fn mix(&self, lw: &LayerWeights, h: &Array2<f64>) -> (Array2<f64>, Option<AttentionCache>) {
        match self.config.mixing {
            Mixing::Identity => (h.clone(), None),
            Mixing::Mean => {
                let mean = h.mean_axis(Axis(0)).expect("non-empty sequence");
                (h + &mean, None)
            }
            Mixing::Attention { heads } => {
                let a = lw.attention.as_ref().expect("attention weights present");
                let q = h.dot(&a.wq.t());
                let k = h.dot(&a.wk.t());
                let v = h.dot(&a.wv.t());
                let dh = self.config.d_model / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut z = Array2::zeros(h.raw_dim());
                let mut probs = Vec::with_capacity(heads);
                for head in 0..heads {
                    let cols = s![.., head * dh..(head + 1) * dh];
                    let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                    for mut row in scores.rows_mut() {
                        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                        row.mapv_inplace(|v| (v - max).exp());
                        let total = row.sum();
                        row /= total;
                    }
                    z.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                    probs.push(scores);
                }
                let mixed = h + &z.dot(&a.wo.t());
                (mixed, Some(AttentionCache { q, k, v, probs, z }))
            }
        }
    }
}
