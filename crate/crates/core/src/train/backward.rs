use ndarray::{s, Array2, Axis};

use crate::error::Result;
use crate::model::{ForwardHooks, LayerCache, LayerKind, Mixing, Model, TraceOptions};

/// A token sequence with masked-token targets. Positions with a target are
/// scored; their input token is normally the mask token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input: Vec<u32>,
    pub targets: Vec<Option<u32>>,
}

impl MaskedSequence {
    pub fn masked_count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Gate weights expanded to one column per neuron.
fn expand_gates(gates: &Array2<f64>, d_ff: usize) -> Array2<f64> {
    let size = d_ff / gates.ncols();
    Array2::from_shape_fn((gates.nrows(), d_ff), |(t, j)| gates[(t, j / size)])
}

/// Adds the gradient of `Σ_masked CE / norm` for one sequence into `grad`
/// and returns the summed (unnormalized) cross-entropy.
pub(crate) fn accumulate(
    model: &Model,
    seq: &MaskedSequence,
    norm: f64,
    hooks: &mut dyn ForwardHooks,
    grad: &mut Model,
) -> Result<f64> {
    let cache = model.forward_cached(&seq.input, TraceOptions::default(), hooks)?;
    let h = &cache.output;
    let logits = h.dot(&model.lm_head.t());
    let mut d_logits = Array2::<f64>::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (t, target) in seq.targets.iter().enumerate() {
        let Some(y) = *target else { continue };
        let row = logits.row(t);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - row[y as usize];
        for (d, &z) in d_logits.row_mut(t).iter_mut().zip(row) {
            *d = (z - lse).exp() / norm;
        }
        d_logits[(t, y as usize)] -= 1.0 / norm;
    }
    grad.lm_head += &d_logits.t().dot(h);
    let mut dh = d_logits.dot(&model.lm_head);

    for l in (0..model.layers.len()).rev() {
        let lw = &model.layers[l];
        let lc = &cache.layers[l];
        let gexp = lc.gates.as_ref().map(|g| expand_gates(g, model.config.d_ff));
        let weighted = match &gexp {
            Some(g) => &lc.act * g,
            None => lc.act.clone(),
        };
        let gl = &mut grad.layers[l];
        gl.w_out += &dh.t().dot(&weighted);
        if let Some(b) = &mut gl.b_out {
            *b += &dh.sum_axis(Axis(0));
        }
        let d_weighted = dh.dot(&lw.w_out);
        let mut d_mixed = dh;
        let d_act = match &gexp {
            Some(g) => &d_weighted * g,
            None => d_weighted.clone(),
        };
        if let LayerKind::Routed { experts, .. } = model.config.layer_kind(l) {
            router_backward(model, l, lc, &d_weighted, experts, &mut d_mixed, gl.gate.as_mut().expect("router grad"));
        }
        let d_pre = ndarray::Zip::from(&d_act).and(&lc.pre).map_collect(|&d, &p| if p > 0.0 { d } else { 0.0 });
        gl.w_in += &d_pre.t().dot(&lc.mixed);
        if let Some(b) = &mut gl.b_in {
            *b += &d_pre.sum_axis(Axis(0));
        }
        d_mixed += &d_pre.dot(&lw.w_in);
        dh = mix_backward(model, l, lc, d_mixed, grad);
    }
    for (t, &tok) in seq.input.iter().enumerate() {
        let mut row = grad.embed.row_mut(tok as usize);
        row += &dh.row(t);
    }
    Ok(loss)
}

/// Backpropagates through the selected experts' softmax probabilities.
fn router_backward(
    model: &Model,
    l: usize,
    lc: &LayerCache,
    d_weighted: &Array2<f64>,
    experts: usize,
    d_mixed: &mut Array2<f64>,
    d_gate: &mut Array2<f64>,
) {
    let size = model.config.d_ff / experts;
    let probs = lc.router_probs.as_ref().expect("routed layer probabilities");
    let selection = lc.selection.as_ref().expect("routed layer selection");
    let gate = model.layers[l].gate.as_ref().expect("routed layer gate");
    let mut dz = Array2::<f64>::zeros((probs.nrows(), experts));
    for t in 0..probs.nrows() {
        let mut dp = vec![0.0; experts];
        for &e in &selection[t] {
            dp[e] = (e * size..(e + 1) * size)
                .map(|j| d_weighted[(t, j)] * lc.act[(t, j)])
                .sum();
        }
        let p = probs.row(t);
        let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
        for e in 0..experts {
            dz[(t, e)] = p[e] * (dp[e] - inner);
        }
    }
    *d_gate += &dz.t().dot(&lc.mixed);
    *d_mixed += &dz.dot(gate);
}

/// Gradient with respect to the layer input given the gradient at the
/// mixed (pre-feedforward) states.
fn mix_backward(model: &Model, l: usize, lc: &LayerCache, d_mixed: Array2<f64>, grad: &mut Model) -> Array2<f64> {
    match model.config.mixing {
        Mixing::Identity => d_mixed,
        Mixing::Mean => {
            let n = d_mixed.nrows() as f64;
            let total = d_mixed.sum_axis(Axis(0)) / n;
            d_mixed + &total
        }
        Mixing::Attention { heads } => {
            let a = model.layers[l].attention.as_ref().expect("attention weights");
            let ac = lc.attention.as_ref().expect("attention cache");
            let ga = grad.layers[l].attention.as_mut().expect("attention grads");
            let h = &lc.input;
            let dh_dim = model.config.d_model / heads;
            let scale = 1.0 / (dh_dim as f64).sqrt();
            ga.wo += &d_mixed.t().dot(&ac.z);
            let dz = d_mixed.dot(&a.wo);
            let mut dq = Array2::<f64>::zeros(ac.q.raw_dim());
            let mut dk = Array2::<f64>::zeros(ac.k.raw_dim());
            let mut dv = Array2::<f64>::zeros(ac.v.raw_dim());
            for head in 0..heads {
                let cols = s![.., head * dh_dim..(head + 1) * dh_dim];
                let p = &ac.probs[head];
                let dz_h = dz.slice(cols);
                let dp = dz_h.dot(&ac.v.slice(cols).t());
                dv.slice_mut(cols).assign(&p.t().dot(&dz_h));
                let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ds = p * &(&dp - &row_dot) * scale;
                dq.slice_mut(cols).assign(&ds.dot(&ac.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&ac.q.slice(cols)));
            }
            ga.wq += &dq.t().dot(h);
            ga.wk += &dk.t().dot(h);
            ga.wv += &dv.t().dot(h);
            d_mixed + &dq.dot(&a.wq) + &dk.dot(&a.wk) + &dv.dot(&a.wv)
        }
    }
}
