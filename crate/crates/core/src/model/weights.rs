use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};

use super::config::{LayerKind, Mixing, ModelConfig};
use crate::error::{Error, Result};
use crate::util::{rng, to_f32_grid};

/// Self-attention projections, each `[d_model × d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

/// Parameters of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attention: Option<AttentionWeights>,
    /// Input projection `[d_ff × d_model]`; row `i` belongs to neuron `i`.
    pub w_in: Array2<f64>,
    /// Output projection `[d_model × d_ff]`; column `i` belongs to neuron `i`.
    pub w_out: Array2<f64>,
    pub b_in: Option<Array1<f64>>,
    pub b_out: Option<Array1<f64>>,
    /// Router `[E × d_model]`, routed MoE layers only.
    pub gate: Option<Array2<f64>>,
    /// Experts the router may select; `None` means all.
    pub route_allow: Option<Vec<bool>>,
}

/// A ReLU encoder with a masked-token prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// Token embeddings `[vocab × d_model]`.
    pub embed: Array2<f64>,
    /// Prediction head `[vocab × d_model]`.
    pub lm_head: Array2<f64>,
    pub layers: Vec<LayerWeights>,
}

impl Model {
    /// Gaussian fan-in initialization, rounded to the f32 grid so that
    /// checkpoints round-trip exactly.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut config = config;
        config.init_seed = seed;
        config.validate()?;
        let mut r = rng(seed);
        let d = config.d_model;
        let dff = config.d_ff;
        let gauss = |rows: usize, cols: usize, std: f64, r: &mut rand_chacha::ChaCha8Rng| {
            let n = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_fn((rows, cols), |_| to_f32_grid(n.sample(r)))
        };
        let embed = gauss(config.vocab_size, d, 1.0, &mut r);
        let lm_head = gauss(config.vocab_size, d, 1.0 / (d as f64).sqrt(), &mut r);
        let mut layers = Vec::with_capacity(config.num_layers);
        for layer in 0..config.num_layers {
            let attention = match config.mixing {
                Mixing::Attention { .. } => {
                    let s = 1.0 / (d as f64).sqrt();
                    Some(AttentionWeights {
                        wq: gauss(d, d, s, &mut r),
                        wk: gauss(d, d, s, &mut r),
                        wv: gauss(d, d, s, &mut r),
                        wo: gauss(d, d, s, &mut r),
                    })
                }
                _ => None,
            };
            let w_in = gauss(dff, d, 1.0 / (d as f64).sqrt(), &mut r);
            let w_out = gauss(d, dff, 1.0 / (dff as f64).sqrt(), &mut r);
            let gate = match config.layer_kind(layer) {
                LayerKind::Routed { experts, .. } => Some(gauss(experts, d, 1.0 / (d as f64).sqrt(), &mut r)),
                _ => None,
            };
            let (b_in, b_out) = if config.use_bias {
                (Some(Array1::zeros(dff)), Some(Array1::zeros(d)))
            } else {
                (None, None)
            };
            layers.push(LayerWeights {
                attention,
                w_in,
                w_out,
                b_in,
                b_out,
                gate,
                route_allow: None,
            });
        }
        Ok(Model {
            config,
            embed,
            lm_head,
            layers,
        })
    }

    /// A model with the same structure and every parameter set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_params_mut(|_, p| p.fill(0.0));
        z
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerWeights> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::Input(format!("layer {layer} out of range ({} layers)", self.layers.len())))
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, p| n += p.len());
        n
    }

    /// Visits every parameter tensor as a flat row-major slice, in a fixed
    /// order that also defines the checkpoint layout.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &[f64])) {
        f("embed", self.embed.as_slice().expect("standard layout"));
        f("lm_head", self.lm_head.as_slice().expect("standard layout"));
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(a) = &l.attention {
                f(&format!("layers.{i}.attn.wq"), a.wq.as_slice().expect("standard layout"));
                f(&format!("layers.{i}.attn.wk"), a.wk.as_slice().expect("standard layout"));
                f(&format!("layers.{i}.attn.wv"), a.wv.as_slice().expect("standard layout"));
                f(&format!("layers.{i}.attn.wo"), a.wo.as_slice().expect("standard layout"));
            }
            f(&format!("layers.{i}.w_in"), l.w_in.as_slice().expect("standard layout"));
            f(&format!("layers.{i}.w_out"), l.w_out.as_slice().expect("standard layout"));
            if let Some(b) = &l.b_in {
                f(&format!("layers.{i}.b_in"), b.as_slice().expect("standard layout"));
            }
            if let Some(b) = &l.b_out {
                f(&format!("layers.{i}.b_out"), b.as_slice().expect("standard layout"));
            }
            if let Some(g) = &l.gate {
                f(&format!("layers.{i}.gate"), g.as_slice().expect("standard layout"));
            }
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        f("embed", self.embed.as_slice_mut().expect("standard layout"));
        f("lm_head", self.lm_head.as_slice_mut().expect("standard layout"));
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Some(a) = &mut l.attention {
                f(&format!("layers.{i}.attn.wq"), a.wq.as_slice_mut().expect("standard layout"));
                f(&format!("layers.{i}.attn.wk"), a.wk.as_slice_mut().expect("standard layout"));
                f(&format!("layers.{i}.attn.wv"), a.wv.as_slice_mut().expect("standard layout"));
                f(&format!("layers.{i}.attn.wo"), a.wo.as_slice_mut().expect("standard layout"));
            }
            f(&format!("layers.{i}.w_in"), l.w_in.as_slice_mut().expect("standard layout"));
            f(&format!("layers.{i}.w_out"), l.w_out.as_slice_mut().expect("standard layout"));
            if let Some(b) = &mut l.b_in {
                f(&format!("layers.{i}.b_in"), b.as_slice_mut().expect("standard layout"));
            }
            if let Some(b) = &mut l.b_out {
                f(&format!("layers.{i}.b_out"), b.as_slice_mut().expect("standard layout"));
            }
            if let Some(g) = &mut l.gate {
                f(&format!("layers.{i}.gate"), g.as_slice_mut().expect("standard layout"));
            }
        }
    }

    /// Shapes of every tensor in `visit_params` order.
    pub(crate) fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut push = |name: String, shape: &[usize]| out.push((name, shape.to_vec()));
        push("embed".into(), self.embed.shape());
        push("lm_head".into(), self.lm_head.shape());
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(a) = &l.attention {
                push(format!("layers.{i}.attn.wq"), a.wq.shape());
                push(format!("layers.{i}.attn.wk"), a.wk.shape());
                push(format!("layers.{i}.attn.wv"), a.wv.shape());
                push(format!("layers.{i}.attn.wo"), a.wo.shape());
            }
            push(format!("layers.{i}.w_in"), l.w_in.shape());
            push(format!("layers.{i}.w_out"), l.w_out.shape());
            if let Some(b) = &l.b_in {
                push(format!("layers.{i}.b_in"), b.shape());
            }
            if let Some(b) = &l.b_out {
                push(format!("layers.{i}.b_out"), b.shape());
            }
            if let Some(g) = &l.gate {
                push(format!("layers.{i}.gate"), g.shape());
            }
        }
        out
    }

    /// Checks tensor shapes against the config and that all entries are finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let (d, dff) = (c.d_model, c.d_ff);
        let shape_err = |what: &str, got: &[usize], want: &[usize]| {
            Err(Error::Config(format!("{what}: shape {got:?}, expected {want:?}")))
        };
        if self.embed.shape() != [c.vocab_size, d] {
            return shape_err("embed", self.embed.shape(), &[c.vocab_size, d]);
        }
        if self.lm_head.shape() != [c.vocab_size, d] {
            return shape_err("lm_head", self.lm_head.shape(), &[c.vocab_size, d]);
        }
        if self.layers.len() != c.num_layers {
            return Err(Error::Config(format!(
                "{} layers present, config declares {}",
                self.layers.len(),
                c.num_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.w_in.shape() != [dff, d] {
                return shape_err(&format!("layer {i} w_in"), l.w_in.shape(), &[dff, d]);
            }
            if l.w_out.shape() != [d, dff] {
                return shape_err(&format!("layer {i} w_out"), l.w_out.shape(), &[d, dff]);
            }
            if l.b_in.is_some() != c.use_bias || l.b_out.is_some() != c.use_bias {
                return Err(Error::Config(format!("layer {i}: bias presence disagrees with config")));
            }
            if matches!(c.mixing, Mixing::Attention { .. }) != l.attention.is_some() {
                return Err(Error::Config(format!("layer {i}: attention weights disagree with mixing")));
            }
            match c.layer_kind(i) {
                LayerKind::Routed { experts, .. } => match &l.gate {
                    Some(g) if g.shape() == [experts, d] => {}
                    Some(g) => return shape_err(&format!("layer {i} gate"), g.shape(), &[experts, d]),
                    None => return Err(Error::Config(format!("layer {i}: MoE layer without router"))),
                },
                _ if l.gate.is_some() => {
                    return Err(Error::Config(format!("layer {i}: router on a non-routed layer")));
                }
                _ => {}
            }
            if let Some(allow) = &l.route_allow {
                if allow.len() != c.num_experts || !allow.iter().any(|&a| a) {
                    return Err(Error::Config(format!("layer {i}: invalid routing allow-list")));
                }
            }
        }
        let mut finite = true;
        self.visit_params(|_, p| finite &= p.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Config("non-finite weight".into()));
        }
        Ok(())
    }

    /// Rounds every parameter to the nearest f32.
    pub fn round_to_f32(&mut self) {
        self.visit_params_mut(|_, p| p.iter_mut().for_each(|v| *v = to_f32_grid(*v)));
    }
}
