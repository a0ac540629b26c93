use approx::assert_abs_diff_eq;
use modscope::model::{ForwardHooks, NoHooks, TraceOptions};
use modscope::{Mixing, Model, ModelConfig};
use ndarray::{arr1, arr2, Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> Model {
    let mut m = Model::init(ModelConfig::dense(3, 1, 1, 1).with_mixing(Mixing::Identity), 0).unwrap();
    m.layers[0].w_in = arr2(&[[2.0]]);
    m.layers[0].w_out = arr2(&[[3.0]]);
    m
}

// matrix form: W_out · relu(W_in · x + b_in) + b_out
fn ffn_oracle(m: &Model, layer: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let lw = &m.layers[layer];
    let mut h = lw.w_in.dot(&Array1::from(x.to_vec()));
    if let Some(b) = &lw.b_in {
        h += b;
    }
    let a = h.mapv(|v| v.max(0.0));
    let mut y = lw.w_out.dot(&a);
    if let Some(b) = &lw.b_out {
        y += b;
    }
    (y.to_vec(), a.to_vec())
}

fn random_x(d: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..d).map(|_| r.random_range(-2.0..2.0)).collect()
}

#[test]
fn single_neuron_example() {
    let (out, acts) = tiny().ffn_forward(&[1.0], 0).unwrap();
    assert_eq!(acts, vec![2.0]);
    assert_eq!(out, vec![6.0]);
}

#[test]
fn zero_input_gives_zero_output_without_bias() {
    let m = Model::init(ModelConfig::dense(5, 1, 4, 8), 3).unwrap();
    let (out, acts) = m.ffn_forward(&[0.0; 4], 0).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
    assert!(acts.iter().all(|&v| v == 0.0));
}

#[test]
fn dense_matches_matrix_form() {
    for seed in 0..20 {
        let m = Model::init(ModelConfig::dense(5, 1, 4, 8).with_bias(seed % 2 == 0), seed).unwrap();
        let x = random_x(4, 100 + seed);
        let (out, acts) = m.ffn_forward(&x, 0).unwrap();
        let (eo, ea) = ffn_oracle(&m, 0, &x);
        for (a, b) in out.iter().zip(&eo) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        for (a, b) in acts.iter().zip(&ea) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}

#[test]
fn moe_forced_gates_use_one_expert() {
    let m = Model::init(ModelConfig::dense(5, 1, 4, 8).with_moe([0], 2, 1), 11).unwrap();
    let x = random_x(4, 5);
    let (out, acts) = m.moe_forward_with_gates(&x, 0, &[1.0, 0.0]).unwrap();
    let lw = &m.layers[0];
    let mut expect = vec![0.0; 4];
    for j in 0..4 {
        for o in 0..4 {
            expect[o] += acts[j] * lw.w_out[[o, j]];
        }
    }
    for (a, b) in out.iter().zip(&expect) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn moe_equal_gates_is_scaled_dense() {
    let m = Model::init(ModelConfig::dense(5, 1, 4, 8).with_moe([0], 4, 2), 12).unwrap();
    let x = random_x(4, 6);
    let (out, _) = m.moe_forward_with_gates(&x, 0, &[0.5; 4]).unwrap();
    let (dense, _) = ffn_oracle(&m, 0, &x);
    for (a, b) in out.iter().zip(&dense) {
        assert_abs_diff_eq!(*a, 0.5 * b, epsilon = 1e-12);
    }
}

#[test]
fn moe_top1_matches_expert_form() {
    let m = Model::init(ModelConfig::dense(5, 1, 4, 8).with_moe([0], 4, 1), 13).unwrap();
    for s in 0..10 {
        let x = random_x(4, 200 + s);
        let (out, _, gates) = m.moe_forward(&x, 0).unwrap();
        let lw = &m.layers[0];
        let logits = lw.gate.as_ref().unwrap().dot(&arr1(&x));
        let mx = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        let best = (0..4).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
        let p = (logits[best] - mx).exp() / z;
        assert_eq!(gates.iter().filter(|&&g| g != 0.0).count(), 1);
        assert_abs_diff_eq!(gates[best], p, epsilon = 1e-12);
        let mut expect = vec![0.0; 4];
        for j in best * 2..best * 2 + 2 {
            let a = lw.w_in.row(j).dot(&arr1(&x)).max(0.0);
            for o in 0..4 {
                expect[o] += p * a * lw.w_out[[o, j]];
            }
        }
        for (a, b) in out.iter().zip(&expect) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}

#[test]
fn length_one_sequence_is_residual_plus_ffn() {
    let m = Model::init(ModelConfig::dense(7, 2, 4, 8).with_mixing(Mixing::Identity), 21).unwrap();
    let t = m.encoder_forward(&[3]).unwrap();
    for l in 0..2 {
        let x = t.hidden_states[l].row(0).to_vec();
        assert_eq!(t.ffn_inputs[l].row(0).to_vec(), x);
        let (f, _) = m.ffn_forward(&x, l).unwrap();
        for (a, (r, y)) in t.hidden_states[l + 1].row(0).iter().zip(x.iter().zip(&f)) {
            assert_abs_diff_eq!(*a, r + y, epsilon = 1e-12);
        }
    }
}

#[test]
fn trace_is_deterministic_with_expected_shapes() {
    let cfg = ModelConfig::dense(11, 3, 6, 12).with_moe([1], 3, 1).with_mixing(Mixing::Attention { heads: 2 });
    let m = Model::init(cfg, 4).unwrap();
    let tokens = [1, 5, 2, 9, 0];
    let a = m.encoder_forward(&tokens).unwrap();
    let b = m.encoder_forward(&tokens).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.hidden_states.len(), 4);
    assert_eq!(a.num_tokens(), 5);
    for l in 0..3 {
        assert_eq!(a.neuron_activations[l].dim(), (5, 12));
        assert!(a.neuron_activations[l].iter().all(|&v| v >= 0.0));
    }
    assert!(a.gate_weights[0].is_none() && a.gate_weights[2].is_none());
    let g = a.gate_weights[1].as_ref().unwrap();
    assert_eq!(g.dim(), (5, 3));
    for row in g.rows() {
        assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 1);
    }
    let enc = m.encode(&tokens, &mut NoHooks).unwrap();
    assert_eq!(&enc, a.output());
}

#[test]
fn rejects_out_of_vocab_and_empty() {
    let m = Model::init(ModelConfig::dense(4, 1, 2, 4), 0).unwrap();
    assert!(m.encoder_forward(&[4]).is_err());
    assert!(m.encoder_forward(&[]).is_err());
    assert!(m.ffn_forward(&[1.0], 0).is_err());
}

#[test]
fn recorded_activations_exclude_bias_by_default() {
    let mut m = Model::init(ModelConfig::dense(4, 1, 2, 4).with_bias(true).with_mixing(Mixing::Identity), 1).unwrap();
    m.layers[0].b_in = Some(Array1::from_elem(4, 10.0));
    let plain = m.encoder_forward(&[2]).unwrap();
    let x = plain.ffn_inputs[0].row(0).to_owned();
    let no_bias = m.layers[0].w_in.dot(&x).mapv(|v| v.max(0.0));
    assert_eq!(plain.neuron_activations[0].row(0).to_owned(), no_bias);
    let with = m
        .trace_with(&[2], TraceOptions { bias_in_activations: true }, &mut NoHooks)
        .unwrap();
    let biased = (m.layers[0].w_in.dot(&x) + 10.0).mapv(|v| v.max(0.0));
    assert_eq!(with.neuron_activations[0].row(0).to_owned(), biased);
    assert_eq!(with.output(), plain.output());
}

struct Zero;
impl ForwardHooks for Zero {
    fn edit_activations(&mut self, _layer: usize, acts: &mut Array2<f64>) {
        acts.fill(0.0);
    }
}

#[test]
fn zeroed_activations_leave_only_residual() {
    let m = Model::init(ModelConfig::dense(6, 2, 4, 8).with_mixing(Mixing::Identity), 2).unwrap();
    let out = m.encode(&[1, 4], &mut Zero).unwrap();
    let emb = m.embed_tokens(&[1, 4]).unwrap();
    assert_eq!(out, emb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn neuron_sum_equals_matrix_form(seed in 0u64..10_000, d in 1usize..6, mult in 1usize..4, bias in any::<bool>()) {
        let m = Model::init(ModelConfig::dense(3, 1, d, 2 * mult).with_bias(bias), seed).unwrap();
        let x = random_x(d, seed ^ 0xabc);
        let (out, _) = m.ffn_forward(&x, 0).unwrap();
        let (expect, _) = ffn_oracle(&m, 0, &x);
        for (a, b) in out.iter().zip(&expect) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn moe_is_gate_weighted_expert_sum(seed in 0u64..10_000, experts in 1usize..5, top in 1usize..3) {
        let top = top.min(experts);
        let m = Model::init(ModelConfig::dense(3, 1, 3, 2 * experts).with_moe([0], experts, top), seed).unwrap();
        let x = random_x(3, seed + 1);
        let (out, acts, gates) = m.moe_forward(&x, 0).unwrap();
        prop_assert_eq!(gates.iter().filter(|&&g| g > 0.0).count(), top);
        let lw = &m.layers[0];
        let mut expect = vec![0.0; 3];
        for e in 0..experts {
            let cols = lw.w_out.slice(ndarray::s![.., 2 * e..2 * e + 2]);
            let a = arr1(&acts[2 * e..2 * e + 2]);
            let y = cols.dot(&a);
            for o in 0..3 {
                expect[o] += gates[e] * y[o];
            }
        }
        for (a, b) in out.iter().zip(&expect) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}
