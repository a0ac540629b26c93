use modscope::dynamics::CheckpointSeries;
use modscope::model::load_checkpoint;
use modscope::train::{
    batch_loss, grad_check, load_corpus, loss_and_grad, mask_sequence, topic_corpus, train, train_in_memory, MaskedSequence,
    TrainConfig,
};
use modscope::{Mixing, Model, ModelConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(vocab: u32, n: usize, seed: u64) -> Vec<MaskedSequence> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let toks: Vec<u32> = (0..6).map(|_| r.random_range(1..vocab)).collect();
            mask_sequence(&toks, 0.4, 0, &mut r)
        })
        .collect()
}

// Central differences through the gradient-free loss.
fn numeric(model: &Model, b: &[MaskedSequence], h: f64, set: impl Fn(&mut Model, f64)) -> f64 {
    let mut up = model.clone();
    set(&mut up, h);
    let mut down = model.clone();
    set(&mut down, -h);
    (batch_loss(&up, b).unwrap() - batch_loss(&down, b).unwrap()) / (2.0 * h)
}

#[test]
fn head_and_output_gradients_match_differences() {
    let cfg = ModelConfig::dense(14, 2, 6, 12).with_bias(true).with_mixing(Mixing::Attention { heads: 2 });
    let m = Model::init(cfg, 21).unwrap();
    let b = batch(14, 4, 1);
    let (_, g) = loss_and_grad(&m, &b).unwrap();
    let h = 1e-3;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-7);
    for (r, c) in [(1, 0), (5, 3), (13, 5)] {
        let n = numeric(&m, &b, h, |x, d| x.lm_head[(r, c)] += d);
        assert!(rel(g.lm_head[(r, c)], n) < 1e-4, "lm_head {r},{c}: {} vs {n}", g.lm_head[(r, c)]);
    }
    for (r, c) in [(0, 0), (2, 7), (5, 11)] {
        let n = numeric(&m, &b, h, |x, d| x.layers[1].w_out[(r, c)] += d);
        assert!(rel(g.layers[1].w_out[(r, c)], n) < 1e-4, "w_out {r},{c}");
    }
}

#[test]
fn grad_check_at_coarse_step() {
    let dense = ModelConfig::dense(12, 2, 6, 12).with_mixing(Mixing::Attention { heads: 3 });
    let moe = ModelConfig::dense(12, 2, 6, 12).with_bias(true).with_moe([0, 1], 4, 1);
    for cfg in [dense, moe] {
        let m = Model::init(cfg, 8).unwrap();
        let gc = grad_check(&m, &batch(12, 3, 2), 1e-3).unwrap();
        assert!(gc.max_relative_error < 1e-4, "{gc:?}");
        assert!(gc.checked > gc.kinks);
    }
}

#[test]
fn unselected_experts_get_no_gradient() {
    let m = Model::init(ModelConfig::dense(12, 1, 6, 16).with_mixing(Mixing::Mean).with_moe([0], 8, 1), 4).unwrap();
    let b = batch(12, 2, 3);
    let mut used = [false; 8];
    for seq in &b {
        let gates = m.encoder_forward(&seq.input).unwrap().gate_weights[0].clone().unwrap();
        for row in gates.rows() {
            for (e, &w) in row.iter().enumerate() {
                used[e] |= w != 0.0;
            }
        }
    }
    assert!(used.iter().any(|u| !u), "every expert was selected");
    let (_, g) = loss_and_grad(&m, &b).unwrap();
    for (e, &u) in used.iter().enumerate() {
        let rows = g.layers[0].w_in.slice(ndarray::s![e * 2..e * 2 + 2, ..]).to_owned();
        let cols = g.layers[0].w_out.slice(ndarray::s![.., e * 2..e * 2 + 2]).to_owned();
        if !u {
            assert!(rows.iter().chain(cols.iter()).all(|&v| v == 0.0), "expert {e}");
        }
    }
}

#[test]
fn zero_head_stops_encoder_gradients() {
    let mut m = Model::init(ModelConfig::dense(12, 2, 4, 8).with_mixing(Mixing::Mean), 3).unwrap();
    m.lm_head.fill(0.0);
    let (loss, g) = loss_and_grad(&m, &batch(12, 3, 4)).unwrap();
    // uniform prediction over the vocabulary
    assert!((loss - (12f64).ln()).abs() < 1e-12);
    assert!(g.embed.iter().all(|&v| v == 0.0));
    assert!(g.layers.iter().all(|l| l.w_in.iter().chain(l.w_out.iter()).all(|&v| v == 0.0)));
    assert!(g.lm_head.iter().any(|&v| v != 0.0));
}

fn setup() -> (Model, Vec<Vec<u32>>) {
    let corpus = topic_corpus(25, 4, 6, 400, 7).unwrap();
    let m = Model::init(ModelConfig::dense(25, 2, 8, 32).with_mixing(Mixing::Mean), 5).unwrap();
    (m, corpus)
}

#[test]
fn training_lowers_the_loss() {
    let (m, corpus) = setup();
    let cfg = TrainConfig {
        steps: 500,
        checkpoint_every: 100,
        seed: 2,
        ..TrainConfig::default()
    };
    let (snaps, log) = train_in_memory(&m, &corpus, &cfg).unwrap();
    assert_eq!(snaps.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 100, 200, 300, 400, 500]);
    let held_out = batch(25, 64, 99);
    let start = batch_loss(&snaps[0].1, &held_out).unwrap();
    let end = batch_loss(&snaps[5].1, &held_out).unwrap();
    assert!(end < start, "{start} -> {end}");
    let head: f64 = log.losses[..50].iter().map(|x| x.1).sum::<f64>() / 50.0;
    let tail: f64 = log.losses[450..].iter().map(|x| x.1).sum::<f64>() / 50.0;
    assert!(tail < head, "{head} -> {tail}");
    let toks = [3, 7, 2, 9];
    assert_ne!(snaps[0].1.encode(&toks, &mut modscope::model::NoHooks).unwrap(), snaps[5].1.encode(&toks, &mut modscope::model::NoHooks).unwrap());
}

#[test]
fn train_writes_series_and_log() {
    let (m, corpus) = setup();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("corpus.txt"), modscope::train::corpus_to_text(&corpus)).unwrap();
    let corpus = load_corpus(dir.path().join("corpus.txt")).unwrap();
    let cfg = TrainConfig {
        steps: 30,
        checkpoint_every: 10,
        batch_size: 4,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = dir.path().join("run");
    let (series, log) = train(&m, &corpus, &cfg, &out).unwrap();
    assert_eq!(series.steps(), vec![0, 10, 20, 30]);
    let reread = CheckpointSeries::load(out.join("series.json")).unwrap();
    assert_eq!(reread, series);
    let text = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(text, log.to_csv());
    assert!(text.starts_with("step,loss\n1,"));
    assert_eq!(text.lines().count(), 31);

    let (mem, _) = train_in_memory(&m, &corpus, &cfg).unwrap();
    for ((s, p), (t, model)) in series.entries.iter().zip(&mem) {
        assert_eq!(s, t);
        assert_eq!(&load_checkpoint(p).unwrap(), model);
    }
    let mut bad = cfg.clone();
    bad.mask_probability = 1.0;
    assert!(train_in_memory(&m, &corpus, &bad).is_err());
    assert!(train_in_memory(&m, &[], &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn training_is_seed_deterministic(seed in any::<u64>(), steps in 0u64..8) {
        let corpus = topic_corpus(15, 2, 5, 30, seed).unwrap();
        let m = Model::init(ModelConfig::dense(15, 1, 4, 8).with_mixing(Mixing::Mean), seed).unwrap();
        let cfg = TrainConfig { steps, checkpoint_every: 3, batch_size: 3, seed, ..TrainConfig::default() };
        let a = train_in_memory(&m, &corpus, &cfg).unwrap();
        let b = train_in_memory(&m, &corpus, &cfg).unwrap();
        prop_assert_eq!(a.0.len(), if steps == 0 { 1 } else { 1 + (steps as usize).div_ceil(3) });
        prop_assert_eq!(a, b);
    }
}
