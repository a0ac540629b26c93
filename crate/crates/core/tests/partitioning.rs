use std::collections::BTreeMap;

use modscope::partition::{cluster_partition, cluster_partition_layers, moefy_model, pre_moe_partition, random_partition, unmoefy_model};
use modscope::{Error, Mixing, Model, ModelConfig, Partition, Provenance};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn forced_gate_uses_partition_members() {
    let m = Model::init(ModelConfig::dense(5, 1, 4, 8).with_moe([0], 2, 1), 3).unwrap();
    let p = pre_moe_partition(&m).unwrap();
    assert_eq!(p.members(0, 0).unwrap(), vec![0, 1, 2, 3]);
    assert_eq!(p.members(0, 1).unwrap(), vec![4, 5, 6, 7]);
    let x = [0.3, -1.2, 0.8, 0.5];
    for e in 0..2 {
        let mut gates = vec![0.0; 2];
        gates[e] = 1.0;
        let (out, acts) = m.moe_forward_with_gates(&x, 0, &gates).unwrap();
        let lw = &m.layers[0];
        let mut expect = [0.0; 4];
        for n in p.members(0, e).unwrap() {
            for o in 0..4 {
                expect[o] += acts[n] * lw.w_out[[o, n]];
            }
        }
        assert_eq!(out, expect.to_vec());
    }
}

#[test]
fn random_partition_errors_and_balance() {
    assert!(matches!(random_partition(&[0], 10, 3, 0), Err(Error::Config(_))));
    let p = random_partition(&[0], 64, 16, 4).unwrap();
    for e in 0..16 {
        assert_eq!(p.members(0, e).unwrap().len(), 4);
    }
    assert_eq!(p, random_partition(&[0], 64, 16, 4).unwrap());
    assert_ne!(p, random_partition(&[0], 64, 16, 5).unwrap());
}

#[test]
fn random_partition_is_uniform() {
    let (d_ff, e, draws) = (64usize, 16usize, 1000usize);
    let mut counts = vec![vec![0usize; e]; d_ff];
    for seed in 0..draws as u64 {
        let p = random_partition(&[0], d_ff, e, seed).unwrap();
        for (n, &x) in p.assignment(0).unwrap().iter().enumerate() {
            counts[n][x] += 1;
        }
    }
    let q = 1.0 / e as f64;
    let mean = draws as f64 * q;
    let sd = (draws as f64 * q * (1.0 - q)).sqrt();
    let cells = (d_ff * e) as f64;
    let outside3 = counts.iter().flatten().filter(|&&c| (c as f64 - mean).abs() > 3.0 * sd).count();
    let worst = counts.iter().flatten().map(|&c| (c as f64 - mean).abs() / sd).fold(0.0, f64::max);
    // a 3-sigma excursion has probability ~0.0027 per cell
    assert!((outside3 as f64) / cells < 0.01, "{outside3} of {cells} cells outside 3 sigma");
    assert!(worst < 5.0, "worst deviation {worst} sigma");
}

#[test]
fn clustering_recovers_separable_groups() {
    let (d, dff, e) = (8usize, 32usize, 4usize);
    let mut m = Model::init(ModelConfig::dense(5, 1, d, dff), 0).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let truth: Vec<usize> = (0..dff).map(|n| (n * 7 + 3) % e).collect();
    m.layers[0].w_in = Array2::from_shape_fn((dff, d), |(n, j)| {
        if j == 2 * truth[n] {
            1.0 + r.random_range(0.0..0.01)
        } else {
            0.0
        }
    });
    let (p, log) = cluster_partition(&m, 0, e, 9, 50).unwrap();
    assert_eq!(p.provenance(), Provenance::Clustered);
    let a = p.assignment(0).unwrap();
    for i in 0..dff {
        for j in 0..dff {
            assert_eq!(truth[i] == truth[j], a[i] == a[j], "neurons {i} and {j}");
        }
    }
    assert!(log.objective.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn clustering_with_singletons_is_identity() {
    let m = Model::init(ModelConfig::dense(5, 1, 4, 8), 2).unwrap();
    let (p, _) = cluster_partition(&m, 0, 8, 0, 10).unwrap();
    assert_eq!(p.assignment(0).unwrap(), &[0, 1, 2, 3, 4, 5, 6, 7]);
}

#[test]
fn clustering_is_deterministic_and_logs_monotone_objective() {
    let m = Model::init(ModelConfig::dense(5, 2, 12, 96), 6).unwrap();
    let (a, logs) = cluster_partition_layers(&m, &[0, 1], 8, 13, 50).unwrap();
    let (b, _) = cluster_partition_layers(&m, &[0, 1], 8, 13, 50).unwrap();
    assert_eq!(a, b);
    for log in logs {
        assert!(log.objective.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{:?}", log.objective);
        assert!(log.iterations <= 50);
    }
}

#[test]
fn clustering_rejects_bad_input() {
    let mut m = Model::init(ModelConfig::dense(5, 1, 4, 8), 2).unwrap();
    assert!(cluster_partition(&m, 0, 3, 0, 10).is_err());
    m.layers[0].w_in[[1, 1]] = f64::NAN;
    assert!(cluster_partition(&m, 0, 2, 0, 10).is_err());
    let moe = Model::init(ModelConfig::dense(5, 1, 4, 8).with_moe([0], 2, 1), 2).unwrap();
    assert!(cluster_partition(&moe, 0, 2, 0, 10).is_err());
}

#[test]
fn moefy_preserves_outputs_and_round_trips() {
    let cfg = ModelConfig::dense(12, 3, 6, 24).with_bias(true).with_mixing(Mixing::Attention { heads: 2 });
    let m = Model::init(cfg, 8).unwrap();
    let (p, _) = cluster_partition_layers(&m, &[0, 2], 6, 1, 20).unwrap();
    let mo = moefy_model(&m, &p).unwrap();
    assert_eq!(pre_moe_partition(&mo.model).unwrap().layer_ids(), vec![0, 2]);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let toks: Vec<u32> = (0..r.random_range(1..8)).map(|_| r.random_range(0..12)).collect();
        let a = m.encoder_forward(&toks).unwrap();
        let b = mo.model.encoder_forward(&toks).unwrap();
        for (x, y) in a.output().iter().zip(b.output().iter()) {
            assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
        }
    }
    assert_eq!(unmoefy_model(&mo).unwrap(), m);
}

#[test]
fn moefy_with_identity_partition_keeps_weights() {
    let m = Model::init(ModelConfig::dense(5, 1, 4, 8), 2).unwrap();
    let p = Partition::new(4, Provenance::Random, BTreeMap::from([(0, vec![0, 0, 1, 1, 2, 2, 3, 3])])).unwrap();
    let mo = moefy_model(&m, &p).unwrap();
    assert_eq!(mo.permutations[&0], (0..8).collect::<Vec<_>>());
    assert_eq!(mo.model.layers, m.layers);
    assert_eq!(mo.model.config.expert_blocks, BTreeMap::from([(0, 4)]));
}

#[test]
fn unbalanced_partitions_are_rejected() {
    assert!(Partition::new(2, Provenance::Random, BTreeMap::from([(0, vec![0, 0, 0, 1])])).is_err());
    assert!(Partition::new(2, Provenance::Random, BTreeMap::from([(0, vec![0, 2, 1, 1])])).is_err());
}

#[test]
fn partition_file_contract() {
    // as an external exporter would write it
    let mut text = String::from("layer,neuron,expert,provenance\n");
    for n in 0..8 {
        text.push_str(&format!("4,{n},{},pre_moe\n", n / 2));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    std::fs::write(&path, &text).unwrap();
    let p = Partition::load(&path).unwrap();
    assert_eq!(p.num_experts(), 4);
    assert_eq!(p.expert_size(), 2);
    assert_eq!(p.provenance(), Provenance::PreMoe);
    assert_eq!(p.to_csv(), text);

    let dup = text.replace("4,3,1,pre_moe", "4,2,1,pre_moe");
    assert!(Partition::from_csv(&dup, "d").is_err());
    let unbalanced = text.replace("4,3,1,pre_moe", "4,3,0,pre_moe");
    assert!(Partition::from_csv(&unbalanced, "u").is_err());
    assert!(Partition::from_csv("layer,neuron\n", "h").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partitions_are_balanced(seed in any::<u64>(), e_pow in 0u32..5, size in 1usize..6) {
        let e = 1usize << e_pow;
        let p = random_partition(&[0, 2], e * size, e, seed).unwrap();
        for l in [0, 2] {
            let sizes: Vec<usize> = (0..e).map(|x| p.members(l, x).unwrap().len()).collect();
            prop_assert!(sizes.iter().all(|&s| s == size));
        }
        let back = Partition::from_csv(&p.to_csv(), "rt").unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn moefy_round_trip_is_exact(seed in any::<u64>(), pseed in any::<u64>()) {
        let m = Model::init(ModelConfig::dense(5, 2, 4, 16).with_bias(true), seed).unwrap();
        let p = random_partition(&[0, 1], 16, 4, pseed).unwrap();
        let mo = moefy_model(&m, &p).unwrap();
        prop_assert_eq!(unmoefy_model(&mo).unwrap(), m);
    }
}
