use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use modscope::partition::random_partition;
use modscope::planted::{planted_model, synth_planted_suite, PlantedConfig};
use modscope::predictivity::{
    activation_records, average_precision, bidirectional_ap, build_table, expert_predictivity, sequence_activations,
};
use modscope::{ActivationRecord, ExportManifest, FunctionCategory, FunctionSuite, Instance, Model, ModelConfig, PredictivityTable, SubFunctionDataset, Unit};
use ndarray::{arr2, Array2};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// threshold sweep: predicted positive = score >= t for each distinct t
fn ap_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let (mut prev_r, mut ap) = (0.0, 0.0);
    for t in ts {
        let sel: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = sel.iter().filter(|&&i| labels[i] == 1).count() as f64;
        let r = tp / pos;
        ap += (r - prev_r) * tp / sel.len() as f64;
        prev_r = r;
    }
    ap
}

#[test]
fn documented_ap_values() {
    assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
    assert_abs_diff_eq!(average_precision(&[0.9, 0.7, 0.6, 0.2], &[1, 0, 1, 0]).unwrap(), 5.0 / 6.0, epsilon = 1e-12);
    assert_abs_diff_eq!(average_precision(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap(), 5.0 / 12.0, epsilon = 1e-12);
    let b = bidirectional_ap(&[0.9, 0.7, 0.6, 0.2], &[1, 0, 1, 0]).unwrap();
    assert_abs_diff_eq!(b.ap, 5.0 / 6.0, epsilon = 1e-12);
    assert_abs_diff_eq!(b.reverse, 0.5, epsilon = 1e-12);
    assert_eq!(bidirectional_ap(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap().ap, 1.0);
}

#[test]
fn constant_scores_are_flagged() {
    let b = bidirectional_ap(&[0.3, 0.3], &[1, 0]).unwrap();
    assert!(b.degenerate);
    assert_eq!(b.forward, 0.5);
    assert_eq!(b.reverse, 0.5);
    assert!(average_precision(&[0.1, 0.2], &[1, 1]).is_err());
    assert!(average_precision(&[0.1], &[1, 0]).is_err());
}

#[test]
fn sequence_max_over_tokens() {
    let mut m = Model::init(ModelConfig::dense(4, 1, 1, 1).with_mixing(modscope::Mixing::Identity), 0).unwrap();
    m.embed = arr2(&[[0.0], [0.3], [0.9], [-1.0]]);
    m.layers[0].w_in = arr2(&[[1.0]]);
    let d = SubFunctionDataset {
        id: "s".into(),
        category: FunctionCategory::Custom,
        instances: vec![
            Instance { tokens: vec![0, 1, 2], label: 1 },
            Instance { tokens: vec![3], label: 0 },
            Instance { tokens: vec![1], label: 0 },
        ],
    };
    let traces: Vec<_> = d.instances.iter().map(|i| m.encoder_forward(&i.tokens).unwrap()).collect();
    let rec = sequence_activations(&d, &traces, 0).unwrap();
    assert_eq!(rec.activations.column(0).to_vec(), vec![0.9, 0.0, 0.3]);
    assert_eq!(rec.labels, vec![1, 0, 0]);
    assert!(sequence_activations(&d, &traces[..2], 0).is_err());
}

fn random_suite(seed: u64, n_sf: usize, vocab: u32) -> FunctionSuite {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let subs = (0..n_sf)
        .map(|s| SubFunctionDataset {
            id: format!("r{s}"),
            category: FunctionCategory::ALL[s % 4],
            instances: (0..12)
                .map(|i| Instance {
                    tokens: (0..r.random_range(1..6)).map(|_| r.random_range(0..vocab)).collect(),
                    label: (i % 2) as u8,
                })
                .collect(),
        })
        .collect();
    FunctionSuite::new(subs).unwrap()
}

#[test]
fn records_match_token_scan() {
    let m = Model::init(ModelConfig::dense(20, 2, 6, 10).with_mixing(modscope::Mixing::Mean), 5).unwrap();
    let suite = random_suite(1, 2, 20);
    let recs = activation_records(&m, &suite.sub_functions[0], &[0, 1]).unwrap();
    assert_eq!(recs.len(), 2);
    for rec in &recs {
        for (i, inst) in suite.sub_functions[0].instances.iter().enumerate() {
            let t = m.encoder_forward(&inst.tokens).unwrap();
            let acts = &t.neuron_activations[rec.layer];
            for j in 0..10 {
                let mut best = 0.0f64;
                for k in 0..inst.tokens.len() {
                    if acts[(k, j)] > best {
                        best = acts[(k, j)];
                    }
                }
                assert_eq!(rec.activations[(i, j)], best);
            }
        }
    }
}

#[test]
fn table_cardinality_and_range() {
    let m = Model::init(ModelConfig::dense(20, 2, 6, 8), 2).unwrap();
    let suite = random_suite(4, 1, 20);
    let t = build_table(&m, &suite, &[0, 1]).unwrap();
    assert_eq!(t.layer_ids(), vec![0, 1]);
    let entries: usize = t.layer_ids().iter().map(|&l| t.layer(l).unwrap().len()).sum();
    assert_eq!(entries, 16);
    assert_eq!(t.to_csv().lines().count(), 17);
    assert!(t.to_csv().starts_with("layer,neuron,sub_function,ap\n"));
    for l in [0, 1] {
        assert!(t.layer(l).unwrap().iter().all(|&v| (0.5..=1.0).contains(&v)));
    }
}

#[test]
fn table_ignores_instance_order() {
    let m = Model::init(ModelConfig::dense(20, 2, 6, 12).with_mixing(modscope::Mixing::Mean), 9).unwrap();
    let suite = random_suite(7, 3, 20);
    let mut shuffled = suite.clone();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for sf in &mut shuffled.sub_functions {
        sf.instances.shuffle(&mut r);
    }
    let a = build_table(&m, &suite, &[0, 1]).unwrap();
    let b = build_table(&m, &shuffled, &[0, 1]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn planted_neurons_reach_one_and_others_hover_near_half() {
    let cfg = PlantedConfig::single(4, vec![3, 9], 1);
    let (model, truth) = planted_model(&cfg).unwrap();
    let (suite, _) = synth_planted_suite(&cfg, 21).unwrap();
    let t = build_table(&model, &suite, &[1]).unwrap();
    for id in suite.ids() {
        let col = t.column(1, &id).unwrap();
        let planted: Vec<usize> = truth.neurons[&id].iter().map(|n| n.neuron).collect();
        for &n in &planted {
            assert_eq!(col[n], 1.0, "{id} neuron {n}");
        }
        let others: Vec<f64> = (0..col.len()).filter(|j| !planted.contains(j)).map(|j| col[j]).collect();
        let mean = others.iter().sum::<f64>() / others.len() as f64;
        assert!(mean < 0.75, "{id}: mean unplanted predictivity {mean}");
    }
}

#[test]
fn record_file_contract() {
    // writer independent of the library: magic, u32 version, u64 header length,
    // JSON header, u8 labels, f32 LE row-major
    let header = br#"{"sub_function":"sense-07","layer":3,"instances":2,"d_ff":3}"#;
    let mut bytes = b"MSACTREC".to_vec();
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header);
    bytes.extend_from_slice(&[1, 0]);
    for v in [0.5f32, 0.0, 2.25, 1.0, 0.125, 0.0] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rec.bin");
    std::fs::write(&p, &bytes).unwrap();
    let rec = ActivationRecord::load(&p).unwrap();
    assert_eq!(rec.sub_function, "sense-07");
    assert_eq!(rec.layer, 3);
    assert_eq!(rec.labels, vec![1, 0]);
    assert_eq!(rec.activations, arr2(&[[0.5, 0.0, 2.25], [1.0, 0.125, 0.0]]));
    assert_eq!(rec.to_bytes().unwrap(), bytes);

    let mut neg = bytes.clone();
    let at = neg.len() - 4;
    neg[at..].copy_from_slice(&(-1.0f32).to_le_bytes());
    assert!(ActivationRecord::from_bytes(&neg).is_err());
    assert!(ActivationRecord::from_bytes(&bytes[..bytes.len() - 2]).is_err());
}

#[test]
fn table_from_records_matches_build() {
    let m = Model::init(ModelConfig::dense(20, 2, 6, 8), 31).unwrap();
    let suite = random_suite(8, 2, 20);
    let mut recs = Vec::new();
    for sf in &suite.sub_functions {
        for r in activation_records(&m, sf, &[0, 1]).unwrap() {
            recs.push(ActivationRecord::from_bytes(&r.to_bytes().unwrap()).unwrap());
        }
    }
    let from = PredictivityTable::from_records(&recs).unwrap();
    let direct = build_table(&m, &suite, &[0, 1]).unwrap();
    assert_eq!(from.sub_functions(), direct.sub_functions());
    for l in [0, 1] {
        assert_eq!(from.layer(l).unwrap(), direct.layer(l).unwrap());
    }
}

#[test]
fn export_manifest_contract() {
    let m = Model::init(ModelConfig::dense(20, 2, 6, 8), 32).unwrap();
    let suite = random_suite(9, 2, 20);
    let dir = tempfile::tempdir().unwrap();
    suite.save(dir.path().join("suite.jsonl")).unwrap();
    let mut outputs = Vec::new();
    for sf in &suite.sub_functions {
        for r in activation_records(&m, sf, &[0, 1]).unwrap() {
            let name = format!("{}_L{}.msrec", r.sub_function, r.layer);
            r.save(dir.path().join(&name)).unwrap();
            outputs.push(format!("\"{name}\""));
        }
    }
    // as an external exporter would write it
    let text = format!(
        r#"{{"model_id": "toy/enc", "layers": [0, 1], "d_ff": {{"0": 8, "1": 8}}, "suite": "suite.jsonl",
        "outputs": [{}], "dtype": "float32", "tool_versions": {{"exporter": "0.1"}}}}"#,
        outputs.join(", ")
    );
    std::fs::write(dir.path().join("manifest.json"), &text).unwrap();
    let man = ExportManifest::load(dir.path().join("manifest.json")).unwrap();
    assert_eq!(man.suite, dir.path().join("suite.jsonl"));
    let recs = man.load_records().unwrap();
    let loaded = FunctionSuite::load(&man.suite).unwrap();
    man.check_against(&loaded, &recs).unwrap();
    assert_eq!(PredictivityTable::from_records(&recs).unwrap(), build_table(&m, &suite, &[0, 1]).unwrap());
    assert_eq!(ExportManifest::from_json(&man.to_json().unwrap()).unwrap(), man);

    assert!(ExportManifest::from_json(&text.replace("float32", "float16")).is_err());
    assert!(ExportManifest::from_json(&text.replace(r#""1": 8"#, r#""2": 8"#)).is_err());
    let mut wide = man.clone();
    wide.d_ff.insert(1, 16);
    assert!(wide.load_records().is_err());
    assert!(man.check_against(&loaded, &recs[1..]).is_err());
    let mut dup = recs.clone();
    dup[1] = dup[0].clone();
    assert!(man.check_against(&loaded, &dup).is_err());
    let mut relabeled = recs.clone();
    relabeled[0].labels.reverse();
    relabeled[0].labels[0] ^= 1;
    assert!(man.check_against(&loaded, &relabeled).is_err());
}

fn random_table(seed: u64, d_ff: usize, n_sf: usize) -> PredictivityTable {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..n_sf).map(|i| format!("s{i}")).collect();
    let layers = (0..2)
        .map(|l| (l, Array2::from_shape_fn((d_ff, n_sf), |_| r.random_range(0.5..1.0))))
        .collect();
    PredictivityTable::from_parts(Unit::Neuron, ids, layers).unwrap()
}

#[test]
fn table_binary_round_trip() {
    let t = random_table(3, 16, 5);
    let back = PredictivityTable::from_bytes(&t.to_bytes().unwrap()).unwrap();
    assert_eq!(back, t);
    let dir = tempfile::tempdir().unwrap();
    t.save(dir.path().join("t.bin")).unwrap();
    assert_eq!(PredictivityTable::load(dir.path().join("t.bin")).unwrap(), t);
}

#[test]
fn expert_means() {
    let layers = BTreeMap::from([(0, arr2(&[[0.6], [0.8], [0.5], [0.9]]))]);
    let t = PredictivityTable::from_parts(Unit::Neuron, vec!["a".into()], layers).unwrap();
    let p = modscope::Partition::new(2, modscope::Provenance::Random, BTreeMap::from([(0, vec![0, 0, 1, 1])])).unwrap();
    let e = expert_predictivity(&t, &p).unwrap();
    assert_eq!(e.unit(), Unit::Expert);
    assert_abs_diff_eq!(e.get(0, 0, 0).unwrap(), 0.7, epsilon = 1e-12);
    assert_abs_diff_eq!(e.get(0, 1, 0).unwrap(), 0.7, epsilon = 1e-12);

    let single = modscope::Partition::new(4, modscope::Provenance::Random, BTreeMap::from([(0, vec![0, 1, 2, 3])])).unwrap();
    assert_eq!(expert_predictivity(&t, &single).unwrap().layer(0).unwrap(), t.layer(0).unwrap());

    let wrong = random_partition(&[5], 4, 2, 0).unwrap();
    assert!(expert_predictivity(&t, &wrong).is_err());
}

#[test]
fn expert_means_match_direct_average() {
    let t = random_table(11, 32, 4);
    let p = random_partition(&[0, 1], 32, 8, 5).unwrap();
    let e = expert_predictivity(&t, &p).unwrap();
    for l in [0, 1] {
        let a = p.assignment(l).unwrap();
        for ex in 0..8 {
            for s in 0..4 {
                let mut sum = 0.0;
                let mut n = 0;
                for (neuron, &owner) in a.iter().enumerate() {
                    if owner == ex {
                        sum += t.get(l, neuron, s).unwrap();
                        n += 1;
                    }
                }
                assert_abs_diff_eq!(e.get(l, ex, s).unwrap(), sum / n as f64, epsilon = 1e-12);
            }
        }
    }
}

fn distinct_scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..9).prop_flat_map(|n| {
        (
            any::<u64>().prop_map(move |seed| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let mut v: Vec<f64> = (0..n).map(|i| i as f64 + r.random_range(0.0..0.5)).collect();
                v.shuffle(&mut r);
                v
            }),
            prop::collection::vec(0u8..2, n),
        )
            .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
    })
}

fn tied_scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..12).prop_flat_map(|n| {
        (prop::collection::vec(0u8..4, n).prop_map(|v| v.into_iter().map(f64::from).collect()), prop::collection::vec(0u8..2, n))
            .prop_filter("both classes", |(_, l): &(Vec<f64>, Vec<u8>)| l.contains(&0) && l.contains(&1))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ap_matches_enumeration((s, l) in distinct_scores_and_labels()) {
        let ap = average_precision(&s, &l).unwrap();
        prop_assert!((ap - ap_oracle(&s, &l)).abs() < 1e-12);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let b = bidirectional_ap(&s, &l).unwrap();
        prop_assert!((b.ap - ap_oracle(&s, &l).max(ap_oracle(&neg, &l))).abs() < 1e-12);
    }

    #[test]
    fn ties_match_threshold_enumeration((s, l) in tied_scores_and_labels()) {
        prop_assert!((average_precision(&s, &l).unwrap() - ap_oracle(&s, &l)).abs() < 1e-12);
    }

    #[test]
    fn negation_symmetry((s, l) in tied_scores_and_labels()) {
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert_eq!(bidirectional_ap(&s, &l).unwrap().ap, bidirectional_ap(&neg, &l).unwrap().ap);
    }

    #[test]
    fn monotone_maps_keep_ap((s, l) in distinct_scores_and_labels(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let base = average_precision(&s, &l).unwrap();
        let aff: Vec<f64> = s.iter().map(|v| a * v + b).collect();
        let ex: Vec<f64> = s.iter().map(|v| (v / 4.0).exp()).collect();
        prop_assert_eq!(average_precision(&aff, &l).unwrap(), base);
        prop_assert_eq!(average_precision(&ex, &l).unwrap(), base);
    }

    #[test]
    fn ap_ignores_instance_order((s, l) in tied_scores_and_labels(), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let s2: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
        let l2: Vec<u8> = idx.iter().map(|&i| l[i]).collect();
        prop_assert_eq!(bidirectional_ap(&s, &l).unwrap().ap, bidirectional_ap(&s2, &l2).unwrap().ap);
    }

    #[test]
    fn bidirectional_range((s, l) in distinct_scores_and_labels()) {
        let b = bidirectional_ap(&s, &l).unwrap();
        prop_assert!(b.ap <= 1.0 && b.ap >= b.forward && b.ap >= b.reverse);
        if !b.degenerate {
            prop_assert!(b.ap >= 0.5);
        }
    }

    #[test]
    fn size_weighted_expert_mean_is_neuron_mean(seed in any::<u64>(), e_pow in 0u32..4) {
        let experts = 1usize << e_pow;
        let t = random_table(seed, 16, 3);
        let p = random_partition(&[0, 1], 16, experts, seed ^ 1).unwrap();
        let e = expert_predictivity(&t, &p).unwrap();
        for l in [0, 1] {
            for s in 0..3 {
                let neuron_mean = t.layer(l).unwrap().column(s).mean().unwrap();
                let weighted: f64 = (0..experts).map(|x| e.get(l, x, s).unwrap() * p.expert_size() as f64).sum::<f64>() / 16.0;
                prop_assert!((neuron_mean - weighted).abs() < 1e-12);
            }
        }
    }
}
