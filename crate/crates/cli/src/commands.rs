use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use modscope::dynamics::{
    clustering_scores, emergence_curve, parse_similarity_csv, stabilization_curve, Level, ALL_FUNCTIONS,
};
use modscope::model::{encode_checkpoint, load_checkpoint};
use modscope::modularity::{comparison_csv, detect_functional_experts_with, ComparisonRow};
use modscope::partition::{cluster_partition_layers, pre_moe_partition, random_partition};
use modscope::perturbation::{
    evaluate_accuracy, evaluate_noise_accuracy, rank_targets, restrict_routing, results_csv, sign_test_pvalue, Granularity,
    PerturbationResult, ProbeConfig, RankingBasis,
};
use modscope::planted::{planted_model, synth_planted_suite, PlantedConfig};
use modscope::predictivity::{build_table, expert_predictivity};
use modscope::specialization::SimilaritySummary;
use modscope::train::{load_corpus, topic_corpus, train, TrainConfig};
use modscope::{
    CheckpointSeries, ExportManifest, FunctionSuite, Mixing, Model, ModelConfig, PValueMode, Partition, PerturbationPlan,
    PredictivityTable, Readout, Unit,
};

use crate::run::{invalid, Failure, Outcome, Run};
use crate::{
    ClusterScoreArgs, Command, DynamicsArgs, ExpertsArgs, PMode, PerturbArgs, PerturbMode, PredictivityArgs, SpecializeArgs,
    SynthArgs, TrainArgs,
};

pub fn run(cmd: &Command) -> Outcome {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Predictivity(a) => predictivity(a),
        Command::Specialize(a) => specialize(a),
        Command::Experts(a) => experts(a),
        Command::Perturb(a) => perturb(a),
        Command::Dynamics(a) => dynamics(a),
        Command::ClusterScore(a) => cluster_score(a),
    }?;
    Ok(())
}

fn check_fraction(name: &str, v: f64) -> Outcome {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} = {v} must lie in (0, 1]")))
    }
}

fn check_alpha(v: f64) -> Outcome {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("alpha = {v} must lie in (0, 1)")))
    }
}

fn load_suite(run: &mut Run, path: &Path) -> Outcome<FunctionSuite> {
    run.input(path)?;
    Ok(FunctionSuite::load(path)?)
}

fn load_model(run: &mut Run, path: &Path) -> Outcome<Model> {
    run.input(path)?;
    Ok(load_checkpoint(path)?)
}

fn load_table(run: &mut Run, path: &Path) -> Outcome<PredictivityTable> {
    run.input(path)?;
    Ok(PredictivityTable::load(path)?)
}

fn load_partition(run: &mut Run, path: &Path) -> Outcome<Partition> {
    run.input(path)?;
    Ok(Partition::load(path)?)
}

fn synth(a: &SynthArgs) -> Outcome {
    let mut cfg = PlantedConfig::single(a.sub_functions, a.hosts.clone(), a.layer);
    cfg.num_layers = a.num_layers;
    cfg.d_ff = a.d_ff;
    cfg.num_experts = a.experts;
    cfg.routed = a.routed;
    cfg.functions[0].neurons_per_sub_function = a.neurons_per_sub_function;
    cfg.instances_per_class = a.instances_per_class;
    cfg.strength = a.strength;
    cfg.filler_tokens = a.filler_tokens;
    cfg.model_seed = a.model_seed;
    cfg.validate()?;
    let mut run = Run::new(&a.out)?;
    let (model, truth) = planted_model(&cfg)?;
    let (suite, _) = synth_planted_suite(&cfg, a.seed)?;
    run.write("model.msck", &encode_checkpoint(&model)?)?;
    run.write("suite.jsonl", suite.to_jsonl().as_bytes())?;
    if let Some(s) = a.eval_seed {
        let (eval, _) = synth_planted_suite(&cfg, s)?;
        run.write("eval_suite.jsonl", eval.to_jsonl().as_bytes())?;
    }
    run.write_json("ground_truth.json", &truth)?;
    run.write_json("planted_config.json", &cfg)?;
    if a.routed {
        run.write("partition.csv", pre_moe_partition(&model)?.to_csv().as_bytes())?;
    }
    run.finish("synth", a)
}

fn parse_mixing(s: &str) -> Outcome<Mixing> {
    match s {
        "identity" => Ok(Mixing::Identity),
        "mean" => Ok(Mixing::Mean),
        _ => match s.strip_prefix("attention:").map(str::parse::<usize>) {
            Some(Ok(heads)) if heads > 0 => Ok(Mixing::Attention { heads }),
            _ => Err(invalid(format!("unknown mixing {s:?}; use identity, mean or attention:<heads>"))),
        },
    }
}

fn train_cmd(a: &TrainArgs) -> Outcome {
    let mixing = parse_mixing(&a.mixing)?;
    let tc = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        mask_probability: a.mask_probability,
        checkpoint_every: a.checkpoint_every,
        seed: a.seed,
        mask_token: 0,
    };
    tc.validate()?;
    let mut run = Run::new(&a.out)?;
    let (corpus, default_vocab) = match &a.corpus {
        Some(p) => {
            run.input(p)?;
            let c = load_corpus(p)?;
            let max = c.iter().flatten().copied().max().unwrap_or(0) as usize;
            (c, max + 1)
        }
        None => {
            let c = topic_corpus(49, a.topics, a.seq_len, a.sequences, a.corpus_seed)?;
            run.write("corpus.txt", modscope::train::corpus_to_text(&c).as_bytes())?;
            (c, 49)
        }
    };
    let vocab = a.vocab.unwrap_or(default_vocab);
    if let Some(&t) = corpus.iter().flatten().find(|&&t| t as usize >= vocab) {
        return Err(invalid(format!("corpus token {t} is outside the vocabulary of {vocab}")));
    }
    let mut cfg = ModelConfig::dense(vocab, a.layers, a.d_model, a.d_ff).with_mixing(mixing).with_bias(a.bias);
    if !a.moe_layers.is_empty() {
        cfg = cfg.with_moe(a.moe_layers.iter().copied(), a.experts, a.top_k);
    }
    cfg.validate()?;
    let model = Model::init(cfg, a.init_seed)?;
    let (series, _) = train(&model, &corpus, &tc, &a.out)?;
    for (_, p) in &series.entries {
        if let Some(name) = p.file_name() {
            run.written(&name.to_string_lossy());
        }
    }
    run.written("series.json");
    run.written("train_log.csv");
    run.finish("train", a)
}

fn predictivity(a: &PredictivityArgs) -> Outcome {
    if a.export_manifest.is_none() && (a.model.is_none() || a.suite.is_none()) {
        return Err(invalid("give --model and --suite, or --export-manifest"));
    }
    let mut run = Run::new(&a.out)?;
    let table = if let Some(mp) = &a.export_manifest {
        run.input(mp)?;
        let man = ExportManifest::load(mp)?;
        for o in &man.outputs {
            run.input(o)?;
        }
        let suite = load_suite(&mut run, &man.suite)?;
        let records = man.load_records()?;
        man.check_against(&suite, &records)?;
        let keep: Vec<_> = records
            .into_iter()
            .filter(|r| a.layers.is_empty() || a.layers.contains(&r.layer))
            .collect();
        if keep.is_empty() {
            return Err(invalid(format!("no exported layer among {:?}", a.layers)));
        }
        PredictivityTable::from_records(&keep)?
    } else {
        let model = load_model(&mut run, a.model.as_deref().expect("checked"))?;
        let suite = load_suite(&mut run, a.suite.as_deref().expect("checked"))?;
        let layers: Vec<usize> = if a.layers.is_empty() {
            (0..model.config.num_layers).collect()
        } else {
            a.layers.clone()
        };
        build_table(&model, &suite, &layers)?
    };
    run.write("table.mstab", &table.to_bytes()?)?;
    run.write("predictivity.csv", table.to_csv().as_bytes())?;
    if let Some(pp) = &a.partition {
        let p = load_partition(&mut run, pp)?;
        let et = expert_predictivity(&table, &p)?;
        run.write("expert_table.mstab", &et.to_bytes()?)?;
        run.write("expert_predictivity.csv", et.to_csv().as_bytes())?;
    }
    run.finish("predictivity", a)
}

fn specialize(a: &SpecializeArgs) -> Outcome {
    check_fraction("fraction", a.fraction)?;
    let mut run = Run::new(&a.out)?;
    let table = load_table(&mut run, &a.table)?;
    let suite = load_suite(&mut run, &a.suite)?;
    let s = SimilaritySummary::compute(&table, &suite, a.fraction)?;
    run.write("overlap.csv", s.overlap_csv().as_bytes())?;
    run.write("best_predictivity.csv", s.best_predictivity_csv().as_bytes())?;
    run.write_json("specialization.json", &s.plot_json())?;
    run.finish("specialize", a)
}

fn experts(a: &ExpertsArgs) -> Outcome {
    check_alpha(a.alpha)?;
    check_fraction("fraction", a.fraction)?;
    let named: Vec<(String, &str)> = a
        .partitions
        .iter()
        .map(|s| match s.split_once('=') {
            Some((n, p)) if !n.is_empty() && !p.is_empty() && n != "random" => Ok((n.to_string(), p)),
            _ => Err(invalid(format!("--partition {s:?} must be name=path with a name other than random"))),
        })
        .collect::<Outcome<_>>()?;
    let names: BTreeSet<&String> = named.iter().map(|x| &x.0).collect();
    if names.len() != named.len() {
        return Err(invalid("partition names must be unique"));
    }
    if named.is_empty() && a.cluster_experts.is_none() {
        return Err(invalid("give at least one --partition or --cluster-experts"));
    }
    if a.cluster_experts == Some(0) || a.random_experts == Some(0) {
        return Err(invalid("expert counts must be positive"));
    }
    let mode = match a.mode {
        PMode::Binomial => PValueMode::BinomialApprox,
        PMode::Exact => PValueMode::ExactSum,
    };
    let mut run = Run::new(&a.out)?;
    let table = load_table(&mut run, &a.table)?;
    let suite = load_suite(&mut run, &a.suite)?;
    let mut parts: Vec<(String, Partition)> = Vec::new();
    for (n, p) in &named {
        parts.push((n.clone(), load_partition(&mut run, Path::new(p))?));
    }
    if let (Some(mp), Some(e)) = (&a.model, a.cluster_experts) {
        let model = load_model(&mut run, mp)?;
        let dense: Vec<usize> = table
            .layer_ids()
            .into_iter()
            .filter(|&l| l < model.config.num_layers && model.config.expert_size(l).is_none())
            .collect();
        if dense.is_empty() {
            return Err(invalid("the table has no dense layer of this model to cluster"));
        }
        let (p, _) = cluster_partition_layers(&model, &dense, e, a.seed, a.cluster_iterations)?;
        run.write("partition_clustered.csv", p.to_csv().as_bytes())?;
        parts.push(("clustered".into(), p));
    }
    let mut rows = Vec::new();
    for (name, p) in &parts {
        let r = detect_functional_experts_with(&table, p, &suite, a.fraction, a.alpha, mode)?;
        run.write(&format!("experts_{name}.csv"), r.experts_csv().as_bytes())?;
        run.write(&format!("summary_{name}.csv"), r.summary_csv().as_bytes())?;
        rows.push(ComparisonRow::from_report(name, &r));
    }
    if a.random_draws > 0 {
        let first = &parts[0].1;
        let e = a.random_experts.unwrap_or(first.num_experts());
        let layers = first.layer_ids();
        let reports = (0..a.random_draws as u64)
            .into_par_iter()
            .map(|d| {
                let rp = random_partition(&layers, first.d_ff(), e, a.seed.wrapping_add(d))?;
                detect_functional_experts_with(&table, &rp, &suite, a.fraction, a.alpha, mode)
            })
            .collect::<modscope::Result<Vec<_>>>()?;
        rows.push(ComparisonRow::mean("random", &reports));
    }
    run.write("experts.csv", comparison_csv(&rows).as_bytes())?;
    run.write_json("experts.json", &rows)?;
    run.finish("experts", a)
}

fn mean_accuracy(model: &Model, eval: &FunctionSuite, probes: &[Readout], plan: Option<(&PerturbationPlan, u64)>) -> Outcome<f64> {
    let mut total = 0.0;
    for (d, r) in eval.sub_functions.iter().zip(probes) {
        total += match plan {
            Some((p, seed)) => evaluate_noise_accuracy(model, d, r, p, seed)?,
            None => evaluate_accuracy(model, d, r)?,
        };
    }
    Ok(total / probes.len() as f64)
}

fn sample_sorted(pool: &[usize], n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    v.sort_unstable();
    v
}

fn perturb(a: &PerturbArgs) -> Outcome {
    if a.proportions.is_empty() {
        return Err(invalid("need at least one proportion"));
    }
    for &p in &a.proportions {
        check_fraction("proportion", p)?;
    }
    if a.seeds == 0 {
        return Err(invalid("need at least one seed"));
    }
    if !(a.variance > 0.0 && a.variance.is_finite()) {
        return Err(invalid(format!("noise variance {} must be positive", a.variance)));
    }
    check_fraction("fraction", a.fraction)?;
    check_alpha(a.alpha)?;
    let mut run = Run::new(&a.out)?;
    let model = load_model(&mut run, &a.model)?;
    if a.layer >= model.config.num_layers {
        return Err(invalid(format!("layer {} out of range", a.layer)));
    }
    let train = load_suite(&mut run, &a.train_suite)?;
    let eval = match &a.eval_suite {
        Some(p) => load_suite(&mut run, p)?,
        None => train.clone(),
    };
    let probes = eval
        .sub_functions
        .iter()
        .map(|d| {
            let t = train
                .get(&d.id)
                .ok_or_else(|| invalid(format!("sub-function {} is missing from the training suite", d.id)))?;
            Ok(Readout::fit(&model, t, ProbeConfig::default())?)
        })
        .collect::<Outcome<Vec<_>>>()?;
    let table = build_table(&model, &train, &[a.layer])?;
    let partition = match &a.partition {
        Some(p) => Some(load_partition(&mut run, p)?),
        None if model.config.expert_size(a.layer).is_some() => Some(pre_moe_partition(&model)?),
        None => None,
    };
    let clean = mean_accuracy(&model, &eval, &probes, None)?;
    let mut results = vec![PerturbationResult {
        condition: "clean".into(),
        proportion: 0.0,
        seed: 0,
        accuracy: clean,
    }];
    let mut summary = Vec::new();
    let d_ff = model.layer(a.layer)?.w_in.nrows();
    let seeds: Vec<u64> = (0..a.seeds).collect();
    match a.mode {
        PerturbMode::Noise => {
            let ids = train.ids();
            let neuron_rank = rank_targets(&table, &ids, a.layer, Granularity::Neuron, None)?;
            let all: Vec<usize> = (0..d_ff).collect();
            for &prop in &a.proportions {
                let mut plans: Vec<(&str, Vec<usize>)> = Vec::new();
                let count = if let Some(p) = &partition {
                    let n = ((prop * p.num_experts() as f64).ceil() as usize).max(1);
                    let ranked = rank_targets(&table, &ids, a.layer, Granularity::Expert, Some(p))?;
                    let mut t = Vec::new();
                    for &e in &ranked[..n] {
                        t.extend(p.members(a.layer, e)?);
                    }
                    t.sort_unstable();
                    let c = t.len();
                    plans.push(("expert", t));
                    c
                } else {
                    ((prop * d_ff as f64).ceil() as usize).max(1)
                };
                let mut top = neuron_rank[..count].to_vec();
                top.sort_unstable();
                plans.push(("neuron", top));
                let basis = |c: &str| match c {
                    "expert" => RankingBasis::ExpertSum,
                    _ => RankingBasis::SumOverSeen,
                };
                let fixed: Vec<(String, PerturbationPlan)> = plans
                    .into_iter()
                    .map(|(c, t)| {
                        let mut plan = PerturbationPlan::noise(BTreeMap::from([(a.layer, t)]), basis(c));
                        plan.noise_variance = a.variance;
                        (c.to_string(), plan)
                    })
                    .collect();
                for (c, plan) in &fixed {
                    run.write(&format!("plan_{c}_{prop}.json"), plan.to_json()?.as_bytes())?;
                }
                let mut per: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                for &s in &seeds {
                    let mut random = PerturbationPlan::noise(
                        BTreeMap::from([(a.layer, sample_sorted(&all, count, s))]),
                        RankingBasis::Random,
                    );
                    random.noise_variance = a.variance;
                    for (c, plan) in fixed.iter().map(|(c, p)| (c.as_str(), p)).chain([("random", &random)]) {
                        let acc = mean_accuracy(&model, &eval, &probes, Some((plan, s)))?;
                        per.entry(c.to_string()).or_default().push(acc);
                        results.push(PerturbationResult {
                            condition: c.to_string(),
                            proportion: prop,
                            seed: s,
                            accuracy: acc,
                        });
                    }
                }
                let lead = if partition.is_some() { "expert" } else { "neuron" };
                let wins = per[lead].iter().zip(&per["random"]).filter(|(x, r)| x < r).count();
                let means: BTreeMap<&String, f64> = per.iter().map(|(c, v)| (c, v.iter().sum::<f64>() / v.len() as f64)).collect();
                summary.push(json!({
                    "proportion": prop,
                    "perturbed_neurons": count,
                    "mean_accuracy": means,
                    "compared": [lead, "random"],
                    "wins": wins,
                    "trials": seeds.len(),
                    "sign_test_p": sign_test_pvalue(wins, seeds.len()),
                }));
            }
        }
        PerturbMode::Route => {
            let p = partition
                .as_ref()
                .filter(|_| model.config.expert_size(a.layer).is_some())
                .ok_or_else(|| invalid(format!("layer {} is not a routed layer", a.layer)))?;
            let report = detect_functional_experts_with(&table, p, &train, a.fraction, a.alpha, PValueMode::BinomialApprox)?;
            let functional: Vec<usize> = report
                .experts
                .iter()
                .filter(|t| t.layer == a.layer && t.functional)
                .map(|t| t.expert)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if functional.is_empty() {
                return Err(Failure::Compute(format!("no functional experts detected on layer {}", a.layer)));
            }
            let others: Vec<usize> = (0..p.num_experts()).filter(|e| !functional.contains(e)).collect();
            if others.len() < functional.len() {
                return Err(Failure::Compute("too few non-functional experts for a matched comparison".into()));
            }
            let prop = functional.len() as f64 / p.num_experts() as f64;
            let plan = PerturbationPlan::route_restrict(BTreeMap::from([(a.layer, functional.clone())]), RankingBasis::SingleDataset);
            run.write("plan_function.json", plan.to_json()?.as_bytes())?;
            let with = restrict_routing(&model, &plan.targets)?;
            let a_f = mean_accuracy(&with, &eval, &probes, None)?;
            let mut diffs = Vec::new();
            for &s in &seeds {
                let none = sample_sorted(&others, functional.len(), s);
                let without = restrict_routing(&model, &BTreeMap::from([(a.layer, none)]))?;
                let a_n = mean_accuracy(&without, &eval, &probes, None)?;
                results.push(PerturbationResult {
                    condition: "function".into(),
                    proportion: prop,
                    seed: s,
                    accuracy: a_f,
                });
                results.push(PerturbationResult {
                    condition: "no_function".into(),
                    proportion: prop,
                    seed: s,
                    accuracy: a_n,
                });
                diffs.push(a_f - a_n);
            }
            let wins = diffs.iter().filter(|&&d| d > 0.0).count();
            summary.push(json!({
                "functional_experts": functional,
                "proportion": prop,
                "function_accuracy": a_f,
                "mean_gain": diffs.iter().sum::<f64>() / diffs.len() as f64,
                "wins": wins,
                "trials": seeds.len(),
                "sign_test_p": sign_test_pvalue(wins, seeds.len()),
            }));
        }
    }
    run.write("results.csv", results_csv(&results).as_bytes())?;
    run.write_json("perturb_summary.json", &json!({ "clean_accuracy": clean, "conditions": summary }))?;
    run.finish("perturb", a)
}

fn dynamics(a: &DynamicsArgs) -> Outcome {
    check_fraction("fraction", a.fraction)?;
    check_alpha(a.alpha)?;
    check_fraction("threshold", a.threshold)?;
    if a.cluster_experts == Some(0) {
        return Err(invalid("--cluster-experts must be positive"));
    }
    let mut run = Run::new(&a.out)?;
    run.input(&a.series)?;
    let series = CheckpointSeries::load(&a.series)?;
    for (_, p) in &series.entries {
        run.input(p)?;
    }
    let models = series.load_models()?;
    let suite = load_suite(&mut run, &a.suite)?;
    let layers: Vec<usize> = if a.layers.is_empty() {
        (0..models[0].1.config.num_layers).collect()
    } else {
        a.layers.clone()
    };
    let tables = models
        .iter()
        .map(|(s, m)| Ok((*s, build_table(m, &suite, &layers)?)))
        .collect::<Outcome<Vec<_>>>()?;
    let partition = match (&a.partition, a.cluster_experts) {
        (Some(p), _) => Some(load_partition(&mut run, p)?),
        (None, Some(e)) => {
            let (p, _) = cluster_partition_layers(&models.last().expect("non-empty").1, &layers, e, a.seed, a.cluster_iterations)?;
            run.write("partition_clustered.csv", p.to_csv().as_bytes())?;
            Some(p)
        }
        (None, None) => None,
    };
    let total = *series.steps().last().expect("non-empty");
    let neuron = stabilization_curve(&tables, &suite, Level::Neuron, None, 0, a.seed)?;
    run.write("stabilization_neuron.csv", neuron.to_csv().as_bytes())?;
    let mut plot = json!({
        "neuron": neuron.plot_json(),
        "first_reaching": { "threshold": a.threshold, "neuron": neuron.first_reaching(ALL_FUNCTIONS, a.threshold, total) },
    });
    if let Some(p) = &partition {
        let expert = stabilization_curve(&tables, &suite, Level::Expert, Some(p), a.random_draws, a.seed)?;
        run.write("stabilization_expert.csv", expert.to_csv().as_bytes())?;
        let emergence = emergence_curve(&tables, &suite, p, a.fraction, a.alpha, a.random_draws, a.seed)?;
        run.write("emergence.csv", emergence.to_csv().as_bytes())?;
        plot["expert"] = expert.plot_json();
        plot["emergence"] = emergence.plot_json();
        plot["first_reaching"]["expert"] = json!(expert.first_reaching(ALL_FUNCTIONS, a.threshold, total));
    }
    run.write_json("dynamics.json", &plot)?;
    run.finish("dynamics", a)
}

fn cluster_score(a: &ClusterScoreArgs) -> Outcome {
    if a.max_k == 0 {
        return Err(invalid("--max-k must be at least 1"));
    }
    let mut run = Run::new(&a.out)?;
    let table = load_table(&mut run, &a.table)?;
    let et = match (table.unit(), &a.partition) {
        (Unit::Expert, _) => table,
        (Unit::Neuron, Some(p)) => {
            let p = load_partition(&mut run, p)?;
            expert_predictivity(&table, &p)?
        }
        (Unit::Neuron, None) => return Err(invalid("a neuron-level table needs --partition")),
    };
    run.input(&a.similarity)?;
    let text = std::fs::read_to_string(&a.similarity).map_err(|e| Failure::Io(format!("{}: {e}", a.similarity.display())))?;
    let (ids, s) = parse_similarity_csv(&text, &a.similarity.display().to_string())?;
    let (per, mean) = clustering_scores(&s, &et, &ids, a.max_k)?;
    let mut csv = String::from("layer,score,terms,skipped\n");
    for (l, c) in &per {
        csv.push_str(&format!("{l},{},{},{}\n", c.value, c.terms, c.skipped));
    }
    csv.push_str(&format!("mean,{mean},,\n"));
    run.write("cluster_score.csv", csv.as_bytes())?;
    run.write_json("cluster_score.json", &json!({ "max_k": a.max_k, "layers": per, "mean": mean }))?;
    run.finish("cluster-score", a)
}
