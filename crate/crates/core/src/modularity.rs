//! Functional experts: experts holding more sub-functional neurons than a
//! uniform placement would give them.
//!
//! For an expert of `n_E` neurons out of `N`, each sub-function's `k`
//! sub-functional neurons land in it according to `Hypergeometric(N, k, n_E)`
//! under the null. Summed over the `M` sub-functions of a function, the hit
//! count `r` follows the `M`-fold convolution of that law, approximated by
//! `Binomial(M·k, n_E/N)`. An expert is functional when `P(X ≥ r) < α`.
//!
//! `Prop` is the fraction of functional experts; an expert's `Degree` is its
//! hit density relative to the uniform expectation, `(r/n_E) / (M·k/N)`,
//! averaged over functional experts (0 when there are none).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{FunctionCategory, FunctionSuite};
use crate::error::{Error, Result};
use crate::partition::{Partition, Provenance};
use crate::predictivity::{average_precision, PredictivityTable, Unit};
use crate::specialization::{top_k_neurons, top_k_size, NeuronSet};

pub const DEFAULT_ALPHA: f64 = 0.001;
pub const DEFAULT_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMode {
    /// `P(X ≥ r)` for `X ~ Binomial(M·K, n_E/N)`.
    #[default]
    BinomialApprox,
    /// Upper tail of the exact `M`-fold hypergeometric convolution.
    ExactSum,
}

/// Sub-functional hits per expert: `r_e = Σ_s |set_s ∩ expert_e|`.
pub fn hit_counts(sets: &[NeuronSet], partition: &Partition, layer: usize) -> Result<Vec<usize>> {
    let assign = partition.assignment(layer)?;
    let mut r = vec![0usize; partition.num_experts()];
    for s in sets {
        if s.layer != layer {
            return Err(Error::Input(format!(
                "set for {} is on layer {}, expected {layer}",
                s.sub_function, s.layer
            )));
        }
        for &n in &s.members {
            let e = *assign
                .get(n)
                .ok_or_else(|| Error::Input(format!("neuron {n} outside the partition")))?;
            r[e] += 1;
        }
    }
    Ok(r)
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for i in 1..=n {
        acc += (i as f64).ln();
        out.push(acc);
    }
    out
}

fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Upper-tail probability `P(X ≥ r)` of the hit count under the null.
///
/// `n` neurons in the layer, `n_e` per expert, `k` sub-functional neurons per
/// sub-function and `m` sub-functions.
pub fn null_pvalue(r: usize, n: usize, n_e: usize, k: usize, m: usize, mode: PValueMode) -> Result<f64> {
    if n == 0 || n_e == 0 || k == 0 || m == 0 || k > n || n_e > n {
        return Err(Error::Config(format!(
            "invalid null parameters N={n}, n_E={n_e}, K={k}, M={m}"
        )));
    }
    if r > m * k {
        return Err(Error::Config(format!("hit count {r} exceeds M·K = {}", m * k)));
    }
    if r == 0 {
        return Ok(1.0);
    }
    let lf = ln_factorials(n.max(m * k));
    let ln_choose = |a: usize, b: usize| lf[a] - lf[b] - lf[a - b];
    let log_tail = match mode {
        PValueMode::BinomialApprox => {
            let trials = m * k;
            let p = n_e as f64 / n as f64;
            if p >= 1.0 {
                return Ok(1.0);
            }
            let (lp, lq) = (p.ln(), (1.0 - p).ln());
            log_sum_exp((r..=trials).map(|x| ln_choose(trials, x) + x as f64 * lp + (trials - x) as f64 * lq))
        }
        PValueMode::ExactSum => {
            // Single-draw law of hits in one expert for one sub-function.
            let lo = (n_e + k).saturating_sub(n);
            let hi = k.min(n_e);
            let denom = ln_choose(n, n_e);
            let single: Vec<f64> = (0..=hi)
                .map(|x| {
                    if x < lo {
                        f64::NEG_INFINITY
                    } else {
                        ln_choose(k, x) + ln_choose(n - k, n_e - x) - denom
                    }
                })
                .collect();
            let mut dist = vec![0.0f64];
            for _ in 0..m {
                let mut next = vec![f64::NEG_INFINITY; dist.len() + hi];
                for (t, cell) in next.iter_mut().enumerate() {
                    let terms = single
                        .iter()
                        .enumerate()
                        .filter(|&(x, _)| x <= t && t - x < dist.len())
                        .map(|(x, &lp)| lp + dist[t - x]);
                    *cell = log_sum_exp(terms);
                }
                dist = next;
            }
            if r >= dist.len() {
                return Ok(0.0);
            }
            log_sum_exp(dist[r..].iter().copied())
        }
    };
    Ok(log_tail.exp().clamp(0.0, 1.0))
}

/// Null-test outcome for one expert.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpertTest {
    pub layer: usize,
    pub function: String,
    pub expert: usize,
    pub hits: usize,
    pub p_value: f64,
    pub functional: bool,
    /// Hit density over the uniform expectation; reported for every expert,
    /// but only functional experts enter the summary Degree.
    pub degree: f64,
}

/// Prop and Degree of one function on one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionSummary {
    pub layer: usize,
    pub function: String,
    pub sub_functions: usize,
    pub k: usize,
    pub functional_experts: usize,
    pub prop: f64,
    pub degree: f64,
}

/// Per-expert tests and per-function summaries for every partitioned layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionalExpertReport {
    pub alpha: f64,
    pub fraction: f64,
    pub mode: PValueMode,
    pub provenance: Provenance,
    pub num_experts: usize,
    pub expert_size: usize,
    pub experts: Vec<ExpertTest>,
    pub summaries: Vec<FunctionSummary>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha {alpha} must lie in (0, 1)")))
    }
}

/// Runs the null test for one group of sub-functional neuron sets.
fn test_group(
    sets: &[NeuronSet],
    partition: &Partition,
    layer: usize,
    function: &str,
    alpha: f64,
    mode: PValueMode,
) -> Result<(Vec<ExpertTest>, FunctionSummary)> {
    let m = sets.len();
    let k = sets.first().map(|s| s.k).ok_or_else(|| Error::Input(format!("function {function} has no sub-functions")))?;
    let n = partition.d_ff();
    let n_e = partition.expert_size();
    let r = hit_counts(sets, partition, layer)?;
    let expected_density = (m * k) as f64 / n as f64;
    let mut tests = Vec::with_capacity(r.len());
    for (expert, &hits) in r.iter().enumerate() {
        let p_value = null_pvalue(hits, n, n_e, k, m, mode)?;
        tests.push(ExpertTest {
            layer,
            function: function.to_string(),
            expert,
            hits,
            p_value,
            functional: p_value < alpha,
            degree: (hits as f64 / n_e as f64) / expected_density,
        });
    }
    let flagged: Vec<&ExpertTest> = tests.iter().filter(|t| t.functional).collect();
    let degree = if flagged.is_empty() {
        0.0
    } else {
        flagged.iter().map(|t| t.degree).sum::<f64>() / flagged.len() as f64
    };
    let summary = FunctionSummary {
        layer,
        function: function.to_string(),
        sub_functions: m,
        k,
        functional_experts: flagged.len(),
        prop: flagged.len() as f64 / r.len() as f64,
        degree,
    };
    Ok((tests, summary))
}

pub fn detect_functional_experts(
    table: &PredictivityTable,
    partition: &Partition,
    suite: &FunctionSuite,
    fraction: f64,
    alpha: f64,
) -> Result<FunctionalExpertReport> {
    detect_functional_experts_with(table, partition, suite, fraction, alpha, PValueMode::BinomialApprox)
}

/// Functional-expert detection with an explicit p-value mode. Functions are
/// the suite's categories.
pub fn detect_functional_experts_with(
    table: &PredictivityTable,
    partition: &Partition,
    suite: &FunctionSuite,
    fraction: f64,
    alpha: f64,
    mode: PValueMode,
) -> Result<FunctionalExpertReport> {
    check_alpha(alpha)?;
    top_k_size(fraction, partition.d_ff())?;
    if table.unit() != Unit::Neuron {
        return Err(Error::Input("functional experts need a neuron-level table".into()));
    }
    let groups = suite.by_category();
    let mut experts = Vec::new();
    let mut summaries = Vec::new();
    for layer in partition.layer_ids() {
        if table.units(layer)? != partition.d_ff() {
            return Err(Error::Input(format!("layer {layer}: table and partition sizes differ")));
        }
        for (category, ids) in &groups {
            let sets = ids
                .iter()
                .map(|id| top_k_neurons(table, id, layer, fraction))
                .collect::<Result<Vec<_>>>()?;
            let (t, s) = test_group(&sets, partition, layer, category.as_str(), alpha, mode)?;
            experts.extend(t);
            summaries.push(s);
        }
    }
    Ok(FunctionalExpertReport {
        alpha,
        fraction,
        mode,
        provenance: partition.provenance(),
        num_experts: partition.num_experts(),
        expert_size: partition.expert_size(),
        experts,
        summaries,
    })
}

impl FunctionalExpertReport {
    pub fn summary(&self, layer: usize, function: &str) -> Option<&FunctionSummary> {
        self.summaries.iter().find(|s| s.layer == layer && s.function == function)
    }

    /// Functional experts of a function on a layer, ascending.
    pub fn flagged(&self, layer: usize, function: &str) -> Vec<usize> {
        self.experts
            .iter()
            .filter(|t| t.layer == layer && t.function == function && t.functional)
            .map(|t| t.expert)
            .collect()
    }

    /// Prop and Degree per function, averaged over layers.
    pub fn layer_means(&self) -> BTreeMap<String, (f64, f64)> {
        let mut acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
        for s in &self.summaries {
            let e = acc.entry(s.function.clone()).or_default();
            e.0 += s.prop;
            e.1 += s.degree;
            e.2 += 1;
        }
        acc.into_iter()
            .map(|(f, (p, d, n))| (f, (p / n as f64, d / n as f64)))
            .collect()
    }

    pub fn experts_csv(&self) -> String {
        let mut out = String::from("layer,function,expert,hits,p_value,functional,degree\n");
        for t in &self.experts {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                t.layer, t.function, t.expert, t.hits, t.p_value, t.functional, t.degree
            )
            .expect("string write");
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("layer,function,partitioning,sub_functions,k,functional_experts,prop,degree\n");
        for s in &self.summaries {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.layer,
                s.function,
                self.provenance.as_str(),
                s.sub_functions,
                s.k,
                s.functional_experts,
                s.prop,
                s.degree
            )
            .expect("string write");
        }
        out
    }
}

/// One row of a partitioning comparison: Prop and Degree per function.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub partitioning: String,
    pub values: BTreeMap<String, (f64, f64)>,
}

impl ComparisonRow {
    pub fn from_report(partitioning: &str, report: &FunctionalExpertReport) -> Self {
        ComparisonRow {
            partitioning: partitioning.to_string(),
            values: report.layer_means(),
        }
    }

    /// Averages several reports, e.g. many random partition draws.
    pub fn mean(partitioning: &str, reports: &[FunctionalExpertReport]) -> Self {
        let mut acc: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for r in reports {
            for (f, (p, d)) in r.layer_means() {
                let e = acc.entry(f).or_default();
                e.0 += p;
                e.1 += d;
            }
        }
        let n = reports.len().max(1) as f64;
        ComparisonRow {
            partitioning: partitioning.to_string(),
            values: acc.into_iter().map(|(f, (p, d))| (f, (p / n, d / n))).collect(),
        }
    }
}

/// `partitioning,<function>_prop,<function>_degree,...` with one row per
/// partitioning scheme.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let functions: Vec<&String> = {
        let mut f: Vec<&String> = rows.iter().flat_map(|r| r.values.keys()).collect();
        f.sort();
        f.dedup();
        f
    };
    let mut out = String::from("partitioning");
    for f in &functions {
        write!(out, ",{f}_prop,{f}_degree").expect("string write");
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.partitioning);
        for f in &functions {
            match r.values.get(*f) {
                Some((p, d)) => write!(out, ",{p},{d}"),
                None => write!(out, ",,"),
            }
            .expect("string write");
        }
        out.push('\n');
    }
    out
}

/// How well expert predictivity separates functional from non-functional
/// experts: the AP of `b_e` (mean expert predictivity over the function's
/// sub-functions) against the functional flags, on one layer.
pub fn consistency_ap(
    report: &FunctionalExpertReport,
    expert_table: &PredictivityTable,
    suite: &FunctionSuite,
    layer: usize,
    function: FunctionCategory,
) -> Result<f64> {
    if expert_table.unit() != Unit::Expert {
        return Err(Error::Input("consistency AP needs an expert-level table".into()));
    }
    let ids = suite
        .by_category()
        .remove(&function)
        .ok_or_else(|| Error::Input(format!("suite has no {function} sub-functions")))?;
    let experts = expert_table.units(layer)?;
    let mut b = vec![0.0; experts];
    for id in &ids {
        for (acc, v) in b.iter_mut().zip(expert_table.column(layer, id)?) {
            *acc += v / ids.len() as f64;
        }
    }
    let mut flags = vec![0u8; experts];
    for e in report.flagged(layer, function.as_str()) {
        flags[e] = 1;
    }
    average_precision(&b, &flags)
}

/// Sub-functional experts of a single sub-function on one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubFunctionalResult {
    pub sub_function: String,
    pub layer: usize,
    pub tests: Vec<ExpertTest>,
    pub prop: f64,
    pub degree: f64,
}

/// The functional-expert test with a single sub-function (`M = 1`).
pub fn detect_sub_functional_experts(
    table: &PredictivityTable,
    partition: &Partition,
    sub_function: &str,
    layer: usize,
    fraction: f64,
    alpha: f64,
    mode: PValueMode,
) -> Result<SubFunctionalResult> {
    check_alpha(alpha)?;
    let set = top_k_neurons(table, sub_function, layer, fraction)?;
    let (tests, summary) = test_group(&[set], partition, layer, sub_function, alpha, mode)?;
    Ok(SubFunctionalResult {
        sub_function: sub_function.to_string(),
        layer,
        tests,
        prop: summary.prop,
        degree: summary.degree,
    })
}

/// Sub-functional Prop and Degree averaged within each function, per layer.
pub fn sub_functional_by_function(
    table: &PredictivityTable,
    partition: &Partition,
    suite: &FunctionSuite,
    fraction: f64,
    alpha: f64,
    mode: PValueMode,
) -> Result<Vec<FunctionSummary>> {
    let k = top_k_size(fraction, partition.d_ff())?;
    let mut out = Vec::new();
    for layer in partition.layer_ids() {
        for (category, ids) in suite.by_category() {
            let mut prop = 0.0;
            let mut degree = 0.0;
            let mut flagged = 0;
            for id in &ids {
                let r = detect_sub_functional_experts(table, partition, id, layer, fraction, alpha, mode)?;
                prop += r.prop;
                degree += r.degree;
                flagged += r.tests.iter().filter(|t| t.functional).count();
            }
            let m = ids.len() as f64;
            out.push(FunctionSummary {
                layer,
                function: category.as_str().to_string(),
                sub_functions: ids.len(),
                k,
                functional_experts: flagged,
                prop: prop / m,
                degree: degree / m,
            });
        }
    }
    Ok(out)
}
