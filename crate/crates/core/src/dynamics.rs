//! Analysis across checkpoint series: rank-correlation stabilization of
//! predictivities, emergence of functional experts, and the clustering score
//! relating sub-function similarity to shared top experts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::FunctionSuite;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, Model};
use crate::modularity::{detect_functional_experts, FunctionalExpertReport};
use crate::partition::{random_partition, Partition};
use crate::predictivity::{expert_predictivity, PredictivityTable, Unit};
use crate::util::{argsort_desc, mix_seed, write_file};

/// Ranks with ties sharing their mean rank (1-based).
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Input(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Input("need at least two observations".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::Input("NaN in rank correlation input".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::Undefined("rank correlation of a constant vector".into()))
}

/// Ordered checkpoints of one training run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointSeries {
    pub entries: Vec<(u64, PathBuf)>,
}

impl CheckpointSeries {
    pub fn new(entries: Vec<(u64, PathBuf)>) -> Result<Self> {
        let s = CheckpointSeries { entries };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Input("empty checkpoint series".into()));
        }
        if let Some(w) = self.entries.windows(2).find(|w| w[1].0 <= w[0].0) {
            return Err(Error::Input(format!(
                "checkpoint steps must increase strictly ({} then {})",
                w[0].0, w[1].0
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.0).collect()
    }

    /// Loads every checkpoint, checking that all share one architecture.
    pub fn load_models(&self) -> Result<Vec<(u64, Model)>> {
        let models: Vec<(u64, Model)> = self
            .entries
            .iter()
            .map(|(s, p)| Ok((*s, load_checkpoint(p)?)))
            .collect::<Result<_>>()?;
        let shapes = |m: &Model| {
            let mut c = m.config.clone();
            c.init_seed = 0;
            c
        };
        let first = shapes(&models[0].1);
        if let Some((s, _)) = models.iter().find(|(_, m)| shapes(m) != first) {
            return Err(Error::Input(format!("checkpoint at step {s} has a different architecture")));
        }
        Ok(models)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut s: Self = serde_json::from_str(&text)?;
        // Relative checkpoint paths are resolved against the series file.
        if let Some(dir) = path.parent() {
            for e in &mut s.entries {
                if e.1.is_relative() {
                    e.1 = dir.join(&e.1);
                }
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), serde_json::to_string_pretty(self)?.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Neuron,
    Expert,
}

impl Level {
    pub fn as_str(&self) -> &'static str {
        match self {
            Level::Neuron => "neuron",
            Level::Expert => "expert",
        }
    }
}

/// Name used for curves pooled over every function.
pub const ALL_FUNCTIONS: &str = "all";

/// One point of a curve over training steps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: u64,
    pub function: String,
    pub level: Level,
    pub value: f64,
    pub stderr: f64,
    /// Length of the correlated vectors (neurons or experts per layer).
    pub length: usize,
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn points_to_csv(out: &mut String, points: &[CurvePoint], kind: &str) {
    for p in points {
        writeln!(out, "{},{},{},{},{},{},{}", kind, p.step, p.function, p.level.as_str(), p.value, p.stderr, p.length)
            .expect("string write");
    }
}

/// Adjacent-checkpoint rank correlation of predictivities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilizationCurve {
    pub level: Level,
    /// Each point is labelled with the later step of its pair.
    pub points: Vec<CurvePoint>,
    /// Same correlations under random partitions (expert level only),
    /// averaged over draws; `stderr` is across draws.
    pub random_baseline: Vec<CurvePoint>,
    /// Correlation terms skipped because one vector was constant.
    pub skipped: usize,
}

impl StabilizationCurve {
    pub fn series(&self, function: &str) -> Vec<(u64, f64)> {
        self.points
            .iter()
            .filter(|p| p.function == function)
            .map(|p| (p.step, p.value))
            .collect()
    }

    /// Fraction of `total_steps` at which the curve first reaches
    /// `threshold`.
    pub fn first_reaching(&self, function: &str, threshold: f64, total_steps: u64) -> Option<f64> {
        self.series(function)
            .into_iter()
            .find(|&(_, v)| v >= threshold)
            .map(|(s, _)| s as f64 / total_steps as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,step,function,level,value,stderr,length\n");
        points_to_csv(&mut out, &self.points, "observed");
        points_to_csv(&mut out, &self.random_baseline, "random_partition");
        out
    }

    pub fn plot_json(&self) -> serde_json::Value {
        json!({ "level": self.level, "points": self.points, "random_baseline": self.random_baseline })
    }
}

/// Unit-level vectors per (layer, sub-function) for one checkpoint.
fn level_table(table: &PredictivityTable, level: Level, partition: Option<&Partition>) -> Result<PredictivityTable> {
    match level {
        Level::Neuron => Ok(table.clone()),
        Level::Expert => {
            let p = partition.ok_or_else(|| Error::Input("expert level needs a partition".into()))?;
            expert_predictivity(table, p)
        }
    }
}

/// Per adjacent pair and function: correlations over (layer, sub-function).
fn pair_correlations(
    a: &PredictivityTable,
    b: &PredictivityTable,
    groups: &BTreeMap<String, Vec<String>>,
    layers: &[usize],
    skipped: &mut usize,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (f, ids) in groups {
        let mut rhos = Vec::new();
        for &l in layers {
            for id in ids {
                match spearman(&a.column(l, id)?, &b.column(l, id)?) {
                    Ok(r) => rhos.push(r),
                    Err(Error::Undefined(_)) => *skipped += 1,
                    Err(e) => return Err(e),
                }
            }
        }
        out.insert(f.clone(), rhos);
    }
    Ok(out)
}

fn function_groups(suite: &FunctionSuite) -> BTreeMap<String, Vec<String>> {
    let mut g: BTreeMap<String, Vec<String>> = suite
        .by_category()
        .into_iter()
        .map(|(c, ids)| (c.as_str().to_string(), ids))
        .collect();
    g.insert(ALL_FUNCTIONS.to_string(), suite.ids());
    g
}

/// Stabilization scores over a series of predictivity tables. At the
/// expert level every checkpoint uses the same `partition`, and a
/// random-partition baseline of `random_draws` draws is reported.
pub fn stabilization_curve(
    tables: &[(u64, PredictivityTable)],
    suite: &FunctionSuite,
    level: Level,
    partition: Option<&Partition>,
    random_draws: usize,
    seed: u64,
) -> Result<StabilizationCurve> {
    if tables.len() < 2 {
        return Err(Error::Input("stabilization needs at least two checkpoints".into()));
    }
    let groups = function_groups(suite);
    let layers: Vec<usize> = match (level, partition) {
        (Level::Expert, Some(p)) => p.layer_ids(),
        (Level::Expert, None) => return Err(Error::Input("expert level needs a partition".into())),
        (Level::Neuron, _) => tables[0].1.layer_ids(),
    };
    let lvl: Vec<PredictivityTable> = tables
        .iter()
        .map(|(_, t)| level_table(t, level, partition))
        .collect::<Result<_>>()?;
    let length = lvl[0].units(layers[0])?;
    let mut skipped = 0;
    let mut points = Vec::new();
    for (i, w) in lvl.windows(2).enumerate() {
        for (f, rhos) in pair_correlations(&w[0], &w[1], &groups, &layers, &mut skipped)? {
            if rhos.is_empty() {
                continue;
            }
            let (value, stderr) = mean_stderr(&rhos);
            points.push(CurvePoint {
                step: tables[i + 1].0,
                function: f,
                level,
                value,
                stderr,
                length,
            });
        }
    }
    let mut random_baseline = Vec::new();
    if let (Level::Expert, Some(p)) = (level, partition) {
        let draws: Vec<BTreeMap<(usize, String), f64>> = (0..random_draws)
            .into_par_iter()
            .map(|d| {
                let rp = random_partition(&layers, p.d_ff(), p.num_experts(), mix_seed(seed, d as u64))?;
                let lvl: Vec<PredictivityTable> = tables
                    .iter()
                    .map(|(_, t)| expert_predictivity(t, &rp))
                    .collect::<Result<_>>()?;
                let mut m = BTreeMap::new();
                let mut ignored = 0;
                for (i, w) in lvl.windows(2).enumerate() {
                    for (f, rhos) in pair_correlations(&w[0], &w[1], &groups, &layers, &mut ignored)? {
                        if !rhos.is_empty() {
                            m.insert((i, f), rhos.iter().sum::<f64>() / rhos.len() as f64);
                        }
                    }
                }
                Ok(m)
            })
            .collect::<Result<_>>()?;
        let mut keyed: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
        for d in draws {
            for (k, v) in d {
                keyed.entry(k).or_default().push(v);
            }
        }
        for ((i, f), vals) in keyed {
            let (value, stderr) = mean_stderr(&vals);
            random_baseline.push(CurvePoint {
                step: tables[i + 1].0,
                function: f,
                level,
                value,
                stderr,
                length,
            });
        }
    }
    Ok(StabilizationCurve {
        level,
        points,
        random_baseline,
        skipped,
    })
}

/// Prop and Degree per checkpoint, with a random-partition reference at the
/// last checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmergenceCurve {
    pub reports: Vec<(u64, FunctionalExpertReport)>,
    /// Per function: (mean Prop, Prop stderr, mean Degree, Degree stderr)
    /// over random partitions of the last checkpoint's table.
    pub random_reference: BTreeMap<String, (f64, f64, f64, f64)>,
}

impl EmergenceCurve {
    /// `(step, prop, degree)` for one function, averaged over layers.
    pub fn series(&self, function: &str) -> Vec<(u64, f64, f64)> {
        self.reports
            .iter()
            .filter_map(|(s, r)| r.layer_means().get(function).map(|&(p, d)| (*s, p, d)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,step,function,prop,prop_stderr,degree,degree_stderr\n");
        for (step, r) in &self.reports {
            for (f, (p, d)) in r.layer_means() {
                writeln!(out, "observed,{step},{f},{p},0,{d},0").expect("string write");
            }
        }
        let last = self.reports.last().map(|r| r.0).unwrap_or(0);
        for (f, (p, ps, d, ds)) in &self.random_reference {
            writeln!(out, "random_partition,{last},{f},{p},{ps},{d},{ds}").expect("string write");
        }
        out
    }

    pub fn plot_json(&self) -> serde_json::Value {
        let mut series = BTreeMap::new();
        if let Some((_, r)) = self.reports.first() {
            for f in r.layer_means().keys() {
                series.insert(f.clone(), self.series(f));
            }
        }
        json!({ "series": series, "random_reference": self.random_reference })
    }
}

pub fn emergence_curve(
    tables: &[(u64, PredictivityTable)],
    suite: &FunctionSuite,
    partition: &Partition,
    fraction: f64,
    alpha: f64,
    random_draws: usize,
    seed: u64,
) -> Result<EmergenceCurve> {
    let (_, last) = tables.last().ok_or_else(|| Error::Input("empty checkpoint series".into()))?;
    let reports = tables
        .par_iter()
        .map(|(s, t)| Ok((*s, detect_functional_experts(t, partition, suite, fraction, alpha)?)))
        .collect::<Result<Vec<_>>>()?;
    let layers = partition.layer_ids();
    let draws: Vec<BTreeMap<String, (f64, f64)>> = (0..random_draws)
        .into_par_iter()
        .map(|d| {
            let rp = random_partition(&layers, partition.d_ff(), partition.num_experts(), mix_seed(seed, d as u64))?;
            Ok(detect_functional_experts(last, &rp, suite, fraction, alpha)?.layer_means())
        })
        .collect::<Result<_>>()?;
    let mut acc: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for d in draws {
        for (f, (p, g)) in d {
            let e = acc.entry(f).or_default();
            e.0.push(p);
            e.1.push(g);
        }
    }
    let random_reference = acc
        .into_iter()
        .map(|(f, (p, g))| {
            let (pm, ps) = mean_stderr(&p);
            let (gm, gs) = mean_stderr(&g);
            (f, (pm, ps, gm, gs))
        })
        .collect();
    Ok(EmergenceCurve {
        reports,
        random_reference,
    })
}

/// `O[i][j] = |top-k experts of i ∩ top-k experts of j|` on one layer.
/// Equal predictivities go to the lower expert index.
pub fn expert_overlap_topk(expert_table: &PredictivityTable, layer: usize, sub_functions: &[String], k: usize) -> Result<Array2<f64>> {
    if expert_table.unit() != Unit::Expert {
        return Err(Error::Input("top-k expert overlap needs an expert-level table".into()));
    }
    let experts = expert_table.units(layer)?;
    if k == 0 || k > experts {
        return Err(Error::Config(format!("k = {k} must lie in [1, {experts}]")));
    }
    let tops: Vec<Vec<bool>> = sub_functions
        .iter()
        .map(|id| {
            let mut mask = vec![false; experts];
            for e in argsort_desc(&expert_table.column(layer, id)?).into_iter().take(k) {
                mask[e] = true;
            }
            Ok(mask)
        })
        .collect::<Result<_>>()?;
    let m = sub_functions.len();
    Ok(Array2::from_shape_fn((m, m), |(i, j)| {
        tops[i].iter().zip(&tops[j]).filter(|(a, b)| **a && **b).count() as f64
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusteringScore {
    /// Mean of `V_i^(k)` over the computed terms.
    pub value: f64,
    pub terms: usize,
    /// Terms skipped because a row was constant after removing the diagonal.
    pub skipped: usize,
}

/// Mean Spearman correlation between each row of the similarity matrix `s`
/// and the matching row of every overlap matrix in `overlaps`
/// (`O^(1)..O^(K)`), with diagonal entries excluded.
pub fn clustering_score(s: &Array2<f64>, overlaps: &[Array2<f64>]) -> Result<ClusteringScore> {
    let m = s.nrows();
    if s.ncols() != m || m < 3 {
        return Err(Error::Input("similarity matrix must be square with at least 3 rows".into()));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("similarity matrix has non-finite entries".into()));
    }
    if (0..m).any(|i| (0..m).any(|j| s[(i, j)] != s[(j, i)])) {
        return Err(Error::Input("similarity matrix is not symmetric".into()));
    }
    if overlaps.is_empty() {
        return Err(Error::Config("need at least one overlap matrix (K >= 1)".into()));
    }
    let off_diag = |a: &Array2<f64>, i: usize| -> Vec<f64> { (0..m).filter(|&j| j != i).map(|j| a[(i, j)]).collect() };
    let mut total = 0.0;
    let mut terms = 0;
    let mut skipped = 0;
    for o in overlaps {
        if o.dim() != (m, m) {
            return Err(Error::Input("overlap matrix does not match the similarity matrix".into()));
        }
        for i in 0..m {
            match spearman(&off_diag(s, i), &off_diag(o, i)) {
                Ok(v) => {
                    total += v;
                    terms += 1;
                }
                Err(Error::Undefined(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    if terms == 0 {
        return Err(Error::Undefined("every clustering-score term was constant".into()));
    }
    Ok(ClusteringScore {
        value: total / terms as f64,
        terms,
        skipped,
    })
}

/// Clustering scores per layer of an expert table plus their mean, using
/// overlap depths `1..=max_k`.
pub fn clustering_scores(
    s: &Array2<f64>,
    expert_table: &PredictivityTable,
    sub_functions: &[String],
    max_k: usize,
) -> Result<(BTreeMap<usize, ClusteringScore>, f64)> {
    if sub_functions.len() != s.nrows() {
        return Err(Error::Input(format!(
            "{} sub-functions for a {}-row similarity matrix",
            sub_functions.len(),
            s.nrows()
        )));
    }
    let mut per = BTreeMap::new();
    for layer in expert_table.layer_ids() {
        let overlaps = (1..=max_k)
            .map(|k| expert_overlap_topk(expert_table, layer, sub_functions, k))
            .collect::<Result<Vec<_>>>()?;
        per.insert(layer, clustering_score(s, &overlaps)?);
    }
    let mean = per.values().map(|c| c.value).sum::<f64>() / per.len() as f64;
    Ok((per, mean))
}

/// Parses a labelled square matrix: a header `sub_function,id1,id2,...`
/// followed by one `id,v1,v2,...` row per sub-function in header order.
pub fn parse_similarity_csv(text: &str, source: &str) -> Result<(Vec<String>, Array2<f64>)> {
    let bad = |line: usize, message: String| Error::Validation {
        path: source.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty similarity file".into()))?;
    let ids: Vec<String> = header.trim().split(',').skip(1).map(str::to_string).collect();
    let m = ids.len();
    let mut s = Array2::zeros((m, m));
    let mut rows = 0;
    for (i, line) in lines {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if rows >= m {
            return Err(bad(i + 1, "more rows than header columns".into()));
        }
        if fields.len() != m + 1 || fields[0] != ids[rows] {
            return Err(bad(i + 1, format!("expected row for {} with {m} values", ids[rows])));
        }
        for (j, f) in fields[1..].iter().enumerate() {
            s[(rows, j)] = f.parse::<f64>().map_err(|_| bad(i + 1, format!("bad number {f:?}")))?;
        }
        rows += 1;
    }
    if rows != m {
        return Err(bad(text.lines().count(), format!("expected {m} rows, found {rows}")));
    }
    Ok((ids, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spearman_examples() {
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let r = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_relative_eq!(r, 4.5 / 22.5f64.sqrt(), max_relative = 1e-12);
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Undefined(_))));
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn series_steps_must_increase() {
        assert!(CheckpointSeries::new(vec![(0, "a".into()), (0, "b".into())]).is_err());
        assert!(CheckpointSeries::new(vec![(0, "a".into()), (5, "b".into())]).is_ok());
    }

    #[test]
    fn perfect_and_reversed_clustering() {
        let m = 5;
        let s = Array2::from_shape_fn((m, m), |(i, j)| if i == j { 1.0 } else { -((i as f64) - (j as f64)).abs() });
        let same = s.mapv(|v| 10.0 + v);
        let score = clustering_score(&s, &[same.clone(), same]).unwrap();
        assert_relative_eq!(score.value, 1.0, max_relative = 1e-12);
        let rev = s.mapv(|v| -v);
        assert_relative_eq!(clustering_score(&s, &[rev]).unwrap().value, -1.0, max_relative = 1e-12);
    }

    #[test]
    fn similarity_csv() {
        let text = "sub_function,a,b,c\na,1,0.5,0.1\nb,0.5,1,0.2\nc,0.1,0.2,1\n";
        let (ids, s) = parse_similarity_csv(text, "s.csv").unwrap();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert_eq!(s[(2, 1)], 0.2);
        assert!(parse_similarity_csv("sub_function,a,b\na,1,x\nb,0,1\n", "s").is_err());
    }
}
