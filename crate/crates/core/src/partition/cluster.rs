use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{Partition, Provenance};
use crate::error::{Error, Result};
use crate::model::{LayerKind, Model};
use crate::util::{mix_seed, rng};

/// Per-run record of a balanced k-means fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterLog {
    pub layer: usize,
    /// Sum of within-cluster cosine distances after each iteration's centroid
    /// update. Non-increasing.
    pub objective: Vec<f64>,
    pub iterations: usize,
    /// Whether the assignment reached a fixpoint before `max_iters`.
    pub converged: bool,
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

fn cosine_distance(unit_a: &[f64], unit_b: &[f64]) -> f64 {
    1.0 - unit_a.iter().zip(unit_b).map(|(a, b)| a * b).sum::<f64>()
}

struct Fit<'a> {
    rows: &'a [Vec<f64>],
    k: usize,
    capacity: usize,
}

impl Fit<'_> {
    fn distances(&self, centroids: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| centroids.iter().map(|c| cosine_distance(r, c)).collect())
            .collect()
    }

    fn objective(&self, dist: &[Vec<f64>], assign: &[usize]) -> f64 {
        assign.iter().enumerate().map(|(i, &c)| dist[i][c]).sum()
    }

    /// Greedy capacity-constrained assignment. Neurons with the largest
    /// best-minus-second-best margin choose first.
    fn assign(&self, dist: &[Vec<f64>]) -> Vec<usize> {
        let n = self.rows.len();
        let margin: Vec<f64> = dist
            .iter()
            .map(|d| {
                let mut s = d.clone();
                s.sort_by(f64::total_cmp);
                if s.len() > 1 {
                    s[1] - s[0]
                } else {
                    0.0
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| margin[b].total_cmp(&margin[a]).then(a.cmp(&b)));
        let mut load = vec![0usize; self.k];
        let mut assign = vec![0usize; n];
        for i in order {
            let best = (0..self.k)
                .filter(|&c| load[c] < self.capacity)
                .min_by(|&a, &b| dist[i][a].total_cmp(&dist[i][b]).then(a.cmp(&b)))
                .expect("total capacity equals neuron count");
            load[best] += 1;
            assign[i] = best;
        }
        assign
    }

    /// Normalized mean direction of each cluster; keeps the old centroid when
    /// members cancel out exactly.
    fn centroids(&self, assign: &[usize], old: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = self.rows[0].len();
        let mut sums = vec![vec![0.0; d]; self.k];
        for (r, &c) in self.rows.iter().zip(assign) {
            for (s, v) in sums[c].iter_mut().zip(r) {
                *s += v;
            }
        }
        sums.iter()
            .zip(old)
            .map(|(s, o)| {
                let u = normalize(s);
                if u.iter().all(|&x| x == 0.0) {
                    o.clone()
                } else {
                    u
                }
            })
            .collect()
    }

    /// k-means++ seeding under cosine distance.
    fn seed_centroids(&self, r: &mut impl Rng) -> Vec<Vec<f64>> {
        let n = self.rows.len();
        let mut chosen = vec![r.random_range(0..n)];
        let mut nearest: Vec<f64> = self.rows.iter().map(|x| cosine_distance(x, &self.rows[chosen[0]])).collect();
        while chosen.len() < self.k {
            let weights: Vec<f64> = nearest
                .iter()
                .enumerate()
                .map(|(i, &d)| if chosen.contains(&i) { 0.0 } else { d.max(0.0).powi(2) })
                .collect();
            let total: f64 = weights.iter().sum();
            let next = if total > 0.0 {
                let mut u = r.random::<f64>() * total;
                let mut pick = None;
                for (i, &w) in weights.iter().enumerate() {
                    if w > 0.0 {
                        pick = Some(i);
                        if u < w {
                            break;
                        }
                        u -= w;
                    }
                }
                pick.expect("positive total weight")
            } else {
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[r.random_range(0..free.len())]
            };
            chosen.push(next);
            for (i, x) in self.rows.iter().enumerate() {
                nearest[i] = nearest[i].min(cosine_distance(x, &self.rows[next]));
            }
        }
        chosen.into_iter().map(|i| self.rows[i].clone()).collect()
    }
}

/// Relabels clusters in order of their smallest member neuron.
fn canonical_labels(assign: &[usize], k: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for &c in assign {
        if map[c] == usize::MAX {
            map[c] = next;
            next += 1;
        }
    }
    assign.iter().map(|&c| map[c]).collect()
}

/// Balanced k-means over the rows of a dense layer's input matrix under
/// cosine distance, with k-means++ seeding and greedy capacity assignment.
///
/// A new assignment is accepted only when it does not raise the objective
/// under the current centroids, so the logged objective never increases.
/// Clusters are labelled in order of their smallest member.
pub fn cluster_partition(
    model: &Model,
    layer: usize,
    experts: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(Partition, ClusterLog)> {
    let lw = model.layer(layer)?;
    if let LayerKind::Routed { .. } = model.config.layer_kind(layer) {
        return Err(Error::Config(format!("layer {layer} is already a routed MoE layer")));
    }
    let d_ff = lw.w_in.nrows();
    if experts == 0 || d_ff % experts != 0 {
        return Err(Error::Config(format!("{experts} experts do not divide {d_ff} neurons")));
    }
    if lw.w_in.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("layer {layer} has non-finite input weights")));
    }
    let rows: Vec<Vec<f64>> = lw.w_in.rows().into_iter().map(|r| normalize(&r.to_vec())).collect();
    let fit = Fit {
        rows: &rows,
        k: experts,
        capacity: d_ff / experts,
    };
    let mut r = rng(mix_seed(seed, layer as u64));
    let mut centroids = fit.seed_centroids(&mut r);
    let mut assign = fit.assign(&fit.distances(&centroids));
    centroids = fit.centroids(&assign, &centroids);
    let mut dist = fit.distances(&centroids);
    let mut objective = vec![fit.objective(&dist, &assign)];
    let mut converged = false;
    let mut iterations = 1;
    while iterations < max_iters {
        let proposal = fit.assign(&dist);
        if proposal == assign || fit.objective(&dist, &proposal) > fit.objective(&dist, &assign) {
            converged = true;
            break;
        }
        assign = proposal;
        centroids = fit.centroids(&assign, &centroids);
        dist = fit.distances(&centroids);
        objective.push(fit.objective(&dist, &assign));
        iterations += 1;
    }
    let partition = Partition::new(
        experts,
        Provenance::Clustered,
        BTreeMap::from([(layer, canonical_labels(&assign, experts))]),
    )?;
    Ok((
        partition,
        ClusterLog {
            layer,
            objective,
            iterations,
            converged,
        },
    ))
}

/// Clusters several layers in parallel and merges the results.
pub fn cluster_partition_layers(
    model: &Model,
    layers: &[usize],
    experts: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(Partition, Vec<ClusterLog>)> {
    let fits: Vec<(Partition, ClusterLog)> = layers
        .par_iter()
        .map(|&l| cluster_partition(model, l, experts, seed, max_iters))
        .collect::<Result<_>>()?;
    let (parts, logs): (Vec<_>, Vec<_>) = fits.into_iter().unzip();
    Ok((Partition::merge(parts)?, logs))
}
