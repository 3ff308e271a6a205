//! Capacity-constrained residual quantization.
//!
//! Each layer runs Lloyd iterations on the current residuals. After every
//! nearest-centroid assignment a repair pass moves items out of clusters
//! whose exposure load exceeds `tau * C_cap`, where `C_cap` is the mean load
//! per cluster. With `tau` unbounded the repair pass is skipped and the
//! procedure is plain RQ-KMeans.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ItemCorpus;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::linalg::{sq_dist, Matrix};

pub const DEFAULT_MAX_ITER: usize = 50;
pub const DEFAULT_EPS_CONV: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapacityMode {
    /// Any capacity violation is an error.
    Strict,
    /// Unfixable items are pinned or parked and reported.
    #[default]
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub item_id: Option<u64>,
    pub cluster: usize,
    pub load: f64,
    pub bound: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOptions {
    pub k: usize,
    /// `None` means unbounded: the repair pass never runs.
    pub tau: Option<f64>,
    pub seed: u64,
    pub max_iter: usize,
    /// Relative change in the objective below which iteration stops.
    pub eps_conv: f64,
    pub mode: CapacityMode,
}

impl LayerOptions {
    pub fn new(k: usize, tau: Option<f64>, seed: u64) -> Self {
        Self {
            k,
            tau,
            seed,
            max_iter: DEFAULT_MAX_ITER,
            eps_conv: DEFAULT_EPS_CONV,
            mode: CapacityMode::Lenient,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerResult {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub loads: Vec<f64>,
    /// Mean squared residual after the last centroid update.
    pub objective: f64,
    pub objective_trace: Vec<f64>,
    pub c_cap: f64,
    pub violations: Vec<Violation>,
    pub iterations: usize,
}

/// Standard D² seeding over unweighted points.
pub fn kmeanspp_init(points: &Matrix, k: usize, seed: u64) -> Result<Matrix> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if n < k {
        return Err(Error::TooFewPoints { needed: k, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut d2: Vec<f64> = points
        .iter_rows()
        .map(|p| sq_dist(p, points.row(first)))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `target` just above the final partial sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("positive mass"))
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        taken[next] = true;
        for (i, p) in points.iter_rows().enumerate() {
            let d = sq_dist(p, points.row(next));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    let mut centroids = Matrix::zeros(k, points.cols());
    for (row, &idx) in chosen.iter().enumerate() {
        centroids.row_mut(row).copy_from_slice(points.row(idx));
    }
    Ok(centroids)
}

/// `V_k = sum of w_i over items assigned to k`.
pub fn cluster_load(assignments: &[usize], weights: &[f64], k: usize) -> Vec<f64> {
    let mut loads = vec![0.0; k];
    for (&z, &w) in assignments.iter().zip(weights) {
        loads[z] += w;
    }
    loads
}

fn nearest(point: &[f64], centroids: &Matrix) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, mu) in centroids.iter_rows().enumerate() {
        let d = sq_dist(point, mu);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn assign_all(points: &Matrix, centroids: &Matrix) -> Vec<usize> {
    (0..points.rows())
        .into_par_iter()
        .map(|i| nearest(points.row(i), centroids))
        .collect()
}

fn update_centroids(points: &Matrix, assignments: &[usize], centroids: &mut Matrix) {
    let k = centroids.rows();
    let mut sums = Matrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (i, &z) in assignments.iter().enumerate() {
        counts[z] += 1;
        for (s, x) in sums.row_mut(z).iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            for (mu, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *mu = s / n;
            }
        }
    }
}

fn objective(points: &Matrix, assignments: &[usize], centroids: &Matrix) -> f64 {
    if points.rows() == 0 {
        return 0.0;
    }
    let total: f64 = assignments
        .iter()
        .enumerate()
        .map(|(i, &z)| sq_dist(points.row(i), centroids.row(z)))
        .sum();
    total / points.rows() as f64
}

struct RepairCtx<'a> {
    points: &'a Matrix,
    weights: &'a [f64],
    ids: &'a [u64],
    pinned: &'a [bool],
    bound: f64,
    mode: CapacityMode,
    layer: usize,
}

fn by_distance_desc(points: &Matrix, centroid: &[f64], members: &mut [usize]) {
    let dist: Vec<(usize, f64)> = members
        .iter()
        .map(|&i| (i, sq_dist(points.row(i), centroid)))
        .collect();
    let mut dist = dist;
    dist.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (slot, (i, _)) in members.iter_mut().zip(dist) {
        *slot = i;
    }
}

/// Greedy repair: overloaded clusters in descending overload, members in
/// descending distance, each moved to the nearest cluster with room.
fn repair(
    ctx: &RepairCtx<'_>,
    centroids: &Matrix,
    assignments: &mut [usize],
    loads: &mut [f64],
) -> Result<Vec<Violation>> {
    let k = centroids.rows();
    let bound = ctx.bound;
    let mut violations = Vec::new();
    let mut overloaded: Vec<usize> = (0..k).filter(|&c| loads[c] > bound).collect();
    overloaded.sort_by(|&a, &b| (loads[b] - bound).total_cmp(&(loads[a] - bound)).then(a.cmp(&b)));

    for c in overloaded {
        let mut members: Vec<usize> = (0..assignments.len())
            .filter(|&i| assignments[i] == c && !ctx.pinned[i])
            .collect();
        by_distance_desc(ctx.points, centroids.row(c), &mut members);
        let mut stuck = Vec::new();
        for &i in &members {
            if loads[c] <= bound {
                break;
            }
            let w = ctx.weights[i];
            let target = (0..k)
                .filter(|&t| t != c && loads[t] + w <= bound)
                .map(|t| (t, sq_dist(ctx.points.row(i), centroids.row(t))))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            match target {
                Some((t, _)) => {
                    assignments[i] = t;
                    loads[c] -= w;
                    loads[t] += w;
                }
                None => stuck.push(i),
            }
        }
        if loads[c] <= bound {
            continue;
        }
        let only_pinned = members.iter().all(|&i| assignments[i] != c);
        if only_pinned {
            // the pinned items were already reported when the layer started
            continue;
        }
        match ctx.mode {
            CapacityMode::Strict => {
                return Err(Error::CapacityInfeasible {
                    layer: ctx.layer,
                    cluster: c,
                    load: loads[c],
                    bound,
                })
            }
            CapacityMode::Lenient => {
                for &i in &stuck {
                    if loads[c] <= bound {
                        break;
                    }
                    let w = ctx.weights[i];
                    let t = (0..k)
                        .filter(|&t| t != c)
                        .min_by(|&a, &b| loads[a].total_cmp(&loads[b]).then(a.cmp(&b)));
                    if let Some(t) = t {
                        if loads[t] + w < loads[c] {
                            assignments[i] = t;
                            loads[c] -= w;
                            loads[t] += w;
                            violations.push(Violation {
                                item_id: Some(ctx.ids[i]),
                                cluster: t,
                                load: loads[t],
                                bound,
                                reason: "no cluster had room; parked in least-loaded cluster".into(),
                            });
                        }
                    }
                }
                if loads[c] > bound {
                    violations.push(Violation {
                        item_id: None,
                        cluster: c,
                        load: loads[c],
                        bound,
                        reason: "cluster still overloaded after repair".into(),
                    });
                }
            }
        }
    }
    Ok(violations)
}

/// Moves the farthest member of the heaviest cluster into each empty cluster.
fn reseed_empty(
    points: &Matrix,
    weights: &[f64],
    pinned: &[bool],
    assignments: &mut [usize],
    centroids: &mut Matrix,
) {
    let k = centroids.rows();
    loop {
        let mut counts = vec![0usize; k];
        for &z in assignments.iter() {
            counts[z] += 1;
        }
        let Some(empty) = (0..k).find(|&c| counts[c] == 0) else {
            return;
        };
        let loads = cluster_load(assignments, weights, k);
        let source = (0..k)
            .filter(|&c| {
                counts[c] >= 2 && (0..assignments.len()).any(|i| assignments[i] == c && !pinned[i])
            })
            .max_by(|&a, &b| loads[a].total_cmp(&loads[b]).then(b.cmp(&a)));
        let Some(source) = source else {
            return;
        };
        let mut members: Vec<usize> = (0..assignments.len())
            .filter(|&i| assignments[i] == source && !pinned[i])
            .collect();
        by_distance_desc(points, centroids.row(source), &mut members);
        let moved = members[0];
        assignments[moved] = empty;
        centroids.row_mut(empty).copy_from_slice(points.row(moved));
    }
}

/// One layer of capacity-constrained k-means over residual vectors.
///
/// `layer` and `ids` only label errors and violation reports.
pub fn capacity_kmeans_layer(
    points: &Matrix,
    weights: &[f64],
    ids: &[u64],
    layer: usize,
    opts: &LayerOptions,
) -> Result<LayerResult> {
    let n = points.rows();
    if weights.len() != n || ids.len() != n {
        return Err(Error::Dimension(format!(
            "{n} points but {} weights and {} ids",
            weights.len(),
            ids.len()
        )));
    }
    if let Some(i) = weights.iter().position(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "item {} has non-positive weight {}",
            ids[i], weights[i]
        )));
    }
    if let Some(tau) = opts.tau {
        if !(tau >= 1.0) {
            return Err(Error::Config(format!("tolerance must be >= 1, got {tau}")));
        }
    }
    let k = opts.k;
    let total: f64 = weights.iter().sum();
    let c_cap = total / k.max(1) as f64;
    let bound = opts.tau.map(|tau| tau * c_cap);

    let mut violations = Vec::new();
    let mut pinned = vec![false; n];
    if let Some(bound) = bound {
        for i in 0..n {
            if weights[i] > bound {
                match opts.mode {
                    CapacityMode::Strict => {
                        return Err(Error::ItemOverCapacity {
                            layer,
                            item_id: ids[i],
                            weight: weights[i],
                            bound,
                        })
                    }
                    CapacityMode::Lenient => {
                        pinned[i] = true;
                        violations.push(Violation {
                            item_id: Some(ids[i]),
                            cluster: usize::MAX,
                            load: weights[i],
                            bound,
                            reason: "item heavier than the capacity bound; pinned to nearest cluster"
                                .into(),
                        });
                    }
                }
            }
        }
    }

    let mut centroids = kmeanspp_init(points, k, opts.seed)?;
    let mut assignments = vec![0usize; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut last_violations = Vec::new();
    let max_iter = opts.max_iter.max(1);
    while iterations < max_iter {
        iterations += 1;
        let mut next = assign_all(points, &centroids);
        let mut loads = cluster_load(&next, weights, k);
        if let Some(bound) = bound {
            let ctx = RepairCtx {
                points,
                weights,
                ids,
                pinned: &pinned,
                bound,
                mode: opts.mode,
                layer,
            };
            last_violations = repair(&ctx, &centroids, &mut next, &mut loads)?;
        }
        reseed_empty(points, weights, &pinned, &mut next, &mut centroids);
        update_centroids(points, &next, &mut centroids);
        let unchanged = iterations > 1 && next == assignments;
        assignments = next;
        let j = objective(points, &assignments, &centroids);
        let converged = match trace.last() {
            Some(&prev) => {
                let prev: f64 = prev;
                (prev - j).abs() < opts.eps_conv * prev.max(f64::MIN_POSITIVE)
            }
            None => false,
        };
        trace.push(j);
        if converged || unchanged {
            break;
        }
    }
    violations.extend(last_violations);
    let loads = cluster_load(&assignments, weights, k);
    Ok(LayerResult {
        objective: *trace.last().unwrap_or(&0.0),
        assignments,
        centroids,
        loads,
        objective_trace: trace,
        c_cap,
        violations,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticId {
    pub item_id: u64,
    #[serde(rename = "sid")]
    pub codes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Codebook {
    #[serde(rename = "L")]
    pub num_layers: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// `null` when unbounded.
    pub tau: Option<f64>,
    pub c_cap_per_layer: Vec<f64>,
    pub layers: Vec<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Codebook {
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.num_layers || self.c_cap_per_layer.len() != self.num_layers {
            return Err(Error::Dimension(format!(
                "codebook declares {} layers but stores {} tables and {} caps",
                self.num_layers,
                self.layers.len(),
                self.c_cap_per_layer.len()
            )));
        }
        if let Some(tau) = self.tau {
            if !(tau >= 1.0) {
                return Err(Error::Config(format!("tolerance must be >= 1, got {tau}")));
            }
        }
        let d = self.layers.first().map_or(0, Matrix::cols);
        for (l, table) in self.layers.iter().enumerate() {
            if table.rows() != self.k || table.cols() != d {
                return Err(Error::Dimension(format!(
                    "layer {l} is {}x{}, expected {}x{d}",
                    table.rows(),
                    table.cols(),
                    self.k
                )));
            }
        }
        Ok(())
    }

    /// Sum of the selected centroids across layers.
    pub fn reconstruct(&self, codes: &[u32]) -> Vec<f64> {
        let d = self.layers.first().map_or(0, Matrix::cols);
        let mut out = vec![0.0; d];
        for (table, &code) in self.layers.iter().zip(codes) {
            for (o, c) in out.iter_mut().zip(table.row(code as usize)) {
                *o += c;
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cb: Codebook = jsonl::read_json(path)?;
        cb.validate()?;
        Ok(cb)
    }
}

pub fn save_sids(path: &Path, sids: &[SemanticId]) -> Result<()> {
    jsonl::write_jsonl(path, sids)
}

pub fn load_sids(path: &Path) -> Result<Vec<SemanticId>> {
    jsonl::read_jsonl(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RqOptions {
    pub num_layers: usize,
    pub k: usize,
    pub tau: Option<f64>,
    pub seed: u64,
    pub max_iter: usize,
    pub eps_conv: f64,
    pub mode: CapacityMode,
}

impl RqOptions {
    pub fn new(num_layers: usize, k: usize, tau: Option<f64>, seed: u64) -> Self {
        Self {
            num_layers,
            k,
            tau,
            seed,
            max_iter: DEFAULT_MAX_ITER,
            eps_conv: DEFAULT_EPS_CONV,
            mode: CapacityMode::Lenient,
        }
    }

    pub fn strict(mut self) -> Self {
        self.mode = CapacityMode::Strict;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub objective: f64,
    pub objective_trace: Vec<f64>,
    pub max_load: f64,
    pub c_cap: f64,
    pub iterations: usize,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RqOutput {
    /// One entry per item, ordered by ascending item_id.
    pub sids: Vec<SemanticId>,
    pub codebook: Codebook,
    pub layers: Vec<LayerReport>,
}

/// Residual quantization with per-layer capacity repair. Items are processed
/// in ascending `item_id` order so codes do not depend on input order; layer
/// `l` is seeded with `seed + l`.
pub fn capacity_constrained_rq(corpus: &ItemCorpus, opts: &RqOptions) -> Result<RqOutput> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("cannot quantize an empty corpus".into()));
    }
    if opts.num_layers == 0 {
        return Err(Error::Config("need at least one layer".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by_key(|&i| corpus.items()[i].item_id);
    let items: Vec<_> = order.iter().map(|&i| &corpus.items()[i]).collect();
    let ids: Vec<u64> = items.iter().map(|it| it.item_id).collect();
    let weights: Vec<f64> = items.iter().map(|it| it.exposure_weight).collect();
    let mut residuals = Matrix::from_rows(
        &items.iter().map(|it| it.embedding.clone()).collect::<Vec<_>>(),
    )?;

    let mut codes = vec![Vec::with_capacity(opts.num_layers); items.len()];
    let mut tables = Vec::with_capacity(opts.num_layers);
    let mut caps = Vec::with_capacity(opts.num_layers);
    let mut reports = Vec::with_capacity(opts.num_layers);
    for layer in 0..opts.num_layers {
        let layer_opts = LayerOptions {
            k: opts.k,
            tau: opts.tau,
            seed: opts.seed.wrapping_add(layer as u64),
            max_iter: opts.max_iter,
            eps_conv: opts.eps_conv,
            mode: opts.mode,
        };
        let result = capacity_kmeans_layer(&residuals, &weights, &ids, layer, &layer_opts)?;
        for (i, &z) in result.assignments.iter().enumerate() {
            codes[i].push(z as u32);
            let mu = result.centroids.row(z).to_vec();
            for (r, m) in residuals.row_mut(i).iter_mut().zip(&mu) {
                *r -= m;
            }
        }
        reports.push(LayerReport {
            objective: result.objective,
            objective_trace: result.objective_trace,
            max_load: result.loads.iter().copied().fold(0.0, f64::max),
            c_cap: result.c_cap,
            iterations: result.iterations,
            violations: result.violations,
        });
        caps.push(result.c_cap);
        tables.push(result.centroids);
    }
    let sids = ids
        .iter()
        .zip(codes)
        .map(|(&item_id, codes)| SemanticId { item_id, codes })
        .collect();
    Ok(RqOutput {
        sids,
        codebook: Codebook {
            num_layers: opts.num_layers,
            k: opts.k,
            tau: opts.tau,
            c_cap_per_layer: caps,
            layers: tables,
            config_digest: None,
            seed: Some(opts.seed),
        },
        layers: reports,
    })
}

/// Unconstrained RQ-KMeans: the same procedure with the repair pass disabled.
pub fn rq_kmeans_baseline(corpus: &ItemCorpus, num_layers: usize, k: usize, seed: u64) -> Result<RqOutput> {
    capacity_constrained_rq(corpus, &RqOptions::new(num_layers, k, None, seed))
}

/// Total squared reconstruction error of the corpus under the given codes.
pub fn reconstruction_error(corpus: &ItemCorpus, out: &RqOutput) -> f64 {
    let pos = corpus.position_of();
    out.sids
        .iter()
        .map(|sid| {
            let item = &corpus.items()[pos[&sid.item_id]];
            sq_dist(&item.embedding, &out.codebook.reconstruct(&sid.codes))
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn ids(n: usize) -> Vec<u64> {
        (0..n as u64).collect()
    }

    #[test]
    fn loads_by_direct_summation() {
        assert_eq!(cluster_load(&[0, 0, 1], &[2.0, 3.0, 5.0], 2), vec![5.0, 5.0]);
        assert_eq!(cluster_load(&[1, 1, 1], &[2.0, 3.0, 5.0], 3), vec![0.0, 10.0, 0.0]);
    }

    #[test]
    fn kmeanspp_uses_every_point_when_k_equals_n() {
        let p = pts(&[[0.0, 0.0], [1.0, 0.0], [5.0, 5.0], [-3.0, 2.0]]);
        let c = kmeanspp_init(&p, 4, 11).unwrap();
        let mut rows: Vec<Vec<f64>> = c.iter_rows().map(<[f64]>::to_vec).collect();
        let mut want: Vec<Vec<f64>> = p.iter_rows().map(<[f64]>::to_vec).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, want);
    }

    #[test]
    fn kmeanspp_single_centroid_is_an_input_point() {
        let p = pts(&[[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]]);
        let c = kmeanspp_init(&p, 1, 3).unwrap();
        assert!(p.iter_rows().any(|r| r == c.row(0)));
    }

    #[test]
    fn kmeanspp_rejects_too_few_points() {
        let p = pts(&[[0.0, 0.0]]);
        assert!(matches!(
            kmeanspp_init(&p, 2, 0),
            Err(Error::TooFewPoints { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn kmeanspp_handles_duplicate_points() {
        let p = pts(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]);
        let c = kmeanspp_init(&p, 3, 5).unwrap();
        assert_eq!(c.rows(), 3);
    }

    #[test]
    fn symmetric_pairs_fill_both_clusters_exactly() {
        let p = pts(&[[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0]]);
        let opts = LayerOptions {
            mode: CapacityMode::Strict,
            ..LayerOptions::new(2, Some(1.0), 1)
        };
        let r = capacity_kmeans_layer(&p, &[1.0; 4], &ids(4), 0, &opts).unwrap();
        assert_eq!(r.loads, vec![2.0, 2.0]);
        assert_eq!(r.c_cap, 2.0);
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
    }

    #[test]
    fn repair_splits_an_overloaded_blob() {
        // three points in one tight blob and one far away; equal weights, K=2,
        // tau=1 forces two items per cluster
        let p = pts(&[[0.0, 0.0], [0.1, 0.0], [0.2, 0.0], [10.0, 10.0]]);
        let opts = LayerOptions {
            mode: CapacityMode::Strict,
            ..LayerOptions::new(2, Some(1.0), 4)
        };
        let r = capacity_kmeans_layer(&p, &[1.0; 4], &ids(4), 0, &opts).unwrap();
        assert_eq!(r.loads, vec![2.0, 2.0]);
        let unconstrained = capacity_kmeans_layer(&p, &[1.0; 4], &ids(4), 0, &LayerOptions::new(2, None, 4)).unwrap();
        let mut l = unconstrained.loads.clone();
        l.sort_by(f64::total_cmp);
        assert_eq!(l, vec![1.0, 3.0]);
    }

    #[test]
    fn heavy_item_strict_vs_lenient() {
        let p = pts(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]);
        let w = [10.0, 1.0, 1.0, 1.0];
        let strict = LayerOptions {
            mode: CapacityMode::Strict,
            ..LayerOptions::new(2, Some(1.05), 0)
        };
        match capacity_kmeans_layer(&p, &w, &[7, 8, 9, 10], 2, &strict) {
            Err(Error::ItemOverCapacity { item_id, layer, .. }) => {
                assert_eq!(item_id, 7);
                assert_eq!(layer, 2);
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
        let lenient = LayerOptions::new(2, Some(1.05), 0);
        let r = capacity_kmeans_layer(&p, &w, &[7, 8, 9, 10], 2, &lenient).unwrap();
        assert!(r.violations.iter().any(|v| v.item_id == Some(7)));
    }

    #[test]
    fn unbounded_tau_matches_plain_lloyd() {
        let p = pts(&[[0.0, 0.0], [0.3, 0.1], [4.0, 4.0], [4.2, 3.9], [9.0, 0.0], [8.8, 0.3]]);
        let w = [5.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let a = capacity_kmeans_layer(&p, &w, &ids(6), 0, &LayerOptions::new(3, None, 9)).unwrap();
        // hand-rolled Lloyd from the same seeding
        let mut c = kmeanspp_init(&p, 3, 9).unwrap();
        let mut z = vec![0; 6];
        for _ in 0..50 {
            z = (0..6).map(|i| nearest(p.row(i), &c)).collect();
            update_centroids(&p, &z, &mut c);
        }
        assert_eq!(a.assignments, z);
        assert_eq!(a.centroids, c);
    }

    #[test]
    fn codebook_rejects_bad_shapes() {
        let cb = Codebook {
            num_layers: 2,
            k: 2,
            tau: Some(1.05),
            c_cap_per_layer: vec![1.0, 1.0],
            layers: vec![Matrix::zeros(2, 3)],
            config_digest: None,
            seed: None,
        };
        assert!(cb.validate().is_err());
    }
}
