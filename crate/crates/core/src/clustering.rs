//! Server-side clustering of perturbed user embeddings.
//!
//! The default is exact agglomerative Ward clustering. Distances are kept as
//! the Ward merge cost `Δ(A, B) = |A||B| / (|A| + |B|) · ‖c_A − c_B‖²`, which is
//! the increase in total within-cluster sum of squares, and updated after each
//! merge with the Lance–Williams recurrence. Clusters are named by the lowest
//! input index they contain; among equal-cost pairs the lexicographically
//! smallest `(low, high)` pair of names merges first.

use std::collections::BTreeMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::privacy::PerturbedEmbedding;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterAlgorithm {
    Ward,
    Kmeans,
    /// Every client is its own centroid.
    None,
}

impl std::str::FromStr for ClusterAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ward" => Ok(Self::Ward),
            "kmeans" => Ok(Self::Kmeans),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "unknown cluster algorithm `{other}` (expected ward, kmeans or none)"
            ))),
        }
    }
}

/// One agglomeration step: clusters named `low` and `high` (`low < high`)
/// merged at Ward cost `cost`; the result keeps the name `low`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub low: usize,
    pub high: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// Client id to cluster index in `0..centroids.len()`.
    pub assignments: BTreeMap<usize, usize>,
    pub centroids: Vec<Vec<f64>>,
}

impl ClusterModel {
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroid_for_client(&self, client: usize) -> Result<&[f64]> {
        self.assignments
            .get(&client)
            .map(|&c| self.centroids[c].as_slice())
            .ok_or(Error::UnknownClient(client))
    }

    /// Builds the model from a per-point label vector (labels need not be dense).
    fn from_labels(embeddings: &[PerturbedEmbedding], labels: &[usize]) -> Self {
        let mut dense: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in labels {
            let next = dense.len();
            dense.entry(l).or_insert(next);
        }
        // Re-number by label order so cluster indices are ascending in label.
        for (new, (_, slot)) in dense.iter_mut().enumerate() {
            *slot = new;
        }
        let dim = embeddings.first().map_or(0, |e| e.vector.len());
        let mut sums = vec![vec![0.0; dim]; dense.len()];
        let mut counts = vec![0usize; dense.len()];
        let mut assignments = BTreeMap::new();
        for (e, l) in embeddings.iter().zip(labels) {
            let c = dense[l];
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(&e.vector) {
                *s += x;
            }
            assignments.insert(e.client, c);
        }
        let centroids = sums
            .into_iter()
            .zip(counts)
            .map(|(s, n)| s.into_iter().map(|x| x / n as f64).collect())
            .collect();
        ClusterModel {
            assignments,
            centroids,
        }
    }
}

fn check_input(embeddings: &[PerturbedEmbedding]) -> Result<usize> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Empty("embeddings to cluster".into()))?;
    let dim = first.vector.len();
    for e in embeddings {
        if e.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: e.vector.len(),
            });
        }
        if e.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding to cluster"));
        }
    }
    Ok(dim)
}

/// Squared distance accumulated in four interleaved lanes.
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += (x - y) * (x - y);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Symmetric matrix of singleton merge costs `½‖x − y‖²`. Row `i` is
/// contiguous, which keeps the nearest-neighbour scans cache friendly.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseCosts {
    n: usize,
    data: Vec<f64>,
}

impl PairwiseCosts {
    pub fn build(points: &[&[f64]]) -> Self {
        let n = points.len();
        let mut costs = PairwiseCosts {
            n,
            data: vec![0.0; n * n],
        };
        costs
            .data
            .par_chunks_mut(n.max(1))
            .enumerate()
            .for_each(|(i, row)| {
                for (j, slot) in row.iter_mut().enumerate().take(i) {
                    *slot = 0.5 * sq_dist(points[i], points[j]);
                }
            });
        costs.mirror_lower();
        costs
    }

    fn mirror_lower(&mut self) {
        let n = self.n;
        for i in 0..n {
            for j in 0..i {
                self.data[j * n + i] = self.data[i * n + j];
            }
        }
    }

    /// Square matrix of size `n` with every entry zero.
    pub fn zeros(n: usize) -> Self {
        PairwiseCosts {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Replaces the costs of point `i` given all current points.
    /// Rows of absent points may hold anything; they are never read.
    pub fn refresh_row(&mut self, i: usize, points: &[Option<&[f64]>]) {
        let n = self.n;
        let Some(pi) = points[i] else { return };
        for (j, pj) in points.iter().enumerate() {
            // Computed exactly as `build` does, with the larger index first.
            let c = match pj {
                Some(pj) if j != i => {
                    if j < i {
                        0.5 * sq_dist(pi, pj)
                    } else {
                        0.5 * sq_dist(pj, pi)
                    }
                }
                _ => 0.0,
            };
            self.data[i * n + j] = c;
            self.data[j * n + i] = c;
        }
    }

}

/// Orders candidate pairs by cost, then by name pair.
#[inline]
fn less(a: (f64, usize, usize), b: (f64, usize, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && (a.1, a.2) < (b.1, b.2))
}

/// Ward merge sequence that stops once `target` clusters remain.
pub fn ward_merges(points: &[&[f64]], target: usize) -> Vec<Merge> {
    let n = points.len();
    ward_merges_from(&PairwiseCosts::build(points), &(0..n).collect::<Vec<_>>(), target)
}

/// Dense working copy of the costs among the clusters still active, indexed
/// locally. Local order follows name order, so comparisons on local indices
/// give the same tie-breaks as comparisons on names.
struct Working {
    m: usize,
    names: Vec<usize>,
    d: Vec<f64>,
    size: Vec<usize>,
    /// Nearest active neighbour of each row as (cost, local column).
    nearest: Vec<Option<(f64, usize)>>,
    active: Vec<usize>,
}

impl Working {
    fn gather(src: &[f64], stride: usize, rows: &[usize]) -> Vec<f64> {
        let mut d = Vec::with_capacity(rows.len() * rows.len());
        for &r in rows {
            let row = &src[r * stride..(r + 1) * stride];
            d.extend(rows.iter().map(|&c| row[c]));
        }
        d
    }

    // Among equal costs the smallest column also gives the smallest name
    // pair, so a strict `<` scan in ascending column order suffices.
    fn scan(&self, i: usize) -> Option<(f64, usize)> {
        let row = &self.d[i * self.m..(i + 1) * self.m];
        let mut best_cost = f64::INFINITY;
        let mut best_j = usize::MAX;
        for &j in &self.active {
            let c = row[j];
            if c < best_cost && j != i {
                best_cost = c;
                best_j = j;
            }
        }
        (best_j != usize::MAX).then_some((best_cost, best_j))
    }

    fn pair(cost: f64, i: usize, j: usize) -> (f64, usize, usize) {
        if i < j {
            (cost, i, j)
        } else {
            (cost, j, i)
        }
    }

    /// Drops inactive rows and columns.
    fn compact(&mut self) {
        let keep = std::mem::take(&mut self.active);
        let mut local = vec![usize::MAX; self.m];
        for (new, &old) in keep.iter().enumerate() {
            local[old] = new;
        }
        self.d = Self::gather(&self.d, self.m, &keep);
        self.names = keep.iter().map(|&i| self.names[i]).collect();
        self.size = keep.iter().map(|&i| self.size[i]).collect();
        self.nearest = keep
            .iter()
            .map(|&i| self.nearest[i].map(|(c, j)| (c, local[j])))
            .collect();
        self.m = keep.len();
        self.active = (0..self.m).collect();
    }
}

/// Ward merges among the points `alive` (ascending indices into `costs`),
/// starting from singleton costs. Cluster names are the indices of `costs`.
pub fn ward_merges_from(costs: &PairwiseCosts, alive: &[usize], target: usize) -> Vec<Merge> {
    let target = target.max(1);
    debug_assert!(alive.windows(2).all(|w| w[0] < w[1]));
    if alive.len() <= target {
        return Vec::new();
    }
    let m = alive.len();
    let mut w = Working {
        m,
        names: alive.to_vec(),
        d: Working::gather(&costs.data, costs.n, alive),
        size: vec![1; m],
        nearest: vec![None; m],
        active: (0..m).collect(),
    };
    for i in 0..m {
        w.nearest[i] = w.scan(i);
    }

    let mut merges = Vec::with_capacity(m - target);
    while w.active.len() > target {
        let (cost, low, high) = w
            .active
            .iter()
            .filter_map(|&i| w.nearest[i].map(|(c, j)| Working::pair(c, i, j)))
            .reduce(|a, b| if less(b, a) { b } else { a })
            .expect("at least two active clusters");
        merges.push(Merge {
            low: w.names[low],
            high: w.names[high],
            cost,
        });

        let n = w.m;
        let (na, nb) = (w.size[low] as f64, w.size[high] as f64);
        w.active.retain(|&k| k != high);
        w.nearest[high] = None;
        for &k in &w.active {
            if k == low {
                continue;
            }
            let nk = w.size[k] as f64;
            let updated = ((na + nk) * w.d[low * n + k] + (nb + nk) * w.d[high * n + k]
                - nk * cost)
                / (na + nb + nk);
            w.d[low * n + k] = updated;
        }
        for &k in &w.active {
            w.d[k * n + low] = w.d[low * n + k];
        }
        w.size[low] += w.size[high];

        w.nearest[low] = w.scan(low);
        for idx in 0..w.active.len() {
            let k = w.active[idx];
            if k == low {
                continue;
            }
            w.nearest[k] = match w.nearest[k] {
                Some((_, j)) if j == low || j == high => w.scan(k),
                Some(current) => {
                    let cand = (w.d[low * n + k], low);
                    if less(Working::pair(cand.0, k, cand.1), Working::pair(current.0, k, current.1)) {
                        Some(cand)
                    } else {
                        Some(current)
                    }
                }
                None => w.scan(k),
            };
        }
        if w.active.len() * 2 <= w.m && w.m > 64 {
            w.compact();
        }
    }
    merges
}

/// Replays merges with union-find and returns each point's cluster name.
pub fn labels_from_merges(n: usize, merges: &[Merge]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for m in merges {
        let a = find(&mut parent, m.low);
        let b = find(&mut parent, m.high);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        parent[hi] = lo;
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

/// Ward clustering of `embeddings` into `min(count, len)` clusters.
pub fn ward_cluster(embeddings: &[PerturbedEmbedding], count: usize) -> Result<ClusterModel> {
    check_input(embeddings)?;
    let points: Vec<&[f64]> = embeddings.iter().map(|e| e.vector.as_slice()).collect();
    let merges = ward_merges(&points, count);
    let labels = labels_from_merges(points.len(), &merges);
    Ok(ClusterModel::from_labels(embeddings, &labels))
}

/// Ward clustering over a population where only a few members change
/// between calls. Singleton costs are kept for every client id and only the
/// rows of re-uploaded clients are recomputed. Results equal
/// [`ward_cluster`] on the current population in ascending client order.
#[derive(Debug, Clone)]
pub struct IncrementalWard {
    costs: PairwiseCosts,
    vectors: Vec<Option<Vec<f64>>>,
}

impl IncrementalWard {
    pub fn new(num_clients: usize) -> Self {
        IncrementalWard {
            costs: PairwiseCosts::zeros(num_clients),
            vectors: vec![None; num_clients],
        }
    }

    pub fn insert(&mut self, embedding: &PerturbedEmbedding) -> Result<()> {
        let id = embedding.client;
        if id >= self.vectors.len() {
            return Err(Error::UnknownClient(id));
        }
        check_input(std::slice::from_ref(embedding))?;
        if let Some(other) = self.vectors.iter().flatten().next() {
            if other.len() != embedding.vector.len() {
                return Err(Error::DimensionMismatch {
                    expected: other.len(),
                    got: embedding.vector.len(),
                });
            }
        }
        self.vectors[id] = Some(embedding.vector.clone());
        let points: Vec<Option<&[f64]>> = self.vectors.iter().map(|v| v.as_deref()).collect();
        self.costs.refresh_row(id, &points);
        Ok(())
    }

    pub fn cluster(&self, count: usize) -> Result<ClusterModel> {
        let alive: Vec<usize> = (0..self.vectors.len())
            .filter(|&i| self.vectors[i].is_some())
            .collect();
        if alive.is_empty() {
            return Err(Error::Empty("embeddings to cluster".into()));
        }
        let merges = ward_merges_from(&self.costs, &alive, count);
        let labels = labels_from_merges(self.vectors.len(), &merges);
        let embeddings: Vec<PerturbedEmbedding> = alive
            .iter()
            .map(|&i| PerturbedEmbedding {
                client: i,
                vector: self.vectors[i].clone().expect("alive"),
            })
            .collect();
        let alive_labels: Vec<usize> = alive.iter().map(|&i| labels[i]).collect();
        Ok(ClusterModel::from_labels(&embeddings, &alive_labels))
    }
}

/// Lloyd iterations from a k-means++ seeding.
pub fn kmeans_cluster(
    embeddings: &[PerturbedEmbedding],
    count: usize,
    max_iters: usize,
    rng: &mut Rng,
) -> Result<ClusterModel> {
    let dim = check_input(embeddings)?;
    let n = embeddings.len();
    let k = count.max(1).min(n);
    let pts: Vec<&[f64]> = embeddings.iter().map(|e| e.vector.as_slice()).collect();

    let mut centers: Vec<Vec<f64>> = vec![pts[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(pts[next].to_vec());
        for (d, p) in d2.iter_mut().zip(&pts) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }

    let nearest = |centers: &[Vec<f64>], p: &[f64]| {
        let mut best = (f64::INFINITY, 0usize);
        for (c, center) in centers.iter().enumerate() {
            let d = sq_dist(p, center);
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    };
    let mut labels: Vec<usize> = pts.iter().map(|p| nearest(&centers, p)).collect();
    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in pts.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for ((center, sum), &cnt) in centers.iter_mut().zip(sums).zip(&counts) {
            if cnt > 0 {
                *center = sum.into_iter().map(|x| x / cnt as f64).collect();
            }
        }
        let next: Vec<usize> = pts.iter().map(|p| nearest(&centers, p)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(ClusterModel::from_labels(embeddings, &labels))
}

/// Each client forms its own cluster.
pub fn identity_cluster(embeddings: &[PerturbedEmbedding]) -> Result<ClusterModel> {
    check_input(embeddings)?;
    let labels: Vec<usize> = (0..embeddings.len()).collect();
    Ok(ClusterModel::from_labels(embeddings, &labels))
}

pub fn cluster(
    algorithm: ClusterAlgorithm,
    embeddings: &[PerturbedEmbedding],
    count: usize,
    rng: &mut Rng,
) -> Result<ClusterModel> {
    match algorithm {
        ClusterAlgorithm::Ward => ward_cluster(embeddings, count),
        ClusterAlgorithm::Kmeans => kmeans_cluster(embeddings, count, 100, rng),
        ClusterAlgorithm::None => identity_cluster(embeddings),
    }
}
