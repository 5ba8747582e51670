//! K-means with seeded restarts, cluster-quality indices, rank-aggregated
//! selection of the cluster count, and average-linkage agglomerative
//! clustering.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Rows are observations (one per client), columns are standardized
/// statistic dimensions.
#[derive(Debug, Clone)]
pub struct PointSet {
    points: Array2<f64>,
}

impl PointSet {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() < 2 {
            return Err(Error::Clustering(format!(
                "need at least 2 points, got {}",
                points.nrows()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Clustering("points contain NaN or Inf".into()));
        }
        Ok(PointSet { points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Clustering("no points".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Clustering("ragged point rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let arr = Array2::from_shape_vec((rows.len(), cols), flat)
            .map_err(|e| Error::Clustering(e.to_string()))?;
        PointSet::new(arr)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dims(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    fn row(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.points.row(i)
    }
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A clustering of a point set: labels, centroids, and the k-means
/// objective value for them.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Sum of squared distances of points to their centroid.
    pub inertia: f64,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    /// Member indices per cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.k()];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }
}

/// Per-candidate-K scores from [`select_k`].
#[derive(Debug, Clone, Serialize)]
pub struct KScore {
    pub k: usize,
    pub silhouette: f64,
    pub calinski_harabasz: f64,
    pub davies_bouldin: f64,
    pub inertia: f64,
}

/// Options shared by every k-means invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KmeansOptions {
    fn default() -> Self {
        KmeansOptions {
            restarts: 10,
            max_iters: 300,
            tol: 1e-6,
        }
    }
}

/// Lloyd's algorithm from k-means++ seeding, keeping the lowest-inertia
/// result across `restarts`. Empty clusters are repaired by re-seeding the
/// centroid at the point farthest from its current centroid.
pub fn kmeans(
    points: &PointSet,
    k: usize,
    opts: &KmeansOptions,
    rng_seed: u64,
) -> Result<ClusterAssignment> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Clustering(format!(
            "k = {k} outside [1, {n}]"
        )));
    }
    if opts.restarts == 0 || opts.max_iters == 0 || opts.tol <= 0.0 {
        return Err(Error::Clustering(
            "restarts, max_iters, and tol must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut best: Option<ClusterAssignment> = None;
    for _restart in 0..opts.restarts {
        let run = lloyd(points, k, opts, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart ran"))
}

fn kmeanspp_seeds(points: &PointSet, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.gen_range(0..n));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // All remaining mass is zero (duplicate points); pick uniformly.
            rng.gen_range(0..n)
        };
        chosen.push(next);
        for i in 0..n {
            let d = sq_dist(points.row(i), points.row(next));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    chosen
}

fn lloyd(points: &PointSet, k: usize, opts: &KmeansOptions, rng: &mut ChaCha8Rng) -> ClusterAssignment {
    let n = points.len();
    let m = points.dims();
    let seeds = kmeanspp_seeds(points, k, rng);
    let mut centroids = Array2::<f64>::zeros((k, m));
    for (c, &s) in seeds.iter().enumerate() {
        centroids.row_mut(c).assign(&points.row(s));
    }
    let mut labels = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;
    for _iter in 0..opts.max_iters {
        // Assignment step; ties go to the lowest cluster index.
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(points.row(i), centroids.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            labels[i] = best;
        }
        // Repair empty clusters: move the point farthest from its centroid.
        loop {
            let mut counts = vec![0usize; k];
            for &l in &labels {
                counts[l] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let farthest = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(points.row(a), centroids.row(labels[a]));
                    let db = sq_dist(points.row(b), centroids.row(labels[b]));
                    da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                })
                .expect("k <= n guarantees a donor point");
            centroids.row_mut(empty).assign(&points.row(farthest));
            labels[farthest] = empty;
        }
        // Update step.
        let mut sums = Array2::<f64>::zeros((k, m));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let mut row = sums.row_mut(labels[i]);
            row += &points.row(i);
            counts[labels[i]] += 1;
        }
        for c in 0..k {
            let cnt = counts[c].max(1) as f64;
            let mut row = sums.row_mut(c);
            row.mapv_inplace(|v| v / cnt);
        }
        centroids = sums;
        let inertia: f64 = (0..n)
            .map(|i| sq_dist(points.row(i), centroids.row(labels[i])))
            .sum();
        debug_assert!(
            inertia <= prev_inertia + 1e-9 * (1.0 + prev_inertia),
            "lloyd objective increased: {prev_inertia} -> {inertia}"
        );
        let converged = prev_inertia - inertia <= opts.tol;
        prev_inertia = inertia;
        if converged {
            break;
        }
    }
    let inertia: f64 = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(labels[i])))
        .sum();
    ClusterAssignment {
        labels,
        centroids,
        inertia,
    }
}

fn cluster_sizes(labels: &[usize]) -> Result<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Clustering("labels skip a cluster id".into()));
    }
    Ok(counts)
}

/// Mean silhouette coefficient in `[-1, 1]`; singleton clusters score 0.
pub fn silhouette(points: &PointSet, labels: &[usize]) -> Result<f64> {
    let n = points.len();
    if labels.len() != n {
        return Err(Error::Clustering("label/point count mismatch".into()));
    }
    let counts = cluster_sizes(labels)?;
    let k = counts.len();
    if k < 2 {
        return Err(Error::Clustering(
            "silhouette needs at least 2 clusters".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..n {
        if counts[labels[i]] == 1 {
            continue; // scores 0 by convention
        }
        // Mean distance to every cluster.
        let mut sums = vec![0.0f64; k];
        for j in 0..n {
            if i == j {
                continue;
            }
            sums[labels[j]] += sq_dist(points.row(i), points.row(j)).sqrt();
        }
        let own = labels[i];
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Calinski-Harabasz index (higher is better);
/// `(between / (K-1)) / (within / (n-K))`. Zero within-dispersion yields
/// `+inf`, which orders above every finite score.
pub fn calinski_harabasz(points: &PointSet, labels: &[usize]) -> Result<f64> {
    let n = points.len();
    if labels.len() != n {
        return Err(Error::Clustering("label/point count mismatch".into()));
    }
    let counts = cluster_sizes(labels)?;
    let k = counts.len();
    if k < 2 {
        return Err(Error::Clustering("index needs at least 2 clusters".into()));
    }
    if k >= n {
        return Err(Error::Clustering(format!(
            "calinski-harabasz undefined for K = n = {n}"
        )));
    }
    let m = points.dims();
    let mut centroids = Array2::<f64>::zeros((k, m));
    for i in 0..n {
        let mut row = centroids.row_mut(labels[i]);
        row += &points.row(i);
    }
    for c in 0..k {
        let cnt = counts[c] as f64;
        centroids.row_mut(c).mapv_inplace(|v| v / cnt);
    }
    let global = points.points().mean_axis(ndarray::Axis(0)).expect("n >= 2");
    let between: f64 = (0..k)
        .map(|c| counts[c] as f64 * sq_dist(centroids.row(c), global.view()))
        .sum();
    let within: f64 = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(labels[i])))
        .sum();
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

/// Davies-Bouldin index (lower is better); coincident centroids yield the
/// `+inf` sentinel.
pub fn davies_bouldin(points: &PointSet, labels: &[usize]) -> Result<f64> {
    let n = points.len();
    if labels.len() != n {
        return Err(Error::Clustering("label/point count mismatch".into()));
    }
    let counts = cluster_sizes(labels)?;
    let k = counts.len();
    if k < 2 {
        return Err(Error::Clustering("index needs at least 2 clusters".into()));
    }
    let m = points.dims();
    let mut centroids = Array2::<f64>::zeros((k, m));
    for i in 0..n {
        let mut row = centroids.row_mut(labels[i]);
        row += &points.row(i);
    }
    for c in 0..k {
        let cnt = counts[c] as f64;
        centroids.row_mut(c).mapv_inplace(|v| v / cnt);
    }
    // Mean member distance to own centroid.
    let mut spread = vec![0.0f64; k];
    for i in 0..n {
        spread[labels[i]] += sq_dist(points.row(i), centroids.row(labels[i])).sqrt();
    }
    for c in 0..k {
        spread[c] /= counts[c] as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = sq_dist(centroids.row(i), centroids.row(j)).sqrt();
            let r = if d > 0.0 {
                (spread[i] + spread[j]) / d
            } else {
                return Ok(f64::INFINITY);
            };
            worst = worst.max(r);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Result of scanning a K range.
#[derive(Debug, Clone)]
pub struct KSelection {
    pub best_k: usize,
    pub best: ClusterAssignment,
    pub scores: Vec<KScore>,
}

/// Run k-means for every K in `[k_min, k_max]`, rank each K under the three
/// indices (silhouette and CH: higher better; DB: lower better), and pick
/// the K with the smallest rank sum, ties toward smaller K.
pub fn select_k(
    points: &PointSet,
    k_min: usize,
    k_max: usize,
    opts: &KmeansOptions,
    rng_seed: u64,
) -> Result<KSelection> {
    let n = points.len();
    if !(2 <= k_min && k_min <= k_max && k_max <= n.saturating_sub(1)) {
        return Err(Error::Clustering(format!(
            "k range [{k_min}, {k_max}] invalid for {n} points (need 2 <= k_min <= k_max <= n-1)"
        )));
    }
    let mut runs = Vec::new();
    let mut scores = Vec::new();
    for k in k_min..=k_max {
        let assignment = kmeans(points, k, opts, derive_seed(rng_seed, "kmeans_k", k as u64, 0))?;
        let sil = silhouette(points, &assignment.labels)?;
        let ch = calinski_harabasz(points, &assignment.labels)?;
        let db = davies_bouldin(points, &assignment.labels)?;
        scores.push(KScore {
            k,
            silhouette: sil,
            calinski_harabasz: ch,
            davies_bouldin: db,
            inertia: assignment.inertia,
        });
        runs.push(assignment);
    }
    // Dense competition ranks; equal scores share the better rank.
    let rank_of = |values: Vec<f64>, higher_better: bool| -> Vec<usize> {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (values[a], values[b]);
            if higher_better {
                y.partial_cmp(&x).unwrap()
            } else {
                x.partial_cmp(&y).unwrap()
            }
            .then(a.cmp(&b))
        });
        let mut ranks = vec![0usize; values.len()];
        let mut prev: Option<f64> = None;
        let mut rank = 0usize;
        for (pos, &idx) in order.iter().enumerate() {
            if prev != Some(values[idx]) {
                rank = pos;
                prev = Some(values[idx]);
            }
            ranks[idx] = rank;
        }
        ranks
    };
    let sil_ranks = rank_of(scores.iter().map(|s| s.silhouette).collect(), true);
    let ch_ranks = rank_of(scores.iter().map(|s| s.calinski_harabasz).collect(), true);
    let db_ranks = rank_of(scores.iter().map(|s| s.davies_bouldin).collect(), false);
    let mut best_idx = 0usize;
    let mut best_sum = usize::MAX;
    for i in 0..scores.len() {
        let sum = sil_ranks[i] + ch_ranks[i] + db_ranks[i];
        if sum < best_sum {
            best_sum = sum;
            best_idx = i; // scanning ascending K breaks ties toward smaller K
        }
    }
    Ok(KSelection {
        best_k: scores[best_idx].k,
        best: runs.swap_remove(best_idx),
        scores,
    })
}

/// Stopping rule for agglomerative clustering: exactly one of a distance
/// threshold or a fixed cluster count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AgglomCut {
    /// Stop before the first merge whose linkage distance exceeds this.
    Threshold(f64),
    FixedK(usize),
}

/// One merge step: the two active clusters joined (identified by their
/// smallest member index) and the average-linkage distance between them.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeStep {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

/// Bottom-up average-linkage (UPGMA) clustering with Euclidean distances.
/// Returns labels in `0..K`, numbered by each cluster's smallest member.
pub fn agglomerative_cluster(points: &PointSet, cut: AgglomCut) -> Result<Vec<usize>> {
    match cut {
        AgglomCut::Threshold(t) if !(t > 0.0) => {
            return Err(Error::Clustering(format!(
                "distance threshold {t} must be positive"
            )))
        }
        AgglomCut::FixedK(k) if k == 0 || k > points.len() => {
            return Err(Error::Clustering(format!(
                "fixed_k {k} outside [1, {}]",
                points.len()
            )))
        }
        _ => {}
    }
    let n = points.len();
    let target = match cut {
        AgglomCut::FixedK(k) => k,
        AgglomCut::Threshold(_) => 1,
    };
    let mut state = LinkageState::new(points);
    while state.active.len() > target {
        let Some((i, j, d)) = state.closest_pair() else {
            break;
        };
        if let AgglomCut::Threshold(t) = cut {
            if d > t {
                break;
            }
        }
        state.merge(i, j);
    }
    Ok(state.labels(n))
}

/// Full merge trace (to a single cluster); used to cut at any level and by
/// the linkage tests.
pub fn agglomerative_merges(points: &PointSet) -> Vec<MergeStep> {
    let n = points.len();
    let mut state = LinkageState::new(points);
    let mut steps = Vec::with_capacity(n.saturating_sub(1));
    while state.active.len() > 1 {
        let Some((i, j, d)) = state.closest_pair() else {
            break;
        };
        let (a, b) = (state.min_member[i], state.min_member[j]);
        state.merge(i, j);
        steps.push(MergeStep {
            a: a.min(b),
            b: a.max(b),
            distance: d,
        });
    }
    steps
}

/// Active clusters with average pairwise distances maintained through the
/// Lance-Williams update for UPGMA.
struct LinkageState {
    active: Vec<usize>,        // indices into the tables below
    sizes: Vec<usize>,
    min_member: Vec<usize>,    // smallest original index, for deterministic naming
    members: Vec<Vec<usize>>,
    dist: Vec<Vec<f64>>,       // full symmetric matrix over original slots
}

impl LinkageState {
    fn new(points: &PointSet) -> Self {
        let n = points.len();
        let mut dist = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = sq_dist(points.row(i), points.row(j)).sqrt();
                dist[i][j] = d;
                dist[j][i] = d;
            }
        }
        LinkageState {
            active: (0..n).collect(),
            sizes: vec![1; n],
            min_member: (0..n).collect(),
            members: (0..n).map(|i| vec![i]).collect(),
            dist,
        }
    }

    /// Closest active pair; ties broken toward the lexicographically
    /// smallest (min_member_a, min_member_b).
    fn closest_pair(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for (ai, &i) in self.active.iter().enumerate() {
            for &j in &self.active[ai + 1..] {
                let d = self.dist[i][j];
                let key = (
                    self.min_member[i].min(self.min_member[j]),
                    self.min_member[i].max(self.min_member[j]),
                );
                let better = match best {
                    None => true,
                    Some((bi, bj, bd)) => {
                        let bkey = (
                            self.min_member[bi].min(self.min_member[bj]),
                            self.min_member[bi].max(self.min_member[bj]),
                        );
                        d < bd || (d == bd && key < bkey)
                    }
                };
                if better {
                    best = Some((i, j, d));
                }
            }
        }
        best
    }

    fn merge(&mut self, i: usize, j: usize) {
        let (ni, nj) = (self.sizes[i] as f64, self.sizes[j] as f64);
        for &k in &self.active {
            if k == i || k == j {
                continue;
            }
            let d = (ni * self.dist[i][k] + nj * self.dist[j][k]) / (ni + nj);
            self.dist[i][k] = d;
            self.dist[k][i] = d;
        }
        self.sizes[i] += self.sizes[j];
        self.min_member[i] = self.min_member[i].min(self.min_member[j]);
        let moved = std::mem::take(&mut self.members[j]);
        self.members[i].extend(moved);
        self.active.retain(|&a| a != j);
    }

    fn labels(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = self.active.clone();
        order.sort_by_key(|&c| self.min_member[c]);
        let mut labels = vec![0usize; n];
        for (new_id, &c) in order.iter().enumerate() {
            for &p in &self.members[c] {
                labels[p] = new_id;
            }
        }
        labels
    }
}

/// Z-score each column in place; constant columns become all zeros.
pub fn standardize_columns(points: &mut Array2<f64>) {
    let n = points.nrows() as f64;
    for mut col in points.columns_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 0.0 {
            col.mapv_inplace(|v| (v - mean) / std);
        } else {
            col.fill(0.0);
        }
    }
}
