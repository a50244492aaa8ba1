//! Spherical k-means on unit-norm feature vectors, with an exactly balanced
//! variant and a two-stage (fine then coarse) balanced variant.
//!
//! The balanced assignment step is greedy: every (item, cluster) cosine is
//! sorted descending (ties by item id, then cluster id) and items are placed in
//! that order subject to capacities `⌊n/K⌋`, with `n mod K` clusters allowed
//! one extra item. A reassignment that would lower the objective is rejected,
//! so the objective never decreases between iterations.

use serde::{Deserialize, Serialize};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Tolerance on row norms of a normalized feature set.
pub const UNIT_TOL: f64 = 1e-9;

/// Centroid means shorter than this are treated as degenerate.
const DEGENERATE_NORM: f64 = 1e-12;

/// An `n × dim` matrix of unit-norm rows with one identifier per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSet {
    /// Wraps rows that are already unit-norm.
    pub fn from_unit_rows(ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let set = Self::from_rows(ids, rows)?;
        for i in 0..set.len() {
            let norm = dot(set.row(i), set.row(i)).sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::DimensionMismatch(format!(
                    "row {:?} has norm {norm}, expected 1",
                    set.ids[i]
                )));
            }
        }
        Ok(set)
    }

    fn from_rows(ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.len()
            )));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, row) in ids.iter().zip(rows) {
            if row.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "row {id:?} has {} columns, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { ids, dim, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.len()).map(move |i| self.row(i))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }
}

/// Divides each row by its L2 norm.
pub fn normalize_features(ids: Vec<String>, raw: &[Vec<f64>]) -> Result<FeatureSet> {
    let mut set = FeatureSet::from_rows(ids, raw)?;
    let dim = set.dim;
    for i in 0..set.len() {
        let row = &mut set.data[i * dim..(i + 1) * dim];
        let norm = dot(row, row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroVector {
                id: set.ids[i].clone(),
            });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(set)
}

/// Result of a clustering run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster id per item, in feature-set order.
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Objective `Σ cos(x_i, c_a(i))` after each assignment step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterModel {
    pub fn clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn size_spread(&self) -> usize {
        let max = self.sizes.iter().max().copied().unwrap_or(0);
        let min = self.sizes.iter().min().copied().unwrap_or(0);
        max - min
    }

    /// Recomputes the objective of the final assignment and centroids.
    pub fn objective(&self, features: &FeatureSet) -> f64 {
        features
            .rows()
            .zip(&self.assignment)
            .map(|(x, &k)| dot(x, &self.centroids[k]))
            .sum()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine scores of every item against every centroid, item-major.
fn score_matrix(units: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let row = |x: &Vec<f64>| centroids.iter().map(|c| dot(x, c)).collect::<Vec<_>>();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        units.par_iter().map(row).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        units.iter().map(row).collect()
    }
}

/// Each item goes to its highest-cosine centroid, lowest id on ties.
pub fn assign_to_nearest(features: &FeatureSet, centroids: &[Vec<f64>]) -> Vec<usize> {
    features.rows().map(|x| nearest(x, centroids)).collect()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let s = dot(x, c);
        if s > best_score {
            best = k;
            best_score = s;
        }
    }
    best
}

/// Per-cluster capacities in units of item weight: every cluster may hold
/// `base`, and up to `extra` clusters may hold `base + 1`.
struct Capacity {
    base: usize,
    extra: usize,
}

impl Capacity {
    fn new(total: usize, clusters: usize) -> Self {
        Self {
            base: total / clusters,
            extra: total % clusters,
        }
    }

    /// Whether a cluster at `load` can accept `weight` more, and if so
    /// whether it uses one of the enlarged slots.
    fn admits(&self, load: usize, weight: usize, extra_used: usize) -> Option<bool> {
        if load + weight <= self.base {
            Some(false)
        } else if load + weight <= self.base + 1 && load <= self.base && extra_used < self.extra {
            Some(load + weight == self.base + 1)
        } else {
            None
        }
    }
}

/// Greedy capacity-constrained assignment of weighted items. Items that fit
/// nowhere (only possible with non-unit weights) go to the least-loaded
/// cluster, heaviest first.
fn greedy_balanced(scores: &[Vec<f64>], weights: &[usize], clusters: usize) -> Vec<usize> {
    let n = scores.len();
    let total: usize = weights.iter().sum();
    let cap = Capacity::new(total, clusters);
    let mut order: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..clusters).map(move |k| (i, k)))
        .collect();
    order.sort_by(|&(i, k), &(j, l)| {
        scores[j][l]
            .total_cmp(&scores[i][k])
            .then(i.cmp(&j))
            .then(k.cmp(&l))
    });
    let mut assignment = vec![usize::MAX; n];
    let mut load = vec![0usize; clusters];
    let mut extra_used = 0;
    let mut placed = 0;
    for (i, k) in order {
        if assignment[i] != usize::MAX {
            continue;
        }
        if let Some(uses_extra) = cap.admits(load[k], weights[i], extra_used) {
            assignment[i] = k;
            load[k] += weights[i];
            extra_used += usize::from(uses_extra);
            placed += 1;
            if placed == n {
                break;
            }
        }
    }
    if placed < n {
        let mut left: Vec<usize> = (0..n).filter(|&i| assignment[i] == usize::MAX).collect();
        left.sort_by(|&a, &b| weights[b].cmp(&weights[a]).then(a.cmp(&b)));
        for i in left {
            let k = (0..clusters).min_by_key(|&k| (load[k], k)).unwrap_or(0);
            assignment[i] = k;
            load[k] += weights[i];
        }
    }
    assignment
}

/// Points to cluster: raw member sums (for centroid means and the objective),
/// their unit directions (for scoring), and weights (for capacities).
struct Points {
    sums: Vec<Vec<f64>>,
    units: Vec<Vec<f64>>,
    weights: Vec<usize>,
}

impl Points {
    fn from_features(features: &FeatureSet) -> Self {
        let rows = features.to_rows();
        Self {
            units: rows.clone(),
            sums: rows,
            weights: vec![1; features.len()],
        }
    }

    fn len(&self) -> usize {
        self.units.len()
    }

    fn dim(&self) -> usize {
        self.units.first().map_or(0, Vec::len)
    }

    fn objective(&self, assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
        self.sums
            .iter()
            .zip(assignment)
            .map(|(s, &k)| dot(s, &centroids[k]))
            .sum()
    }
}

/// k-means++ seeding on cosine distance `1 − cos`.
fn seed_centroids(points: &Points, clusters: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut closest: Vec<f64> = points
        .units
        .iter()
        .map(|x| dot(x, &points.units[chosen[0]]))
        .collect();
    while chosen.len() < clusters {
        let dist: Vec<f64> = closest
            .iter()
            .zip(&points.weights)
            .map(|(c, &w)| (1.0 - c).max(0.0) * w as f64)
            .collect();
        let next = match WeightedIndex::new(&dist) {
            Ok(index) => index.sample(rng),
            // Every point coincides with a chosen centroid.
            Err(_) => (0..n).find(|i| !chosen.contains(i)).unwrap_or(0),
        };
        chosen.push(next);
        for (c, x) in closest.iter_mut().zip(&points.units) {
            *c = c.max(dot(x, &points.units[next]));
        }
    }
    chosen.iter().map(|&i| points.units[i].clone()).collect()
}

/// Normalized member means. A cluster whose mean vanishes takes the member
/// farthest from all other centroids; an empty cluster keeps its centroid.
fn update_centroids(points: &Points, assignment: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = points.dim();
    let mut sums = vec![vec![0.0; dim]; previous.len()];
    for (s, &k) in points.sums.iter().zip(assignment) {
        sums[k].iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    let mut next = previous.to_vec();
    let mut degenerate = Vec::new();
    for (k, sum) in sums.into_iter().enumerate() {
        let norm = dot(&sum, &sum).sqrt();
        if norm > DEGENERATE_NORM {
            next[k] = sum.into_iter().map(|v| v / norm).collect();
        } else if assignment.contains(&k) {
            degenerate.push(k);
        }
    }
    for k in degenerate {
        let farthest = (0..points.len())
            .filter(|&i| assignment[i] == k)
            .min_by(|&a, &b| {
                let closeness = |i: usize| {
                    next.iter()
                        .enumerate()
                        .filter(|&(l, _)| l != k)
                        .map(|(_, c)| dot(&points.units[i], c))
                        .fold(f64::NEG_INFINITY, f64::max)
                };
                closeness(a).total_cmp(&closeness(b)).then(a.cmp(&b))
            });
        if let Some(i) = farthest {
            next[k] = points.units[i].clone();
        }
    }
    next
}

struct Run {
    centroids: Vec<Vec<f64>>,
    assignment: Vec<usize>,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// Lloyd iterations with a pluggable assignment step. The objective is
/// guarded at both half-steps so the trace is non-decreasing.
fn lloyd(
    points: &Points,
    clusters: usize,
    max_iters: usize,
    rng: &mut ChaCha8Rng,
    assign: impl Fn(&[Vec<f64>]) -> Vec<usize>,
) -> Run {
    let mut centroids = seed_centroids(points, clusters, rng);
    let mut assignment = assign(&centroids);
    let mut trace = vec![points.objective(&assignment, &centroids)];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let updated = update_centroids(points, &assignment, &centroids);
        if points.objective(&assignment, &updated) >= points.objective(&assignment, &centroids) {
            centroids = updated;
        }
        let current = points.objective(&assignment, &centroids);
        let candidate = assign(&centroids);
        let score = points.objective(&candidate, &centroids);
        if candidate == assignment || score <= current {
            trace.push(current);
            converged = true;
            break;
        }
        trace.push(score);
        assignment = candidate;
    }
    if !converged {
        let updated = update_centroids(points, &assignment, &centroids);
        if points.objective(&assignment, &updated) >= points.objective(&assignment, &centroids) {
            centroids = updated;
        }
    }
    Run {
        centroids,
        assignment,
        trace,
        iterations,
        converged,
    }
}

fn check_counts(items: usize, clusters: usize) -> Result<()> {
    if clusters == 0 || items < clusters {
        return Err(Error::TooFewItems { items, clusters });
    }
    Ok(())
}

fn sizes_of(assignment: &[usize], clusters: usize) -> Vec<usize> {
    let mut sizes = vec![0; clusters];
    assignment.iter().for_each(|&k| sizes[k] += 1);
    sizes
}

/// Spherical k-means with exactly balanced cluster sizes.
pub fn balanced_kmeans(
    features: &FeatureSet,
    clusters: usize,
    max_iters: usize,
    seed: u64,
) -> Result<ClusterModel> {
    check_counts(features.len(), clusters)?;
    let points = Points::from_features(features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = lloyd(&points, clusters, max_iters, &mut rng, |c| {
        greedy_balanced(&score_matrix(&points.units, c), &points.weights, clusters)
    });
    Ok(finish(run, clusters))
}

fn finish(run: Run, clusters: usize) -> ClusterModel {
    ClusterModel {
        sizes: sizes_of(&run.assignment, clusters),
        centroids: run.centroids,
        assignment: run.assignment,
        objective_trace: run.trace,
        iterations: run.iterations,
        converged: run.converged,
    }
}

/// Plain spherical k-means (nearest-centroid assignment, no size constraint).
/// A cluster that empties is re-seeded with the item least similar to its
/// own centroid among clusters that can spare one.
pub fn spherical_kmeans(
    features: &FeatureSet,
    clusters: usize,
    max_iters: usize,
    seed: u64,
) -> Result<ClusterModel> {
    check_counts(features.len(), clusters)?;
    let points = Points::from_features(features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = lloyd(&points, clusters, max_iters, &mut rng, |c| {
        fill_empty(&points, c, assign_units(&points.units, c))
    });
    Ok(finish(run, clusters))
}

fn assign_units(units: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    units.iter().map(|x| nearest(x, centroids)).collect()
}

fn fill_empty(points: &Points, centroids: &[Vec<f64>], mut assignment: Vec<usize>) -> Vec<usize> {
    let clusters = centroids.len();
    let mut sizes = sizes_of(&assignment, clusters);
    for k in 0..clusters {
        if sizes[k] > 0 {
            continue;
        }
        let donor = (0..points.len())
            .filter(|&i| sizes[assignment[i]] > 1)
            .min_by(|&a, &b| {
                let fit = |i: usize| dot(&points.units[i], &centroids[assignment[i]]);
                fit(a).total_cmp(&fit(b)).then(a.cmp(&b))
            });
        if let Some(i) = donor {
            sizes[assignment[i]] -= 1;
            assignment[i] = k;
            sizes[k] = 1;
        }
    }
    assignment
}

/// Two-stage variant: unbalanced spherical k-means into `k_fine` clusters,
/// then balanced clustering of the fine clusters (weighted by member count)
/// into `clusters` coarse clusters. Items inherit their fine cluster's label.
///
/// Fine clusters are relabeled in order of their first member, so with
/// `k_fine = n` stage two sees the items in their original order.
pub fn two_stage_balanced_kmeans(
    features: &FeatureSet,
    clusters: usize,
    k_fine: usize,
    max_iters: usize,
    seed: u64,
) -> Result<ClusterModel> {
    check_counts(features.len(), k_fine)?;
    check_counts(k_fine, clusters)?;
    let fine = spherical_kmeans(features, k_fine, max_iters, seed)?;

    let mut relabel = vec![usize::MAX; k_fine];
    let mut next = 0;
    for &f in &fine.assignment {
        if relabel[f] == usize::MAX {
            relabel[f] = next;
            next += 1;
        }
    }
    let fine_assignment: Vec<usize> = fine.assignment.iter().map(|&f| relabel[f]).collect();
    let groups = next;

    let dim = features.dim();
    let mut sums = vec![vec![0.0; dim]; groups];
    let mut weights = vec![0usize; groups];
    for (x, &g) in features.rows().zip(&fine_assignment) {
        sums[g].iter_mut().zip(x).for_each(|(a, b)| *a += b);
        weights[g] += 1;
    }
    let units = sums
        .iter()
        .zip(&weights)
        .map(|(s, &w)| {
            if w == 1 {
                return s.clone();
            }
            let norm = dot(s, s).sqrt();
            if norm > DEGENERATE_NORM {
                s.iter().map(|v| v / norm).collect()
            } else {
                s.clone()
            }
        })
        .collect();
    let points = Points {
        sums,
        units,
        weights,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = lloyd(&points, clusters, max_iters, &mut rng, |c| {
        greedy_balanced(&score_matrix(&points.units, c), &points.weights, clusters)
    });
    let assignment = fine_assignment.iter().map(|&g| run.assignment[g]).collect();
    Ok(finish(Run { assignment, ..run }, clusters))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| i.to_string()).collect()
    }

    fn circle(degrees: &[f64]) -> FeatureSet {
        let rows: Vec<Vec<f64>> = degrees
            .iter()
            .map(|d| {
                let r = d.to_radians();
                vec![r.cos(), r.sin()]
            })
            .collect();
        FeatureSet::from_unit_rows(ids(rows.len()), &rows).unwrap()
    }

    #[test]
    fn normalization() {
        let f = normalize_features(ids(2), &[vec![3.0, 4.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(f.row(0), &[0.6, 0.8]);
        assert_eq!(f.row(1), &[1.0, 0.0]);
        let err = normalize_features(vec!["a".into(), "z".into()], &[vec![1.0], vec![0.0]]);
        assert!(matches!(err, Err(Error::ZeroVector { id }) if id == "z"));
        assert!(normalize_features(ids(2), &[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn nearest_tie_rules() {
        let f = circle(&[0.0, 45.0, 90.0]);
        let c = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(assign_to_nearest(&f, &c), vec![0, 0, 1]);
        let orth = FeatureSet::from_unit_rows(ids(1), &[vec![0.0, 0.0, 1.0]]).unwrap();
        let c3 = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        assert_eq!(assign_to_nearest(&orth, &c3), vec![0]);
    }

    #[test]
    fn greedy_capacities() {
        let scores = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.7, 0.3]];
        assert_eq!(greedy_balanced(&scores, &[1, 1, 1], 2), vec![0, 0, 1]);
        let flat = vec![vec![0.5; 3]; 7];
        let a = greedy_balanced(&flat, &[1; 7], 3);
        assert_eq!(a, vec![0, 0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn one_point_per_cluster() {
        let f = circle(&[0.0, 120.0, 240.0]);
        let m = balanced_kmeans(&f, 3, 10, 7).unwrap();
        assert_eq!(m.sizes, vec![1, 1, 1]);
        for (i, &k) in m.assignment.iter().enumerate() {
            for (a, b) in m.centroids[k].iter().zip(f.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_points_split_by_item_order() {
        let rows = vec![vec![0.0, 1.0]; 5];
        let f = FeatureSet::from_unit_rows(ids(5), &rows).unwrap();
        let m = balanced_kmeans(&f, 2, 10, 3).unwrap();
        let mut sizes = m.sizes.clone();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 3]);
        let first = m.assignment[0];
        assert_eq!(&m.assignment[..3], &[first; 3]);
    }

    #[test]
    fn circle_matches_brute_force() {
        let f = circle(&[0.0, 10.0, 180.0, 190.0]);
        // Enumerate every 2+2 split with optimal centroids per split.
        let mut best = (f64::NEG_INFINITY, 0u32);
        for mask in 0u32..16 {
            if mask.count_ones() != 2 {
                continue;
            }
            let mut total = 0.0;
            for side in [true, false] {
                let mut sum = [0.0; 2];
                for i in 0..4 {
                    if ((mask >> i) & 1 == 1) == side {
                        sum[0] += f.row(i)[0];
                        sum[1] += f.row(i)[1];
                    }
                }
                total += (sum[0] * sum[0] + sum[1] * sum[1]).sqrt();
            }
            if total > best.0 + 1e-12 {
                best = (total, mask);
            }
        }
        assert!(best.1 == 0b0011 || best.1 == 0b1100);
        for seed in 0..10 {
            let m = balanced_kmeans(&f, 2, 20, seed).unwrap();
            assert_eq!(m.assignment[0], m.assignment[1]);
            assert_eq!(m.assignment[2], m.assignment[3]);
            assert_ne!(m.assignment[0], m.assignment[2]);
            assert!((m.objective(&f) - best.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_items() {
        let f = circle(&[0.0]);
        assert!(matches!(
            balanced_kmeans(&f, 2, 5, 0),
            Err(Error::TooFewItems {
                items: 1,
                clusters: 2
            })
        ));
    }

    #[test]
    fn two_stage_single_coarse_cluster() {
        let f = circle(&[0.0, 30.0, 60.0, 200.0, 220.0]);
        let m = two_stage_balanced_kmeans(&f, 1, 3, 10, 1).unwrap();
        assert_eq!(m.assignment, vec![0; 5]);
        assert_eq!(m.sizes, vec![5]);
    }

    #[test]
    fn two_stage_recovers_blobs() {
        let degrees: Vec<f64> = (0..8)
            .map(|i| i as f64 * 3.0)
            .chain((0..8).map(|i| 180.0 + i as f64 * 3.0))
            .collect();
        let f = circle(&degrees);
        // Inter-blob cosines are all negative.
        for i in 0..8 {
            for j in 8..16 {
                assert!(dot(f.row(i), f.row(j)) < 0.0);
            }
        }
        for seed in 0..5 {
            let m = two_stage_balanced_kmeans(&f, 2, 4, 20, seed).unwrap();
            assert_eq!(m.sizes, vec![8, 8]);
            assert!(m.assignment[..8].iter().all(|&k| k == m.assignment[0]));
            assert!(m.assignment[8..].iter().all(|&k| k == m.assignment[8]));
        }
    }
}
