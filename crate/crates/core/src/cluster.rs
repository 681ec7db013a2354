//! Agglomerative hierarchical clustering with medoid representatives.
//!
//! Items are identified by their index `0..n`. A cluster is always stored in
//! the slot of its smallest member, so "merge ties go to the pair with the
//! smallest member ids" is the lexicographic minimum over `(distance, i, j)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    Single,
    Complete,
    #[default]
    Average,
}

/// Symmetric dissimilarities with a zero diagonal, stored as the strict upper triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

#[inline]
fn condensed_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

impl DistanceMatrix {
    /// Evaluates `f(i, j)` for every `i < j`, rows in parallel.
    pub fn try_from_fn<F>(n: usize, f: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> Result<f64> + Sync,
    {
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (i + 1..n).map(|j| f(i, j)).collect::<Result<Vec<f64>>>())
            .collect::<Result<_>>()?;
        Ok(DistanceMatrix {
            n,
            values: rows.into_iter().flatten().collect(),
        })
    }

    pub fn from_fn<F>(n: usize, f: F) -> Self
    where
        F: Fn(usize, usize) -> f64 + Sync,
    {
        Self::try_from_fn(n, |i, j| Ok(f(i, j))).expect("infallible")
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Less => self.values[condensed_index(self.n, i, j)],
            std::cmp::Ordering::Greater => self.values[condensed_index(self.n, j, i)],
        }
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let (lo, hi) = (i.min(j), i.max(j));
        let idx = condensed_index(self.n, lo, hi);
        self.values[idx] = v;
    }
}

/// One merge step: cluster `b` is absorbed into cluster `a` (`a < b`, both
/// named by their smallest member).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    /// Ascending item ids.
    pub members: Vec<usize>,
    pub medoid: usize,
}

const NONE: usize = usize::MAX;

struct NearestCache {
    nn: Vec<usize>,
    dist: Vec<f64>,
}

impl NearestCache {
    fn refresh(&mut self, d: &DistanceMatrix, active: &[bool], i: usize) {
        let (mut best, mut best_d) = (NONE, f64::INFINITY);
        for j in i + 1..active.len() {
            if active[j] {
                let v = d.get(i, j);
                if v < best_d || best == NONE {
                    best = j;
                    best_d = v;
                }
            }
        }
        self.nn[i] = best;
        self.dist[i] = best_d;
    }
}

/// Runs agglomeration until `stop_at` clusters remain and returns the merges in order.
pub fn merge_sequence(dist: &DistanceMatrix, linkage: Linkage, stop_at: usize) -> Vec<Merge> {
    let n = dist.len();
    let stop_at = stop_at.max(1);
    let mut work = dist.clone();
    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut cache = NearestCache {
        nn: vec![NONE; n],
        dist: vec![f64::INFINITY; n],
    };
    for i in 0..n {
        cache.refresh(&work, &active, i);
    }

    let mut merges = Vec::with_capacity(n.saturating_sub(stop_at));
    let mut remaining = n;
    while remaining > stop_at {
        let mut a = NONE;
        for i in 0..n {
            if active[i] && cache.nn[i] != NONE && (a == NONE || cache.dist[i] < cache.dist[a]) {
                a = i;
            }
        }
        if a == NONE {
            break;
        }
        let b = cache.nn[a];
        merges.push(Merge {
            a,
            b,
            distance: cache.dist[a],
        });

        let (na, nb) = (size[a] as f64, size[b] as f64);
        for k in (0..n).filter(|&k| active[k] && k != a && k != b) {
            let (dka, dkb) = (work.get(k, a), work.get(k, b));
            let merged = match linkage {
                Linkage::Single => dka.min(dkb),
                Linkage::Complete => dka.max(dkb),
                Linkage::Average => (na * dka + nb * dkb) / (na + nb),
            };
            work.set(k, a, merged);
        }
        active[b] = false;
        size[a] += size[b];
        remaining -= 1;

        cache.refresh(&work, &active, a);
        for k in 0..b {
            if !active[k] || k == a {
                continue;
            }
            if cache.nn[k] == a || cache.nn[k] == b {
                cache.refresh(&work, &active, k);
            } else if k < a {
                let v = work.get(k, a);
                if v < cache.dist[k] || (v == cache.dist[k] && a < cache.nn[k]) {
                    cache.nn[k] = a;
                    cache.dist[k] = v;
                }
            }
        }
        cache.nn[b] = NONE;
    }
    merges
}

/// Replays the first `n - k` merges and returns the resulting groups,
/// ordered by smallest member, members ascending.
pub fn partition_at(n: usize, merges: &[Merge], k: usize) -> Vec<Vec<usize>> {
    let steps = n.saturating_sub(k).min(merges.len());
    let mut groups: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for m in &merges[..steps] {
        let moved = std::mem::take(&mut groups[m.b]);
        groups[m.a].extend(moved);
    }
    groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect()
}

/// The member minimizing the summed dissimilarity to all members; ties go to the smallest id.
pub fn cluster_medoid(members: &[usize], dissim: impl Fn(usize, usize) -> f64) -> usize {
    let mut best: Option<(f64, usize)> = None;
    for &c in members {
        let total: f64 = members.iter().filter(|&&o| o != c).map(|&o| dissim(c, o)).sum();
        let better = match best {
            None => true,
            Some((bt, bid)) => total < bt || (total == bt && c < bid),
        };
        if better {
            best = Some((total, c));
        }
    }
    best.expect("cluster_medoid on an empty cluster").1
}

fn with_medoids(dist: &DistanceMatrix, groups: Vec<Vec<usize>>) -> Vec<Cluster> {
    groups
        .into_par_iter()
        .map(|members| {
            let medoid = cluster_medoid(&members, |i, j| dist.get(i, j));
            Cluster { members, medoid }
        })
        .collect()
}

/// Clusters a precomputed matrix into `target_k` clusters.
pub fn cluster_matrix(dist: &DistanceMatrix, target_k: usize, linkage: Linkage) -> Result<Vec<Cluster>> {
    if target_k == 0 {
        return Err(Error::Argument("target_k must be at least 1".into()));
    }
    if dist.is_empty() {
        return Err(Error::Argument("cannot cluster an empty item set".into()));
    }
    if target_k > dist.len() {
        log::warn!(
            "requested {target_k} clusters from {} items; returning singletons",
            dist.len()
        );
    }
    let merges = merge_sequence(dist, linkage, target_k);
    Ok(with_medoids(dist, partition_at(dist.len(), &merges, target_k)))
}

/// Clusters for several target sizes from a single agglomeration run.
pub fn cluster_matrix_at_sizes(
    dist: &DistanceMatrix,
    sizes: &[usize],
    linkage: Linkage,
) -> Result<Vec<Vec<Cluster>>> {
    let Some(&smallest) = sizes.iter().min() else {
        return Ok(Vec::new());
    };
    if smallest == 0 {
        return Err(Error::Argument("cluster counts must be at least 1".into()));
    }
    if dist.is_empty() {
        return Err(Error::Argument("cannot cluster an empty item set".into()));
    }
    let merges = merge_sequence(dist, linkage, smallest);
    Ok(sizes
        .iter()
        .map(|&k| with_medoids(dist, partition_at(dist.len(), &merges, k)))
        .collect())
}

/// Agglomerative clustering of `n_items` items under a pairwise dissimilarity.
pub fn agglomerative_cluster<F>(n_items: usize, dissim: F, target_k: usize, linkage: Linkage) -> Result<Vec<Cluster>>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    cluster_matrix(&DistanceMatrix::from_fn(n_items, dissim), target_k, linkage)
}
