//! Planar Delaunay triangulation for small point sets.
//!
//! Incremental Bowyer–Watson insertion with ghost triangles for the hull, on
//! top of exact orientation and in-circle predicates. Cocircular inputs are
//! resolved by simulation of simplicity: point `i` is lifted onto the
//! paraboloid with an extra height `ε^(i+1)`, so the lowest-index point of a
//! degenerate quadruple decides the in-circle sign. The result is therefore a
//! unique triangulation for any input order of the same indexed points.
//!
//! Exactly coincident points are separated by a tiny index-scaled offset
//! before triangulating.

use std::collections::{BTreeSet, HashSet};

use robust::{incircle, orient2d, Coord};
use serde::{Deserialize, Serialize};

const GHOST: usize = usize::MAX;

/// Relative size of the offset applied to duplicate points.
const DUPLICATE_EPS: f64 = 1e-9;

/// Unordered vertex pairs, stored as `(lo, hi)` with `lo < hi`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeSet {
    pairs: BTreeSet<(usize, usize)>,
}

impl EdgeSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts the unordered pair `{a, b}`. Self-loops are ignored.
    pub fn insert(&mut self, a: usize, b: usize) -> bool {
        if a == b {
            return false;
        }
        self.pairs.insert((a.min(b), a.max(b)))
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.pairs.contains(&(a.min(b), a.max(b)))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    /// Renames every vertex through `map`.
    pub fn relabel(&self, map: impl Fn(usize) -> usize) -> EdgeSet {
        let mut out = EdgeSet::new();
        for (a, b) in self.iter() {
            out.insert(map(a), map(b));
        }
        out
    }
}

impl FromIterator<(usize, usize)> for EdgeSet {
    fn from_iter<I: IntoIterator<Item = (usize, usize)>>(iter: I) -> Self {
        let mut set = EdgeSet::new();
        for (a, b) in iter {
            set.insert(a, b);
        }
        set
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Triangulation {
    /// Counter-clockwise vertex triples.
    pub triangles: Vec<[usize; 3]>,
    pub edges: EdgeSet,
    /// Number of points that coincided with an earlier point and were nudged.
    pub perturbed_duplicates: usize,
}

fn coord(p: (f64, f64)) -> Coord<f64> {
    Coord { x: p.0, y: p.1 }
}

fn orient(pts: &[(f64, f64)], a: usize, b: usize, c: usize) -> f64 {
    orient2d(coord(pts[a]), coord(pts[b]), coord(pts[c]))
}

/// True when `d` lies inside the circumcircle of the counter-clockwise
/// triangle `(a, b, c)` after symbolic perturbation.
pub(crate) fn in_circle_perturbed(pts: &[(f64, f64)], a: usize, b: usize, c: usize, d: usize) -> bool {
    let det = incircle(coord(pts[a]), coord(pts[b]), coord(pts[c]), coord(pts[d]));
    if det != 0.0 {
        return det > 0.0;
    }
    // d(det)/d(lift_r) for each of the four rows; the lowest index dominates.
    let mut terms = [
        (a, orient(pts, b, c, d)),
        (b, -orient(pts, a, c, d)),
        (c, orient(pts, a, b, d)),
        (d, -orient(pts, a, b, c)),
    ];
    terms.sort_by_key(|&(idx, _)| idx);
    terms
        .iter()
        .find(|&&(_, v)| v != 0.0)
        .is_some_and(|&(_, v)| v > 0.0)
}

fn separate_duplicates(points: &[(f64, f64)]) -> (Vec<(f64, f64)>, usize) {
    let extent = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, y)| {
            (lo.min(x).min(y), hi.max(x).max(y))
        });
    let scale = (extent.1 - extent.0).abs().max(1.0) * DUPLICATE_EPS;

    let key = |p: (f64, f64)| (p.0.to_bits(), p.1.to_bits());
    let mut seen = HashSet::with_capacity(points.len());
    let mut out = Vec::with_capacity(points.len());
    let mut moved = 0;
    for (i, &p) in points.iter().enumerate() {
        let mut q = p;
        let mut step = 1.0;
        while !seen.insert(key(q)) {
            let offset = scale * (i + 1) as f64 * step;
            q = (p.0 + offset, p.1 + 0.5 * offset);
            step += 1.0;
        }
        if q != p {
            moved += 1;
        }
        out.push(q);
    }
    (out, moved)
}

fn in_conflict(pts: &[(f64, f64)], tri: &[usize; 3], p: usize) -> bool {
    let [a, b, c] = *tri;
    if c != GHOST {
        return in_circle_perturbed(pts, a, b, c, p);
    }
    // Ghost triangle over the hull edge a -> b; the outside lies to the left.
    let o = orient(pts, a, b, p);
    if o != 0.0 {
        return o > 0.0;
    }
    let (pa, pb, pp) = (pts[a], pts[b], pts[p]);
    let dot = (pp.0 - pa.0) * (pb.0 - pa.0) + (pp.1 - pa.1) * (pb.1 - pa.1);
    let len2 = (pb.0 - pa.0).powi(2) + (pb.1 - pa.1).powi(2);
    dot > 0.0 && dot < len2
}

fn collinear_chain(pts: &[(f64, f64)]) -> EdgeSet {
    let (a, b) = (pts[0], pts[1]);
    let dir = (b.0 - a.0, b.1 - a.1);
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&i, &j| {
        let ti = (pts[i].0 - a.0) * dir.0 + (pts[i].1 - a.1) * dir.1;
        let tj = (pts[j].0 - a.0) * dir.0 + (pts[j].1 - a.1) * dir.1;
        ti.total_cmp(&tj).then(i.cmp(&j))
    });
    order.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Triangulates `points` (indices follow input order).
pub fn triangulate(points: &[(f64, f64)]) -> Triangulation {
    let (pts, perturbed_duplicates) = separate_duplicates(points);
    let n = pts.len();
    let mut result = Triangulation {
        perturbed_duplicates,
        ..Triangulation::default()
    };
    if n < 2 {
        return result;
    }
    if n == 2 {
        result.edges.insert(0, 1);
        return result;
    }

    let Some(c0) = (2..n).find(|&k| orient(&pts, 0, 1, k) != 0.0) else {
        result.edges = collinear_chain(&pts);
        return result;
    };
    let (a0, mut b0, mut c0) = (0, 1, c0);
    if orient(&pts, a0, b0, c0) < 0.0 {
        std::mem::swap(&mut b0, &mut c0);
    }
    let mut tris: Vec<[usize; 3]> = vec![
        [a0, b0, c0],
        [b0, a0, GHOST],
        [c0, b0, GHOST],
        [a0, c0, GHOST],
    ];

    for p in (1..n).filter(|&k| k != b0 && k != c0) {
        let (conflict, keep): (Vec<[usize; 3]>, Vec<[usize; 3]>) =
            tris.into_iter().partition(|t| in_conflict(&pts, t, p));
        debug_assert!(!conflict.is_empty(), "point {p} has an empty cavity");

        let directed: HashSet<(usize, usize)> = conflict
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
            .collect();
        tris = keep;
        for t in &conflict {
            for (u, v) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                if directed.contains(&(v, u)) {
                    continue;
                }
                tris.push(if u == GHOST {
                    [v, p, GHOST]
                } else if v == GHOST {
                    [p, u, GHOST]
                } else {
                    [u, v, p]
                });
            }
        }
    }

    tris.retain(|t| t[2] != GHOST);
    tris.sort_unstable();
    for t in &tris {
        result.edges.insert(t[0], t[1]);
        result.edges.insert(t[1], t[2]);
        result.edges.insert(t[2], t[0]);
    }
    result.triangles = tris;
    result
}

/// Delaunay edge set of `points`. Coincident points are nudged apart and a
/// warning is logged.
pub fn delaunay_edges(points: &[(f64, f64)]) -> EdgeSet {
    let tri = triangulate(points);
    if tri.perturbed_duplicates > 0 {
        log::warn!(
            "delaunay: {} duplicate point(s) perturbed before triangulating",
            tri.perturbed_duplicates
        );
    }
    tri.edges
}
