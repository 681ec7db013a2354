//! Context-dependent kernel between two graph features.
//!
//! Both graphs are stacked into one union of `m + n` nodes. `D` holds the
//! pairwise descriptor distances over the union and `T` the 0/1 adjacency
//! (block diagonal: the two graphs are never connected to each other). The
//! kernel starts from `exp(-D/β)` and is repeatedly replaced by
//! `exp(-D/β + (α/β)·T·K·T)`, each time rescaled so that its entries sum to 1.
//! The dissimilarity is `ρ = s(A,A) + s(B,B) - 2·s(A,B)`, where `s(X,Y)` sums
//! the kernel block between the nodes of `X` and those of `Y`.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphFeature;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceFlavor {
    /// Sum of squared component differences.
    #[default]
    SquaredL2,
    /// Euclidean norm of the difference.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdkParams {
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    #[serde(default)]
    pub distance_flavor: DistanceFlavor,
}

impl Default for CdkParams {
    fn default() -> Self {
        CdkParams {
            alpha: 1e-4,
            beta: 0.1,
            iterations: 2,
            distance_flavor: DistanceFlavor::SquaredL2,
        }
    }
}

impl CdkParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Argument(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Argument(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Descriptor distance under `flavor`.
pub fn point_dissimilarity(a: &[f64], b: &[f64], flavor: DistanceFlavor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "descriptor dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(descriptor_distance(a, b, flavor))
}

fn descriptor_distance(a: &[f64], b: &[f64], flavor: DistanceFlavor) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    match flavor {
        DistanceFlavor::SquaredL2 => sq,
        DistanceFlavor::L2 => sq.sqrt(),
    }
}

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    size: usize,
    values: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(size: usize) -> Self {
        SquareMatrix {
            size,
            values: vec![0.0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.size + j] = v;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Sum of entries with row in `rows` and column in `cols`.
    pub fn block_sum(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
        rows.map(|i| self.values[i * self.size + cols.start..i * self.size + cols.end].iter().sum::<f64>())
            .sum()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `D` and `T` over the union of two graphs; graph A occupies `0..m`, graph B `m..m+n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMatrices {
    pub d_matrix: SquareMatrix,
    pub t_matrix: SquareMatrix,
    pub m: usize,
    pub n: usize,
    adjacency: Vec<Vec<usize>>,
}

impl PairMatrices {
    pub fn size(&self) -> usize {
        self.m + self.n
    }
}

pub fn assemble_pair_matrices(a: &GraphFeature, b: &GraphFeature, flavor: DistanceFlavor) -> Result<PairMatrices> {
    let (m, n) = (a.node_count(), b.node_count());
    let dim = a.descriptor_dim();
    if a.node_descriptors.iter().chain(&b.node_descriptors).any(|d| d.len() != dim) {
        return Err(Error::Argument(format!(
            "descriptor dimension mismatch between graphs from {} and {}",
            a.image_id, b.image_id
        )));
    }
    let nodes: Vec<&[f64]> = a
        .node_descriptors
        .iter()
        .chain(&b.node_descriptors)
        .map(Vec::as_slice)
        .collect();
    let size = m + n;
    let mut d_matrix = SquareMatrix::zeros(size);
    for i in 0..size {
        for j in i + 1..size {
            let v = descriptor_distance(nodes[i], nodes[j], flavor);
            d_matrix.set(i, j, v);
            d_matrix.set(j, i, v);
        }
    }

    let mut t_matrix = SquareMatrix::zeros(size);
    let mut adjacency = vec![Vec::new(); size];
    let edges = a.edges.iter().chain(b.edges.iter().map(|(u, v)| (u + m, v + m)));
    for (u, v) in edges {
        if u >= size || v >= size {
            return Err(Error::Argument(format!("edge ({u}, {v}) outside the union of {size} nodes")));
        }
        t_matrix.set(u, v, 1.0);
        t_matrix.set(v, u, 1.0);
        adjacency[u].push(v);
        adjacency[v].push(u);
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }
    Ok(PairMatrices {
        d_matrix,
        t_matrix,
        m,
        n,
        adjacency,
    })
}

/// `T·K·T` using the adjacency lists of `T`.
fn sandwich(adjacency: &[Vec<usize>], k: &SquareMatrix) -> SquareMatrix {
    let size = k.size();
    let mut kt = SquareMatrix::zeros(size);
    for i in 0..size {
        for j in 0..size {
            let v: f64 = adjacency[j].iter().map(|&l| k.get(i, l)).sum();
            kt.set(i, j, v);
        }
    }
    let mut out = SquareMatrix::zeros(size);
    for i in 0..size {
        for j in 0..size {
            let v: f64 = adjacency[i].iter().map(|&l| kt.get(l, j)).sum();
            out.set(i, j, v);
        }
    }
    out
}

/// Exponentiates `exponent` entrywise and rescales to unit L1 norm. The
/// maximum is subtracted first; the rescaling cancels the shift.
fn normalized_exp(mut exponent: SquareMatrix) -> SquareMatrix {
    let max = exponent.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in &mut exponent.values {
        *v = (*v - max).exp();
    }
    let total: f64 = exponent.values.iter().sum();
    for v in &mut exponent.values {
        *v /= total;
    }
    exponent
}

/// All kernels `K^(0) ..= K^(iterations)`.
pub fn cdk_trajectory(pm: &PairMatrices, params: &CdkParams) -> Result<Vec<SquareMatrix>> {
    params.validate()?;
    let size = pm.size();
    let mut base = SquareMatrix::zeros(size);
    for (dst, &d) in base.values.iter_mut().zip(&pm.d_matrix.values) {
        *dst = -d / params.beta;
    }

    let mut out = Vec::with_capacity(params.iterations + 1);
    out.push(normalized_exp(base.clone()));
    let context_weight = params.alpha / params.beta;
    for _ in 0..params.iterations {
        let prev = out.last().expect("at least K^(0)");
        let tkt = sandwich(&pm.adjacency, prev);
        let mut exponent = base.clone();
        for (e, c) in exponent.values.iter_mut().zip(&tkt.values) {
            *e += context_weight * c;
        }
        out.push(normalized_exp(exponent));
    }
    Ok(out)
}

/// The kernel after `params.iterations` steps.
pub fn cdk_iterate(pm: &PairMatrices, params: &CdkParams) -> Result<SquareMatrix> {
    Ok(cdk_trajectory(pm, params)?.pop().expect("nonempty trajectory"))
}

/// Values below this are counted as genuine negative dissimilarities.
const NEGATIVE_TOLERANCE: f64 = 1e-12;

static NEGATIVE_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// How many times [`graph_dissimilarity`] clamped a clearly negative value to 0.
pub fn negative_clamp_count() -> u64 {
    NEGATIVE_CLAMPS.load(Ordering::Relaxed)
}

/// `ρ(A, B)` before clamping.
pub fn graph_dissimilarity_raw(a: &GraphFeature, b: &GraphFeature, params: &CdkParams) -> Result<f64> {
    if a.layer != b.layer {
        return Err(Error::Argument(format!(
            "cannot compare graphs from layers {} and {}",
            a.layer, b.layer
        )));
    }
    let pm = assemble_pair_matrices(a, b, params.distance_flavor)?;
    let k = cdk_iterate(&pm, params)?;
    let (ra, rb) = (0..pm.m, pm.m..pm.size());
    let s_aa = k.block_sum(ra.clone(), ra.clone());
    let s_bb = k.block_sum(rb.clone(), rb.clone());
    let s_ab = k.block_sum(ra, rb);
    Ok(s_aa + s_bb - 2.0 * s_ab)
}

/// `ρ(A, B)`, clamped at zero.
pub fn graph_dissimilarity(a: &GraphFeature, b: &GraphFeature, params: &CdkParams) -> Result<f64> {
    let rho = graph_dissimilarity_raw(a, b, params)?;
    if rho < 0.0 {
        if rho < -NEGATIVE_TOLERANCE {
            NEGATIVE_CLAMPS.fetch_add(1, Ordering::Relaxed);
            log::debug!("negative dissimilarity {rho} clamped to 0");
        }
        return Ok(0.0);
    }
    Ok(rho)
}

/// Dissimilarity used for clustering and word assignment: descriptor distance
/// of the seeds on layer 0, the kernel dissimilarity above it.
pub fn layer_dissimilarity(a: &GraphFeature, b: &GraphFeature, params: &CdkParams) -> Result<f64> {
    if a.layer != b.layer {
        return Err(Error::Argument(format!(
            "cannot compare graphs from layers {} and {}",
            a.layer, b.layer
        )));
    }
    if a.layer == 0 {
        let (da, db) = match (a.node_descriptors.first(), b.node_descriptors.first()) {
            (Some(da), Some(db)) => (da, db),
            _ => return Err(Error::Argument("layer-0 feature without a node".into())),
        };
        point_dissimilarity(da, db, params.distance_flavor)
    } else {
        graph_dissimilarity(a, b, params)
    }
}
