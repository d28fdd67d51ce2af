//! Sensor graph construction and ego-graph feature assembly.
//!
//! Edge weights come from a thresholded Gaussian kernel over road distances,
//! `exp(-dist^2 / s^2)` with `s` the standard deviation of the provided
//! distances; weights below the threshold `r` are dropped. Neighbors are
//! ranked on the self-loop-augmented, symmetrically normalized adjacency.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// One row of the distance file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceEdge {
    pub from: usize,
    pub to: usize,
    pub dist: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub node: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorGraph {
    pub num_nodes: usize,
    /// Weighted adjacency `A`, zero diagonal.
    pub adjacency: Tensor,
    /// `D^-1/2 (A + I) D^-1/2`.
    pub normalized: Tensor,
    /// The same normalization applied to `A^T`.
    pub normalized_reverse: Tensor,
    pub dist_std: f64,
    pub threshold: f64,
    /// All one-hop neighbors from `normalized`, weight-descending, ties by id.
    pub fwd_neighbors: Vec<Vec<Neighbor>>,
    /// All one-hop neighbors from `normalized_reverse`, same order.
    pub bwd_neighbors: Vec<Vec<Neighbor>>,
}

/// Thresholded Gaussian-kernel adjacency from road distances.
pub fn build_adjacency(edges: &[DistanceEdge], num_nodes: usize, threshold: f64) -> Result<SensorGraph> {
    if num_nodes == 0 {
        return Err(Error::Ingestion("graph needs at least one node".into()));
    }
    for (i, e) in edges.iter().enumerate() {
        for id in [e.from, e.to] {
            if id >= num_nodes {
                return Err(Error::Ingestion(alloc::format!(
                    "distance row {i}: node {id} out of range for {num_nodes} sensors"
                )));
            }
        }
        if e.dist < 0.0 || e.dist.is_nan() {
            return Err(Error::Ingestion(alloc::format!(
                "distance row {i}: invalid distance {}",
                e.dist
            )));
        }
    }
    let finite: Vec<f64> = edges.iter().map(|e| e.dist).filter(|d| d.is_finite()).collect();
    let s = population_std(&finite);
    if finite.is_empty() || s == 0.0 || !s.is_finite() {
        return Err(Error::DegenerateKernel);
    }
    let mut a = Tensor::zeros(&[num_nodes, num_nodes]);
    for e in edges {
        if e.from == e.to || !e.dist.is_finite() {
            continue;
        }
        let w = math::exp(-(e.dist * e.dist) / (s * s));
        a.data_mut()[e.from * num_nodes + e.to] = if w < threshold { 0.0 } else { w };
    }
    let mut g = SensorGraph::from_adjacency(a)?;
    g.dist_std = s;
    g.threshold = threshold;
    Ok(g)
}

fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    math::sqrt(xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

impl SensorGraph {
    /// Graph over an explicit weighted adjacency (diagonal is ignored).
    pub fn from_adjacency(mut adjacency: Tensor) -> Result<Self> {
        let n = adjacency.rows();
        if adjacency.shape() != [n, n] {
            return Err(Error::shape("SensorGraph", adjacency.shape(), &[n, n]));
        }
        if adjacency.data().iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Ingestion("adjacency must be finite and non-negative".into()));
        }
        for i in 0..n {
            adjacency.data_mut()[i * n + i] = 0.0;
        }
        let normalized = normalize_adjacency(&adjacency)?;
        let normalized_reverse = normalize_adjacency(&adjacency.transpose())?;
        let fwd_neighbors = ranked_neighbors(&normalized);
        let bwd_neighbors = ranked_neighbors(&normalized_reverse);
        Ok(SensorGraph {
            num_nodes: n,
            adjacency,
            normalized,
            normalized_reverse,
            dist_std: 0.0,
            threshold: 0.0,
            fwd_neighbors,
            bwd_neighbors,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.data().iter().filter(|v| **v > 0.0).count()
    }

    pub fn average_degree(&self) -> f64 {
        self.num_edges() as f64 / self.num_nodes as f64
    }
}

/// `D^-1/2 (A + I) D^-1/2` with `D` the row-degree matrix of `A + I`.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.shape() != [n, n] {
        return Err(Error::shape("normalize_adjacency", a.shape(), &[n, n]));
    }
    let aug = |i: usize, j: usize| a.at(i, j) + if i == j { 1.0 } else { 0.0 };
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| 1.0 / math::sqrt((0..n).map(|j| aug(i, j)).sum::<f64>()))
        .collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.data_mut()[i * n + j] = inv_sqrt_deg[i] * aug(i, j) * inv_sqrt_deg[j];
        }
    }
    Ok(out)
}

fn ranked_neighbors(norm: &Tensor) -> Vec<Vec<Neighbor>> {
    let n = norm.rows();
    (0..n)
        .map(|i| {
            let mut row: Vec<Neighbor> = (0..n)
                .filter(|&j| j != i && norm.at(i, j) > 0.0)
                .map(|j| Neighbor {
                    node: j,
                    weight: norm.at(i, j),
                })
                .collect();
            row.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.node.cmp(&b.node)));
            row
        })
        .collect()
}

/// Exactly `k` slots per node and direction; `None` marks zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub k: usize,
    pub fwd: Vec<Vec<Option<Neighbor>>>,
    pub bwd: Vec<Vec<Option<Neighbor>>>,
}

pub fn select_topk_neighbors(graph: &SensorGraph, k: usize) -> TopK {
    let pick = |lists: &[Vec<Neighbor>]| -> Vec<Vec<Option<Neighbor>>> {
        lists
            .iter()
            .map(|l| (0..k).map(|i| l.get(i).copied()).collect())
            .collect()
    };
    TopK {
        k,
        fwd: pick(&graph.fwd_neighbors),
        bwd: pick(&graph.bwd_neighbors),
    }
}

/// Width of the ego feature matrix for `k` neighbors per direction.
pub const fn ego_width(k: usize) -> usize {
    2 * k + 3
}

/// Ego-graph features of node `v` over every step of `histories`.
///
/// `histories` is `[num_nodes, steps]`. The result is `[steps, 2k+3]` with
/// columns: self, `k` forward neighbors, `k` backward neighbors, mean over
/// all forward one-hop neighbors, mean over all backward one-hop neighbors.
/// Padded slots and means over empty neighbor sets are zero.
pub fn build_ego_features(histories: &Tensor, graph: &SensorGraph, topk: &TopK, v: usize) -> Result<Tensor> {
    let n = graph.num_nodes;
    if v >= n {
        return Err(Error::Index {
            what: "node",
            index: v,
            len: n,
        });
    }
    if histories.rows() != n || histories.shape().len() != 2 {
        return Err(Error::shape("build_ego_features", histories.shape(), &[n]));
    }
    let steps = histories.cols();
    let width = ego_width(topk.k);
    let mut out = vec![0.0; steps * width];
    let mut write_col = |col: usize, src: &dyn Fn(usize) -> f64| {
        for t in 0..steps {
            out[t * width + col] = src(t);
        }
    };
    write_col(0, &|t| histories.at(v, t));
    for (i, slot) in topk.fwd[v].iter().enumerate() {
        if let Some(nb) = slot {
            write_col(1 + i, &|t| histories.at(nb.node, t));
        }
    }
    for (i, slot) in topk.bwd[v].iter().enumerate() {
        if let Some(nb) = slot {
            write_col(1 + topk.k + i, &|t| histories.at(nb.node, t));
        }
    }
    for (col, list) in [
        (2 * topk.k + 1, &graph.fwd_neighbors[v]),
        (2 * topk.k + 2, &graph.bwd_neighbors[v]),
    ] {
        if !list.is_empty() {
            let inv = 1.0 / list.len() as f64;
            write_col(col, &|t| list.iter().map(|nb| histories.at(nb.node, t)).sum::<f64>() * inv);
        }
    }
    Tensor::new(vec![steps, width], out)
}
