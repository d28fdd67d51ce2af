//! Comparators: the historical average predictor and reference graph
//! convolutions over predefined, sparse and adaptive adjacency.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::dataset::SECONDS_PER_DAY;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{stream, Stream};
use crate::tape::softmax_rows_into;
use crate::tensor::Tensor;
use crate::graph::SensorGraph;

const SECONDS_PER_WEEK: i64 = 7 * SECONDS_PER_DAY;

/// Mean training reading per sensor and time-of-day slot (or time-of-week
/// slot when `weekly`).
#[derive(Debug, Clone, PartialEq)]
pub struct HistoricalAverage {
    pub weekly: bool,
    pub step: i64,
    pub slots: usize,
    /// `[num_nodes, slots]`; `None` for slots never seen in training.
    table: Vec<Option<f64>>,
    node_mean: Vec<f64>,
}

impl HistoricalAverage {
    /// Fits on `[num_nodes, steps]` readings taken at `timestamps`.
    pub fn fit(readings: &Tensor, timestamps: &[i64], weekly: bool) -> Result<Self> {
        let (n, steps) = (readings.rows(), readings.cols());
        if n == 0 || steps == 0 || timestamps.is_empty() {
            return Err(Error::Empty("historical-average training range"));
        }
        if timestamps.len() != steps {
            return Err(Error::shape("historical_average", readings.shape(), &[timestamps.len()]));
        }
        let step = if steps > 1 { timestamps[1] - timestamps[0] } else { 300 };
        if step <= 0 {
            return Err(Error::Ingestion("timestamps must increase".into()));
        }
        let period = if weekly { SECONDS_PER_WEEK } else { SECONDS_PER_DAY };
        if weekly && timestamps[steps - 1] - timestamps[0] + step < SECONDS_PER_WEEK {
            return Err(Error::InsufficientData {
                split: "train",
                len: steps,
                needed: (SECONDS_PER_WEEK / step) as usize,
            });
        }
        let slots = (period / step).max(1) as usize;
        let mut sums = vec![0.0; n * slots];
        let mut counts = vec![0usize; n * slots];
        let mut node_mean = vec![0.0; n];
        for (s, &ts) in timestamps.iter().enumerate() {
            let slot = slot_of(ts, period, step, slots);
            for v in 0..n {
                sums[v * slots + slot] += readings.at(v, s);
                counts[v * slots + slot] += 1;
            }
        }
        for (v, m) in node_mean.iter_mut().enumerate() {
            *m = readings.row(v).iter().sum::<f64>() / steps as f64;
        }
        let table = sums
            .iter()
            .zip(&counts)
            .map(|(s, c)| (*c > 0).then(|| s / *c as f64))
            .collect();
        Ok(HistoricalAverage {
            weekly,
            step,
            slots,
            table,
            node_mean,
        })
    }

    pub fn predict(&self, node: usize, ts: i64) -> f64 {
        let period = if self.weekly { SECONDS_PER_WEEK } else { SECONDS_PER_DAY };
        let slot = slot_of(ts, period, self.step, self.slots);
        self.table[node * self.slots + slot].unwrap_or(self.node_mean[node])
    }
}

fn slot_of(ts: i64, period: i64, step: i64, slots: usize) -> usize {
    // weeks start on Monday; the epoch fell on a Thursday
    let shifted = if period == SECONDS_PER_WEEK { ts + 3 * SECONDS_PER_DAY } else { ts };
    ((shifted.rem_euclid(period) / step) as usize).min(slots - 1)
}

/// `relu(a_hat * h * w)`.
pub fn gcn_layer(h: &Tensor, a_hat: &Tensor, w: &Tensor) -> Result<Tensor> {
    let n = h.rows();
    if a_hat.shape() != [n, n] {
        return Err(Error::shape("gcn_layer", a_hat.shape(), h.shape()));
    }
    let mut out = a_hat.matmul(&h.matmul(w)?)?;
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(out)
}

/// Row softmax of `relu(e1 * e2^T)`.
pub fn adaptive_adjacency(e1: &Tensor, e2: &Tensor) -> Result<Tensor> {
    if e1.cols() != e2.cols() || e1.rows() != e2.rows() {
        return Err(Error::shape("adaptive_adjacency", e1.shape(), e2.shape()));
    }
    let mut logits = e1.matmul(&e2.transpose())?;
    logits.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let mut out = Tensor::zeros(logits.shape());
    softmax_rows_into(logits.data(), logits.cols(), None, out.data_mut())?;
    Ok(out)
}

/// Compressed sparse rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_dense(a: &Tensor) -> Self {
        let n = a.rows();
        let mut row_ptr = vec![0];
        let (mut cols, mut vals) = (Vec::new(), Vec::new());
        for i in 0..n {
            for (j, v) in a.row(i).iter().enumerate() {
                if *v != 0.0 {
                    cols.push(j);
                    vals.push(*v);
                }
            }
            row_ptr.push(cols.len());
        }
        CsrMatrix { n, row_ptr, cols, vals }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `self * h` for dense `h` with `n` rows.
    pub fn matmul(&self, h: &Tensor) -> Result<Tensor> {
        if h.rows() != self.n {
            return Err(Error::shape("csr matmul", &[self.n, self.n], h.shape()));
        }
        let d = h.cols();
        let mut out = Tensor::zeros(&[self.n, d]);
        for i in 0..self.n {
            let dst = &mut out.data_mut()[i * d..(i + 1) * d];
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                let (j, a) = (self.cols[e], self.vals[e]);
                for (o, x) in dst.iter_mut().zip(h.row(j)) {
                    *o += a * x;
                }
            }
        }
        Ok(out)
    }
}

/// `relu(a_hat * h * w)` with a sparse `a_hat`.
pub fn sparse_gcn_layer(h: &Tensor, a_hat: &CsrMatrix, w: &Tensor) -> Result<Tensor> {
    let mut out = a_hat.matmul(&h.matmul(w)?)?;
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(out)
}

/// Which propagation matrix a [`GcnBaseline`] uses.
#[derive(Debug, Clone, PartialEq)]
pub enum Propagation {
    /// Dense matrix rebuilt from two embedding tables on every forward.
    Adaptive { e1: Tensor, e2: Tensor },
    Sparse(CsrMatrix),
}

/// Input projection, stacked graph convolutions and an output projection
/// over one whole-graph snapshot `[num_nodes, t_h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnBaseline {
    pub propagation: Propagation,
    pub w_in: Tensor,
    pub layers: Vec<Tensor>,
    pub w_out: Tensor,
}

impl GcnBaseline {
    pub fn new(propagation: Propagation, t_h: usize, d: usize, t_f: usize, layers: usize, seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Init);
        let mut weight = |r: usize, c: usize| {
            let bound = 1.0 / math::sqrt(r as f64);
            let data = (0..r * c).map(|_| rng.gen_range(-bound..=bound)).collect();
            Tensor::new(vec![r, c], data).expect("sized")
        };
        GcnBaseline {
            w_in: weight(t_h, d),
            layers: (0..layers).map(|_| weight(d, d)).collect(),
            w_out: weight(d, t_f),
            propagation,
        }
    }

    pub fn adaptive(num_nodes: usize, embed_dim: usize, t_h: usize, d: usize, t_f: usize, seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Init);
        let mut table = || {
            let data = (0..num_nodes * embed_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            Tensor::new(vec![num_nodes, embed_dim], data).expect("sized")
        };
        let (e1, e2) = (table(), table());
        GcnBaseline::new(Propagation::Adaptive { e1, e2 }, t_h, d, t_f, 2, seed)
    }

    pub fn sparse(graph: &SensorGraph, t_h: usize, d: usize, t_f: usize, seed: u64) -> Self {
        let csr = CsrMatrix::from_dense(&graph.normalized);
        GcnBaseline::new(Propagation::Sparse(csr), t_h, d, t_f, 2, seed)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.matmul(&self.w_in)?;
        match &self.propagation {
            Propagation::Adaptive { e1, e2 } => {
                let a = adaptive_adjacency(e1, e2)?;
                for w in &self.layers {
                    h = gcn_layer(&h, &a, w)?;
                }
            }
            Propagation::Sparse(a) => {
                for w in &self.layers {
                    h = sparse_gcn_layer(&h, a, w)?;
                }
            }
        }
        h.matmul(&self.w_out)
    }
}

/// Points uniform in the unit square, each linked to its `degree` nearest
/// others with unit weight.
pub fn knn_geometric_graph(num_nodes: usize, degree: usize, seed: u64) -> Result<SensorGraph> {
    let mut rng = stream(seed, Stream::Synth);
    let pts: Vec<(f64, f64)> = (0..num_nodes).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
    let mut a = Tensor::zeros(&[num_nodes, num_nodes]);
    for i in 0..num_nodes {
        let mut others: Vec<(f64, usize)> = (0..num_nodes)
            .filter(|&j| j != i)
            .map(|j| {
                let (dx, dy) = (pts[i].0 - pts[j].0, pts[i].1 - pts[j].1);
                (dx * dx + dy * dy, j)
            })
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(degree) {
            a.data_mut()[i * num_nodes + j] = 1.0;
        }
    }
    SensorGraph::from_adjacency(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series_is_predicted_exactly() {
        let ts: Vec<i64> = (0..600).map(|t| t * 300).collect();
        let r = Tensor::full(&[2, 600], 7.5);
        let ha = HistoricalAverage::fit(&r, &ts, false).unwrap();
        assert_eq!(ha.slots, 288);
        for t in [0, 1000 * 300, 123_456] {
            assert_eq!(ha.predict(1, t), 7.5);
        }
    }

    #[test]
    fn two_day_profile_is_recovered() {
        // day 1 holds 2*slot, day 2 holds 2*slot + 2; means are 2*slot + 1
        let ts: Vec<i64> = (0..576).map(|t| t * 300).collect();
        let vals: Vec<f64> = (0..576).map(|t| 2.0 * (t % 288) as f64 + if t >= 288 { 2.0 } else { 0.0 }).collect();
        let r = Tensor::new(vec![1, 576], vals).unwrap();
        let ha = HistoricalAverage::fit(&r, &ts, false).unwrap();
        for slot in [0, 5, 287] {
            assert_eq!(ha.predict(0, slot * 300 + 10 * SECONDS_PER_DAY), 2.0 * slot as f64 + 1.0);
        }
        assert!(matches!(HistoricalAverage::fit(&r, &ts, true), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn gcn_identity() {
        let h = Tensor::from_rows(&[[1.0, -2.0], [-3.0, 4.0]]).unwrap();
        let out = gcn_layer(&h, &Tensor::identity(2), &Tensor::identity(2)).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn adaptive_rows_sum_to_one() {
        let z = Tensor::zeros(&[4, 3]);
        let a = adaptive_adjacency(&z, &z).unwrap();
        assert!(a.data().iter().all(|v| *v == 0.25));
        let e1 = Tensor::from_rows(&[[0.3, -1.0], [2.0, 0.5], [-0.7, 0.1]]).unwrap();
        let a = adaptive_adjacency(&e1, &e1.transpose().transpose()).unwrap();
        for i in 0..3 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(a.data().iter().filter(|v| **v != 0.0).count(), 9);
    }

    #[test]
    fn sparse_matches_dense() {
        let g = knn_geometric_graph(30, 4, 3).unwrap();
        let h = Tensor::new(vec![30, 5], (0..150).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let w = Tensor::new(vec![5, 2], (0..10).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let dense = gcn_layer(&h, &g.normalized, &w).unwrap();
        let sparse = sparse_gcn_layer(&h, &CsrMatrix::from_dense(&g.normalized), &w).unwrap();
        for (a, b) in dense.data().iter().zip(sparse.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(g.fwd_neighbors.iter().all(|l| l.len() >= 4));
    }
}
