//! Embedding geometry: cosine similarity against geodesic distance.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const BUCKET_EDGES_KM: [f64; 6] = [0.0, 1.0, 5.0, 10.0, 20.0, 35.0];

/// Pairwise cosine similarity of the rows of `e`.
pub fn cosine_matrix(e: &Tensor) -> Result<Tensor> {
    let n = e.rows();
    let norms: Vec<f64> = (0..n).map(|i| math::sqrt(e.row(i).iter().map(|x| x * x).sum())).collect();
    if let Some(sensor) = norms.iter().position(|x| *x == 0.0 || !x.is_finite()) {
        return Err(Error::DegenerateEmbedding { sensor });
    }
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        out.data_mut()[i * n + i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = e.row(i).iter().zip(e.row(j)).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out.data_mut()[i * n + j] = c;
            out.data_mut()[j * n + i] = c;
        }
    }
    Ok(out)
}

/// Haversine distance in km between `(latitude, longitude)` degrees.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let rad = core::f64::consts::PI / 180.0;
    let (p1, p2) = (a.0 * rad, b.0 * rad);
    let dp = p2 - p1;
    let dl = (b.1 - a.1) * rad;
    let s1 = math::sin(dp / 2.0);
    let s2 = math::sin(dl / 2.0);
    let h = s1 * s1 + math::cos(p1) * math::cos(p2) * s2 * s2;
    2.0 * EARTH_RADIUS_KM * math::asin(math::sqrt(h.min(1.0)))
}

/// Pairwise geodesic distances, symmetric with a zero diagonal.
pub fn geodesic_km(coords: &[(f64, f64)]) -> Result<Tensor> {
    for (i, (lat, lon)) in coords.iter().enumerate() {
        if !(lat.abs() <= 90.0) || !(lon.abs() <= 180.0) {
            return Err(Error::Ingestion(alloc::format!(
                "sensor {i}: coordinates ({lat}, {lon}) out of range"
            )));
        }
    }
    let n = coords.len();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            let d = haversine_km(coords[i], coords[j]);
            out.data_mut()[i * n + j] = d;
            out.data_mut()[j * n + i] = d;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bucket {
    pub lo_km: f64,
    /// `f64::INFINITY` for the overflow bucket.
    pub hi_km: f64,
    pub count: usize,
    /// `None` when the bucket is empty.
    pub mean_cos: Option<f64>,
}

/// Mean similarity over ordered pairs `(i, j)`, self pairs included, whose
/// distance falls in `[lo, hi)`. A final overflow bucket holds the rest.
pub fn bucket_similarity(cos: &Tensor, dist: &Tensor, edges: &[f64]) -> Result<Vec<Bucket>> {
    let n = cos.rows();
    if cos.shape() != [n, n] || dist.shape() != [n, n] {
        return Err(Error::shape("bucket_similarity", cos.shape(), dist.shape()));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("bucket edges must be ascending".into()));
    }
    let nb = edges.len();
    let mut sums = vec![0.0; nb];
    let mut counts = vec![0usize; nb];
    for (c, d) in cos.data().iter().zip(dist.data()) {
        let slot = if *d < edges[0] {
            continue;
        } else {
            edges.windows(2).position(|w| *d >= w[0] && *d < w[1]).unwrap_or(nb - 1)
        };
        sums[slot] += c;
        counts[slot] += 1;
    }
    Ok((0..nb)
        .map(|b| Bucket {
            lo_km: edges[b],
            hi_km: edges.get(b + 1).copied().unwrap_or(f64::INFINITY),
            count: counts[b],
            mean_cos: (counts[b] > 0).then(|| sums[b] / counts[b] as f64),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similar {
    pub sensor: usize,
    pub cos: f64,
    pub km: f64,
}

/// The `n` sensors most similar to `anchor`, most similar first, ties by id.
pub fn top_similar(cos: &Tensor, dist: &Tensor, anchor: usize, n: usize) -> Result<Vec<Similar>> {
    let v = cos.rows();
    if anchor >= v {
        return Err(Error::Index {
            what: "anchor",
            index: anchor,
            len: v,
        });
    }
    if n >= v {
        return Err(Error::Config(alloc::format!("asked for {n} neighbors among {v} sensors")));
    }
    let mut all: Vec<Similar> = (0..v)
        .filter(|&j| j != anchor)
        .map(|j| Similar {
            sensor: j,
            cos: cos.at(anchor, j),
            km: dist.at(anchor, j),
        })
        .collect();
    all.sort_by(|a, b| b.cos.total_cmp(&a.cos).then(a.sensor.cmp(&b.sensor)));
    all.truncate(n);
    Ok(all)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityStudy {
    pub cosine: Tensor,
    pub distance: Tensor,
    pub buckets: Vec<Bucket>,
}

impl SimilarityStudy {
    pub fn new(embedding: &Tensor, coords: &[(f64, f64)]) -> Result<Self> {
        if embedding.rows() != coords.len() {
            return Err(Error::shape("SimilarityStudy", embedding.shape(), &[coords.len(), 2]));
        }
        let cosine = cosine_matrix(embedding)?;
        let distance = geodesic_km(coords)?;
        let buckets = bucket_similarity(&cosine, &distance, &BUCKET_EDGES_KM)?;
        Ok(SimilarityStudy {
            cosine,
            distance,
            buckets,
        })
    }

    pub fn top_similar(&self, anchor: usize, n: usize) -> Result<Vec<Similar>> {
        top_similar(&self.cosine, &self.distance, anchor, n)
    }
}

fn upper_pairs(m: &Tensor, order: &[usize]) -> Vec<f64> {
    let n = order.len();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(m.at(order[i], order[j]));
        }
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / math::sqrt(sxx * syy)
    }
}

/// Mantel test of a negative association between two symmetric matrices.
///
/// Correlates the strict upper triangles, then relabels the sensors of `b`
/// at random `permutations` times. Returns `(r, p)` with the add-one
/// estimate `p = (1 + #{r_perm <= r}) / (1 + permutations)`.
pub fn mantel_test(a: &Tensor, b: &Tensor, permutations: usize, seed: u64) -> Result<(f64, f64)> {
    let n = a.rows();
    if a.shape() != [n, n] || b.shape() != [n, n] {
        return Err(Error::shape("mantel_test", a.shape(), b.shape()));
    }
    if n < 3 {
        return Err(Error::Empty("sensor pairs"));
    }
    let identity: Vec<usize> = (0..n).collect();
    let xa = upper_pairs(a, &identity);
    let observed = pearson(&xa, &upper_pairs(b, &identity));
    let mut rng = stream(seed, Stream::Probe);
    let mut order = identity;
    let mut hits = 0usize;
    for _ in 0..permutations {
        order.shuffle(&mut rng);
        if pearson(&xa, &upper_pairs(b, &order)) <= observed {
            hits += 1;
        }
    }
    Ok((observed, (1 + hits) as f64 / (1 + permutations) as f64))
}

/// Outcome of the distance-decay check.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayCheck {
    /// Mean similarity of the first three buckets.
    pub means: [f64; 3],
    pub non_increasing: bool,
    /// Correlation of similarity with distance over distinct pairs.
    pub mantel_r: f64,
    pub p_value: f64,
    pub passed: bool,
}

/// Bucket means must not increase over the first three buckets, and
/// similarity must fall with distance at significance `alpha`.
pub fn distance_decay_check(study: &SimilarityStudy, alpha: f64, permutations: usize, seed: u64) -> Result<DecayCheck> {
    let mut means = [0.0; 3];
    for (m, b) in means.iter_mut().zip(&study.buckets) {
        *m = b.mean_cos.ok_or(Error::Empty("distance bucket"))?;
    }
    let (mantel_r, p_value) = mantel_test(&study.cosine, &study.distance, permutations, seed)?;
    let non_increasing = means[0] >= means[1] && means[1] >= means[2];
    Ok(DecayCheck {
        means,
        non_increasing,
        mantel_r,
        p_value,
        passed: non_increasing && mantel_r < 0.0 && p_value < alpha,
    })
}
