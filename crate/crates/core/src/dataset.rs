//! Raw series, chronological splits, normalization, windowing and
//! node-based batch sampling.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::{build_ego_features, ego_width, select_topk_neighbors, SensorGraph};
use crate::math;
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Readings of every sensor at equally spaced timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    /// `[num_nodes, steps]`.
    pub readings: Tensor,
    /// Epoch seconds, strictly increasing with a constant step.
    pub timestamps: Vec<i64>,
    /// Optional `(latitude, longitude)` per sensor in degrees.
    pub coords: Option<Vec<(f64, f64)>>,
}

impl RawSeries {
    pub fn new(readings: Tensor, timestamps: Vec<i64>, coords: Option<Vec<(f64, f64)>>) -> Result<Self> {
        if readings.shape().len() != 2 {
            return Err(Error::Ingestion(alloc::format!("readings must be 2-d, got {:?}", readings.shape())));
        }
        let (n, t) = (readings.rows(), readings.cols());
        if n == 0 || t == 0 {
            return Err(Error::Empty("readings"));
        }
        if timestamps.len() != t {
            return Err(Error::Ingestion(alloc::format!(
                "{} timestamps for {t} steps",
                timestamps.len()
            )));
        }
        if t >= 2 {
            let step = timestamps[1] - timestamps[0];
            for (i, w) in timestamps.windows(2).enumerate() {
                if w[1] - w[0] != step || step <= 0 {
                    return Err(Error::Ingestion(alloc::format!(
                        "timestamp at step {} breaks the constant positive spacing",
                        i + 1
                    )));
                }
            }
        }
        for v in 0..n {
            for (s, x) in readings.row(v).iter().enumerate() {
                if !x.is_finite() || *x < 0.0 {
                    return Err(Error::Ingestion(alloc::format!("sensor {v}, step {s}: invalid reading {x}")));
                }
            }
        }
        if let Some(c) = &coords {
            if c.len() != n {
                return Err(Error::Ingestion(alloc::format!("{} coordinates for {n} sensors", c.len())));
            }
        }
        Ok(RawSeries {
            readings,
            timestamps,
            coords,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.readings.rows()
    }

    pub fn num_steps(&self) -> usize {
        self.readings.cols()
    }
}

/// Splits `0..t` into contiguous train, validation and test ranges.
///
/// Boundaries are `round(t * r_train)` and `round(t * (r_train + r_val))`.
/// Every range must hold at least `min_len` steps.
pub fn chronological_split(t: usize, ratio: [f64; 3], min_len: usize) -> Result<[Range<usize>; 3]> {
    if ratio.iter().any(|r| !(*r > 0.0)) || (ratio.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(alloc::format!(
            "split ratios {ratio:?} must be positive and sum to 1"
        )));
    }
    let a = math::round(t as f64 * ratio[0]) as usize;
    let b = (math::round(t as f64 * (ratio[0] + ratio[1])) as usize).min(t);
    let ranges = [0..a, a..b, b..t];
    for (idx, name) in [(1, "validation"), (2, "test"), (0, "train")] {
        let len = ranges[idx].len();
        if len < min_len {
            return Err(Error::InsufficientData {
                split: name,
                len,
                needed: min_len,
            });
        }
    }
    Ok(ranges)
}

/// Z-score statistics of the target channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZScore {
    pub mean: f64,
    pub std: f64,
}

impl ZScore {
    /// Population mean and standard deviation of `values`.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("training target"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = math::sqrt(var);
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::DegenerateStd);
        }
        Ok(ZScore { mean, std })
    }

    pub fn identity() -> Self {
        ZScore { mean: 0.0, std: 1.0 }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Time of day in `[0, 1)`.
pub fn time_of_day(ts: i64) -> f64 {
    ts.rem_euclid(SECONDS_PER_DAY) as f64 / SECONDS_PER_DAY as f64
}

/// Day of week as `index / 7` with Monday at 0.
pub fn day_of_week(ts: i64) -> f64 {
    // 1970-01-01 was a Thursday
    (ts.div_euclid(SECONDS_PER_DAY) + 3).rem_euclid(7) as f64 / 7.0
}

/// `[steps, 1]` time of day, or `[steps, 2]` with day of week appended.
pub fn make_time_features(timestamps: &[i64], include_day_of_week: bool) -> Tensor {
    let width = 1 + include_day_of_week as usize;
    let mut data = Vec::with_capacity(timestamps.len() * width);
    for &ts in timestamps {
        data.push(time_of_day(ts));
        if include_day_of_week {
            data.push(day_of_week(ts));
        }
    }
    Tensor::new(vec![timestamps.len(), width], data).expect("width matches data")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub t_h: usize,
    pub t_f: usize,
    pub k: usize,
    pub split: [f64; 3],
    pub include_day_of_week: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            t_h: 12,
            t_f: 12,
            k: 3,
            split: [0.6, 0.2, 0.2],
            include_day_of_week: false,
        }
    }
}

impl DatasetConfig {
    pub fn aux_width(&self) -> usize {
        1 + self.include_day_of_week as usize
    }

    /// Per-step feature width: ego columns then auxiliary columns.
    pub fn feature_width(&self) -> usize {
        ego_width(self.k) + self.aux_width()
    }
}

/// Every `(node, start)` instance of one split with its features and targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitData {
    pub nodes: Vec<usize>,
    pub starts: Vec<usize>,
    /// Instance-major `[n, t_h, width]`, normalized target channel.
    pub features: Vec<f64>,
    /// Instance-major `[n, t_f]`, original scale.
    pub targets: Vec<f64>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub config: DatasetConfig,
    pub num_nodes: usize,
    pub num_steps: usize,
    pub ranges: [Range<usize>; 3],
    pub stats: ZScore,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

/// One mini-batch in time-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub nodes: Vec<usize>,
    /// `[t_h * b, width]`; row `t * b + i` is step `t` of instance `i`.
    pub x: Tensor,
    /// `[b, t_f]`, original scale.
    pub y: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl WindowedDataset {
    pub fn width(&self) -> usize {
        self.config.feature_width()
    }

    pub fn split(&self, which: Split) -> &SplitData {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Gathers the listed instances of one split into a time-major batch.
    pub fn batch(&self, which: Split, indices: &[usize]) -> Result<Batch> {
        let data = self.split(which);
        let (t_h, t_f, w) = (self.config.t_h, self.config.t_f, self.width());
        let b = indices.len();
        if b == 0 {
            return Err(Error::Empty("batch"));
        }
        let mut x = vec![0.0; t_h * b * w];
        let mut y = Vec::with_capacity(b * t_f);
        let mut nodes = Vec::with_capacity(b);
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= data.len() {
                return Err(Error::Index {
                    what: "instance",
                    index: idx,
                    len: data.len(),
                });
            }
            nodes.push(data.nodes[idx]);
            let src = &data.features[idx * t_h * w..(idx + 1) * t_h * w];
            for t in 0..t_h {
                x[(t * b + i) * w..(t * b + i + 1) * w].copy_from_slice(&src[t * w..(t + 1) * w]);
            }
            y.extend_from_slice(&data.targets[idx * t_f..(idx + 1) * t_f]);
        }
        Ok(Batch {
            nodes,
            x: Tensor::new(vec![t_h * b, w], x)?,
            y: Tensor::new(vec![b, t_f], y)?,
        })
    }
}

/// Normalizes, builds ego features and windows every split.
///
/// Instance `(v, t)` belongs to a split only when `t..t + t_h + t_f` lies
/// inside that split's range.
pub fn build_windowed_dataset(raw: &RawSeries, graph: &SensorGraph, cfg: &DatasetConfig) -> Result<WindowedDataset> {
    let n = raw.num_nodes();
    let steps = raw.num_steps();
    if graph.num_nodes != n {
        return Err(Error::Ingestion(alloc::format!(
            "graph has {} sensors, readings have {n}",
            graph.num_nodes
        )));
    }
    if cfg.t_h == 0 || cfg.t_f == 0 {
        return Err(Error::Config("history and horizon lengths must be positive".into()));
    }
    let window = cfg.t_h + cfg.t_f;
    let ranges = chronological_split(steps, cfg.split, window)?;

    let mut train_values = Vec::with_capacity(n * ranges[0].len());
    for v in 0..n {
        train_values.extend_from_slice(&raw.readings.row(v)[ranges[0].clone()]);
    }
    let stats = ZScore::fit(&train_values)?;
    let normalized = Tensor::new(
        vec![n, steps],
        raw.readings.data().iter().map(|x| stats.apply(*x)).collect(),
    )?;
    let time = make_time_features(&raw.timestamps, cfg.include_day_of_week);
    let topk = select_topk_neighbors(graph, cfg.k);
    let ego_w = ego_width(cfg.k);
    let aux = cfg.aux_width();
    let w = ego_w + aux;

    let mut splits: [SplitData; 3] = Default::default();
    for v in 0..n {
        let ego = build_ego_features(&normalized, graph, &topk, v)?;
        let series = raw.readings.row(v);
        for (range, out) in ranges.iter().zip(splits.iter_mut()) {
            if range.len() < window {
                continue;
            }
            for t in range.start..=range.end - window {
                out.nodes.push(v);
                out.starts.push(t);
                for s in t..t + cfg.t_h {
                    out.features.extend_from_slice(ego.row(s));
                    out.features.extend_from_slice(time.row(s));
                }
                out.targets.extend_from_slice(&series[t + cfg.t_h..t + window]);
            }
        }
    }
    debug_assert!(splits.iter().all(|s| s.features.len() == s.len() * cfg.t_h * w));
    let [train, val, test] = splits;
    Ok(WindowedDataset {
        config: cfg.clone(),
        num_nodes: n,
        num_steps: steps,
        ranges,
        stats,
        train,
        val,
        test,
    })
}

/// Sampler settings; the batch size is chosen freely, not derived from the
/// number of sensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchSpec {
    pub fn new(batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(BatchSpec { batch_size, seed })
    }
}

/// Batch size equivalent to sampling `graphs` whole snapshots of `num_nodes` sensors.
pub fn graph_equivalent_batch(num_nodes: usize, graphs: usize) -> usize {
    num_nodes * graphs
}

/// The seeded permutation of `0..len` used for `epoch`.
pub fn epoch_permutation(len: usize, spec: &BatchSpec, epoch: u32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = substream(spec.seed, Stream::Sampler, epoch);
    order.shuffle(&mut rng);
    order
}

/// Instance indices of one epoch in shuffled chunks of `batch_size`; the
/// final chunk may be shorter.
pub fn node_batch_iter(len: usize, spec: &BatchSpec, epoch: u32) -> impl Iterator<Item = Vec<usize>> {
    let order = epoch_permutation(len, spec, epoch);
    let bs = spec.batch_size.max(1);
    let chunks: Vec<Vec<usize>> = order.chunks(bs).map(|c| c.to_vec()).collect();
    chunks.into_iter()
}

/// Consecutive, unshuffled chunks for evaluation.
pub fn sequential_batches(len: usize, batch_size: usize) -> impl Iterator<Item = Range<usize>> {
    let bs = batch_size.max(1);
    (0..len.div_ceil(bs)).map(move |i| i * bs..((i + 1) * bs).min(len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SensorGraph;

    #[test]
    fn split_examples() {
        let r = chronological_split(100, [0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!(r, [0..60, 60..80, 80..100]);
        let e = chronological_split(25, [0.6, 0.2, 0.2], 24).unwrap_err();
        assert!(matches!(e, Error::InsufficientData { split: "validation", .. }));
        assert!(matches!(
            chronological_split(100, [0.5, 0.2, 0.2], 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zscore_examples() {
        let z = ZScore::fit(&[0.0, 2.0]).unwrap();
        assert_eq!((z.mean, z.std), (1.0, 1.0));
        assert_eq!(z.apply(3.0), 2.0);
        let z = ZScore::fit(&[3.5, 1.25, 9.0, 0.1]).unwrap();
        for x in [0.0, 1.7, 123.456] {
            assert!((z.inverse(z.apply(x)) - x).abs() < 1e-12);
        }
        assert_eq!(ZScore::fit(&[4.0, 4.0]), Err(Error::DegenerateStd));
    }

    #[test]
    fn calendar_features() {
        // 2024-01-03 00:00:00 UTC, a Wednesday
        let wed = 1_704_240_000;
        assert_eq!(time_of_day(wed), 0.0);
        assert_eq!(time_of_day(wed + 43_200), 0.5);
        assert!((day_of_week(wed) - 2.0 / 7.0).abs() < 1e-15);
        let f = make_time_features(&[wed, wed + 300], true);
        assert_eq!(f.shape(), &[2, 2]);
        assert_eq!(make_time_features(&[wed], false).shape(), &[1, 1]);
    }

    #[test]
    fn raw_series_validation() {
        let r = Tensor::from_rows(&[[1.0, 2.0], [3.0, f64::NAN]]).unwrap();
        assert!(matches!(RawSeries::new(r, vec![0, 300], None), Err(Error::Ingestion(_))));
        let r = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(RawSeries::new(r, vec![0, 300, 500], None), Err(Error::Ingestion(_))));
    }

    #[test]
    fn batches_cover_ten_instances() {
        let spec = BatchSpec::new(4, 9).unwrap();
        let batches: Vec<_> = node_batch_iter(10, &spec, 0).collect();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(graph_equivalent_batch(307, 64), 19_648);
        assert_eq!(graph_equivalent_batch(883, 64), 56_512);
    }

    fn toy() -> WindowedDataset {
        let steps = 100;
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|v| (0..steps).map(|t| (v * 100 + t) as f64).collect())
            .collect();
        let raw = RawSeries::new(
            Tensor::from_rows(&rows).unwrap(),
            (0..steps as i64).map(|t| t * 300).collect(),
            None,
        )
        .unwrap();
        let g = SensorGraph::from_adjacency(Tensor::zeros(&[3, 3])).unwrap();
        let cfg = DatasetConfig {
            t_h: 3,
            t_f: 2,
            k: 1,
            ..DatasetConfig::default()
        };
        build_windowed_dataset(&raw, &g, &cfg).unwrap()
    }

    #[test]
    fn windows_stay_inside_splits() {
        let d = toy();
        assert_eq!(d.ranges, [0..60, 60..80, 80..100]);
        assert_eq!(d.train.len(), 3 * 56);
        assert!(d.train.starts.iter().all(|t| t + 5 <= 60));
        assert!(d.val.starts.iter().all(|t| *t >= 60 && t + 5 <= 80));
        // target of first train instance of node 1 is the raw value at t_h
        let i = d.train.nodes.iter().position(|v| *v == 1).unwrap();
        assert_eq!(&d.train.targets[i * 2..i * 2 + 2], &[103.0, 104.0]);
    }

    #[test]
    fn batch_layout_is_time_major() {
        let d = toy();
        let b = d.batch(Split::Train, &[0, 57]).unwrap();
        assert_eq!(b.x.shape(), &[6, d.width()]);
        assert_eq!(b.nodes, vec![0, 1]);
        // row t*b+i holds step t of instance i; column 0 is the normalized self series
        for t in 0..3 {
            assert_eq!(b.x.at(t * 2, 0), d.stats.apply(t as f64));
            assert_eq!(b.x.at(t * 2 + 1, 0), d.stats.apply((101 + t) as f64));
        }
    }
}
