//! Throughput measurement and the node-count scaling study.

use std::io::Write;
use std::time::Instant;

use anyhow::Result;
use rand::Rng;
use simst_core::baseline::{knn_geometric_graph, GcnBaseline};
use simst_core::dataset::sequential_batches;
use simst_core::model::{EncoderKind, ModelConfig, SimSt};
use simst_core::rng::{stream, Stream};
use simst_core::Tensor;

use crate::error::config_err;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub system: String,
    pub num_nodes: usize,
    pub batch_size: usize,
    pub samples: usize,
    pub warmup: usize,
    pub repeats: usize,
    /// Median wall seconds of one full timed pass.
    pub seconds: f64,
    pub tps: f64,
    pub per_sample_us: f64,
    pub machine: String,
}

pub const BENCH_HEADER: &str =
    "system,num_nodes,batch_size,samples,warmup,repeats,seconds,tps,per_sample_us,machine";

impl BenchResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{:.3},{:.3},{}",
            self.system,
            self.num_nodes,
            self.batch_size,
            self.samples,
            self.warmup,
            self.repeats,
            self.seconds,
            self.tps,
            self.per_sample_us,
            self.machine
        )
    }
}

/// Single-threaded timing context written next to every result.
pub fn machine_description() -> String {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{}-{} {}cpu single-thread", std::env::consts::OS, std::env::consts::ARCH, cores)
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times `repeats` full passes of `forward` over `samples` instances in
/// consecutive batches, after `warmup` untimed batches.
pub fn measure_tps(
    system: &str,
    num_nodes: usize,
    samples: usize,
    batch_size: usize,
    warmup: usize,
    repeats: usize,
    mut forward: impl FnMut(std::ops::Range<usize>) -> Result<()>,
) -> Result<BenchResult> {
    if samples == 0 {
        return Err(config_err("nothing to benchmark: the split is empty"));
    }
    if warmup == 0 || repeats == 0 || batch_size == 0 {
        return Err(config_err("warmup, repeats and batch size must be positive"));
    }
    let all: Vec<_> = sequential_batches(samples, batch_size).collect();
    for r in all.iter().cycle().take(warmup) {
        forward(r.clone())?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for r in &all {
            forward(r.clone())?;
        }
        times.push(start.elapsed().as_secs_f64());
    }
    let seconds = median(&mut times).max(f64::MIN_POSITIVE);
    Ok(BenchResult {
        system: system.to_owned(),
        num_nodes,
        batch_size,
        samples,
        warmup,
        repeats,
        seconds,
        tps: samples as f64 / seconds,
        per_sample_us: seconds * 1e6 / samples as f64,
        machine: machine_description(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleConfig {
    pub sizes: Vec<usize>,
    pub degree: usize,
    pub d_m: usize,
    pub t_h: usize,
    pub t_f: usize,
    pub k: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig {
            sizes: vec![100, 200, 400],
            degree: 8,
            d_m: 64,
            t_h: 12,
            t_f: 12,
            k: 3,
            repeats: 5,
            seed: 0,
        }
    }
}

/// One measured point: a whole snapshot of `num_nodes` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalePoint {
    pub system: String,
    pub num_nodes: usize,
    pub total_us: f64,
    pub per_sample_us: f64,
}

pub const SCALE_HEADER: &str = "system,num_nodes,per_sample_us,total_us";

impl ScalePoint {
    pub fn csv_row(&self) -> String {
        format!("{},{},{:.3},{:.3}", self.system, self.num_nodes, self.per_sample_us, self.total_us)
    }
}

fn time_median(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64() * 1e6);
    }
    Ok(median(&mut times))
}

/// Forward cost of SimST (a batch of one instance per sensor), a GCN with
/// dense adaptive adjacency, and a GCN with sparse fixed adjacency, on
/// random graphs of constant average degree.
pub fn scaling_study(cfg: &ScaleConfig) -> Result<Vec<ScalePoint>> {
    if cfg.sizes.is_empty() || cfg.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(config_err("sizes must be non-empty and strictly ascending"));
    }
    if cfg.repeats == 0 {
        return Err(config_err("repeats must be positive"));
    }
    let mut out = Vec::new();
    for &n in &cfg.sizes {
        if n <= cfg.degree {
            return Err(config_err(format!("size {n} must exceed the degree {}", cfg.degree)));
        }
        let graph = knn_geometric_graph(n, cfg.degree, cfg.seed)?;
        let mut rng = stream(cfg.seed, Stream::Probe);

        let mcfg = ModelConfig {
            d_m: cfg.d_m,
            k: cfg.k,
            t_h: cfg.t_h,
            t_f: cfg.t_f,
            ..ModelConfig::defaults(EncoderKind::Gru, n)
        };
        let (model, store) = SimSt::new(mcfg.clone(), cfg.seed)?;
        let w = mcfg.input_width();
        let x = Tensor::new(
            vec![cfg.t_h * n, w],
            (0..cfg.t_h * n * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        let nodes: Vec<usize> = (0..n).collect();
        let us = time_median(cfg.repeats, || model.infer(&store, &x, &nodes).map(|_| ()).map_err(Into::into))?;
        out.push(point("simst", n, us));

        let snapshot = Tensor::new(
            vec![n, cfg.t_h],
            (0..n * cfg.t_h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        let adaptive = GcnBaseline::adaptive(n, 10, cfg.t_h, cfg.d_m, cfg.t_f, cfg.seed);
        let us = time_median(cfg.repeats, || adaptive.forward(&snapshot).map(|_| ()).map_err(Into::into))?;
        out.push(point("gcn-adaptive", n, us));

        let sparse = GcnBaseline::sparse(&graph, cfg.t_h, cfg.d_m, cfg.t_f, cfg.seed);
        let us = time_median(cfg.repeats, || sparse.forward(&snapshot).map(|_| ()).map_err(Into::into))?;
        out.push(point("gcn-sparse", n, us));
    }
    Ok(out)
}

fn point(system: &str, n: usize, total_us: f64) -> ScalePoint {
    ScalePoint {
        system: system.to_owned(),
        num_nodes: n,
        total_us,
        per_sample_us: total_us / n as f64,
    }
}

pub fn write_scale_csv<W: Write>(mut w: W, points: &[ScalePoint]) -> Result<()> {
    writeln!(w, "{SCALE_HEADER}")?;
    for p in points {
        writeln!(w, "{}", p.csv_row())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn warmup_is_untimed_and_counted() {
        let mut calls = 0;
        let r = measure_tps("x", 1, 10, 4, 2, 3, |_| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 2 + 3 * 3);
        assert!(r.tps > 0.0);
        assert_eq!(r.samples, 10);
        assert!(measure_tps("x", 1, 0, 4, 1, 1, |_| Ok(())).is_err());
        assert!(measure_tps("x", 1, 4, 4, 0, 1, |_| Ok(())).is_err());
    }
}
