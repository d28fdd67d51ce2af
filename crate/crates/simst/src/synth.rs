//! Synthetic sensor networks with known spatial structure.

use std::f64::consts::PI;
use std::str::FromStr;

use anyhow::{bail, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use simst_core::analysis::haversine_km;
use simst_core::dataset::{RawSeries, SECONDS_PER_DAY};
use simst_core::graph::DistanceEdge;
use simst_core::rng::{stream, Stream};
use simst_core::Tensor;

pub const STEP_SECONDS: i64 = 300;
pub const STEPS_PER_DAY: usize = 288;
/// 2024-01-01 00:00 UTC, a Monday.
pub const DEFAULT_START: i64 = 1_704_067_200;

const ORIGIN: (f64, f64) = (34.0, -118.3);
const ROAD_FACTOR: f64 = 1.3;
const BURN_IN: usize = 600;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Spatially smooth daily profiles plus an autoregressive disturbance
    /// driven by the sensor's own past and its nearest neighbors.
    CoupledSine,
    /// Independent reflected random walks around a flat level.
    RandomWalk,
}

impl FromStr for Profile {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coupled-sine" => Ok(Profile::CoupledSine),
            "random-walk" => Ok(Profile::RandomWalk),
            other => bail!("unknown synthetic profile {other:?} (expected coupled-sine or random-walk)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub profile: Profile,
    pub num_sensors: usize,
    pub days: usize,
    pub seed: u64,
    /// Side of the square region in km.
    pub region_km: f64,
    /// Nearest sensors coupled to each sensor.
    pub coupling_neighbors: usize,
    /// Weight on the sensor's own previous disturbance.
    pub self_weight: f64,
    /// Weight on the mean neighbor disturbance three steps back.
    pub neighbor_weight: f64,
    pub innovation_std: f64,
    /// Stationary standard deviation of a slow region-wide factor.
    pub regional_std: f64,
    /// Per-step persistence of the regional factor.
    pub regional_persistence: f64,
    pub noise_std: f64,
    pub start: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            profile: Profile::CoupledSine,
            num_sensors: 20,
            days: 14,
            seed: 0,
            region_km: 16.0,
            coupling_neighbors: 3,
            self_weight: 0.85,
            neighbor_weight: 0.14,
            innovation_std: 1.2,
            regional_std: 3.0,
            regional_persistence: 0.995,
            noise_std: 0.3,
            start: DEFAULT_START,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub series: RawSeries,
    /// Road distances in meters for every ordered pair of distinct sensors.
    pub distances: Vec<DistanceEdge>,
    /// Undirected coupling lists used by the generator.
    pub coupling: Vec<Vec<usize>>,
}

fn gauss(x: f64, center: f64, width: f64) -> f64 {
    let d = (x - center) / width;
    (-0.5 * d * d).exp()
}

/// Daily mean reading of a sensor at normalized position `(u, w)` and hour `h`.
fn daily_profile(u: f64, w: f64, h: f64) -> f64 {
    let base = 55.0 + 8.0 * (u - 0.5);
    let amp = 6.0 + 6.0 * w;
    let phase = 0.2 * PI * (u + w);
    let morning = (5.0 + 25.0 * w) * gauss(h, 7.5 + 3.0 * (u - 0.5), 0.8);
    let evening = (5.0 + 25.0 * u) * gauss(h, 17.5 + 3.0 * (w - 0.5), 1.0);
    base + amp * (2.0 * PI * h / 24.0 + phase).sin() - morning - evening
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.num_sensors < 2 {
        bail!("need at least two sensors");
    }
    if cfg.days == 0 {
        bail!("need at least one day");
    }
    if cfg.coupling_neighbors == 0 || cfg.coupling_neighbors >= cfg.num_sensors {
        bail!("coupling_neighbors must lie in 1..num_sensors");
    }
    if cfg.self_weight.abs() + cfg.neighbor_weight.abs() >= 1.0 {
        bail!("self_weight + neighbor_weight must stay below 1 for a stationary disturbance");
    }
    if !(0.0..1.0).contains(&cfg.regional_persistence) {
        bail!("regional_persistence must lie in [0, 1)");
    }
    let n = cfg.num_sensors;
    let steps = cfg.days * STEPS_PER_DAY;
    let mut rng = stream(cfg.seed, Stream::Synth);

    let pos: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.gen::<f64>() * cfg.region_km, rng.gen::<f64>() * cfg.region_km))
        .collect();
    let km_per_lon = 111.32 * (ORIGIN.0 * PI / 180.0).cos();
    let coords: Vec<(f64, f64)> = pos
        .iter()
        .map(|(x, y)| (ORIGIN.0 + y / 110.574, ORIGIN.1 + x / km_per_lon))
        .collect();

    let mut distances = Vec::with_capacity(n * (n - 1));
    let mut coupling = vec![Vec::new(); n];
    for i in 0..n {
        let mut by_dist: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
        for j in 0..n {
            if i == j {
                continue;
            }
            let km = haversine_km(coords[i], coords[j]);
            distances.push(DistanceEdge {
                from: i,
                to: j,
                dist: (km * ROAD_FACTOR * 1000.0).round(),
            });
            by_dist.push((km, j));
        }
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in by_dist.iter().take(cfg.coupling_neighbors) {
            coupling[i].push(j);
            coupling[j].push(i);
        }
    }
    for list in &mut coupling {
        list.sort_unstable();
        list.dedup();
    }

    let timestamps: Vec<i64> = (0..steps as i64).map(|t| cfg.start + t * STEP_SECONDS).collect();
    let mut readings = vec![0.0; n * steps];
    match cfg.profile {
        Profile::CoupledSine => {
            let total = steps + BURN_IN;
            let rho = cfg.regional_persistence;
            let shock = cfg.regional_std * (1.0 - rho * rho).sqrt();
            let mut regional = vec![0.0; total];
            for t in 1..total {
                let eps: f64 = rng.sample(StandardNormal);
                regional[t] = rho * regional[t - 1] + shock * eps;
            }
            let mut z = vec![0.0; n * total];
            for t in 1..total {
                for v in 0..n {
                    let lagged = if t >= 3 {
                        coupling[v].iter().map(|&u| z[u * total + t - 3]).sum::<f64>() / coupling[v].len() as f64
                    } else {
                        0.0
                    };
                    let eps: f64 = rng.sample(StandardNormal);
                    z[v * total + t] =
                        cfg.self_weight * z[v * total + t - 1] + cfg.neighbor_weight * lagged + cfg.innovation_std * eps;
                }
            }
            for v in 0..n {
                let (u, w) = (pos[v].0 / cfg.region_km, pos[v].1 / cfg.region_km);
                let loading = 0.4 + 1.2 * u * w;
                for (t, ts) in timestamps.iter().enumerate() {
                    let hour = ts.rem_euclid(SECONDS_PER_DAY) as f64 / 3600.0;
                    let noise: f64 = rng.sample(StandardNormal);
                    let x = daily_profile(u, w, hour)
                        + z[v * total + BURN_IN + t]
                        + loading * regional[BURN_IN + t]
                        + cfg.noise_std * noise;
                    readings[v * steps + t] = x.max(0.0);
                }
            }
        }
        Profile::RandomWalk => {
            for v in 0..n {
                let mut x = 50.0;
                for t in 0..steps {
                    let eps: f64 = rng.sample(StandardNormal);
                    x = (x + cfg.innovation_std * eps).clamp(5.0, 95.0);
                    readings[v * steps + t] = x;
                }
            }
        }
    }
    let series = RawSeries::new(Tensor::new(vec![n, steps], readings)?, timestamps, Some(coords))?;
    Ok(SynthData {
        series,
        distances,
        coupling,
    })
}
