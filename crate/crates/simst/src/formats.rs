//! CSV inputs: readings, distances and coordinates.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{Context, Result};
use chrono::{DateTime, NaiveDateTime};
use simst_core::dataset::RawSeries;
use simst_core::graph::DistanceEdge;
use simst_core::Tensor;

use crate::error::data_err;

/// Readings plus the sensor ids from the header, in column order.
#[derive(Debug, Clone, PartialEq)]
pub struct Readings {
    pub sensors: Vec<String>,
    pub series: RawSeries,
}

/// Epoch seconds, or ISO-8601 with or without an offset (naive is UTC).
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    None
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

pub fn read_readings_from<R: Read>(r: R, label: &str) -> Result<Readings> {
    let mut rdr = reader(r);
    let header = rdr.headers().with_context(|| format!("{label}: header"))?.clone();
    if header.len() < 2 {
        return Err(data_err(format!("{label}: header needs a timestamp column and at least one sensor")));
    }
    let sensors: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut seen = HashMap::new();
    for (i, s) in sensors.iter().enumerate() {
        if let Some(prev) = seen.insert(s.as_str(), i) {
            return Err(data_err(format!("{label}: sensor {s:?} appears in columns {} and {}", prev + 2, i + 2)));
        }
    }
    let n = sensors.len();
    let mut timestamps = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.with_context(|| format!("{label}: line {line}"))?;
        if rec.len() != n + 1 {
            return Err(data_err(format!("{label}: line {line} has {} fields, expected {}", rec.len(), n + 1)));
        }
        let ts = parse_timestamp(&rec[0])
            .ok_or_else(|| data_err(format!("{label}: line {line}: bad timestamp {:?}", &rec[0])))?;
        timestamps.push(ts);
        for (c, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| data_err(format!("{label}: line {line}, column {}: bad reading {field:?}", c + 2)))?;
            rows.push(v);
        }
    }
    let t = timestamps.len();
    if t == 0 {
        return Err(data_err(format!("{label}: no readings")));
    }
    let mut readings = vec![0.0; n * t];
    for (s, row) in rows.chunks(n).enumerate() {
        for (v, x) in row.iter().enumerate() {
            readings[v * t + s] = *x;
        }
    }
    let series = RawSeries::new(Tensor::new(vec![n, t], readings)?, timestamps, None)
        .with_context(|| format!("{label}: invalid readings"))?;
    Ok(Readings { sensors, series })
}

pub fn read_readings(path: &Path) -> Result<Readings> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_readings_from(f, &path.display().to_string())
}

/// Distance rows whose ids are resolved against `sensors`.
pub fn read_distances_from<R: Read>(r: R, label: &str, sensors: &[String]) -> Result<Vec<DistanceEdge>> {
    let index: HashMap<&str, usize> = sensors.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut rdr = reader(r);
    let header = rdr.headers().with_context(|| format!("{label}: header"))?.clone();
    if header.iter().collect::<Vec<_>>() != ["from", "to", "dist"] {
        return Err(data_err(format!("{label}: header must be from,to,dist")));
    }
    let mut edges = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.with_context(|| format!("{label}: line {line}"))?;
        if rec.len() != 3 {
            return Err(data_err(format!("{label}: line {line} has {} fields, expected 3", rec.len())));
        }
        let lookup = |field: &str| {
            index
                .get(field)
                .copied()
                .ok_or_else(|| data_err(format!("{label}: line {line}: unknown sensor {field:?}")))
        };
        let from = lookup(&rec[0])?;
        let to = lookup(&rec[1])?;
        let dist: f64 = rec[2]
            .parse()
            .map_err(|_| data_err(format!("{label}: line {line}: bad distance {:?}", &rec[2])))?;
        edges.push(DistanceEdge { from, to, dist });
    }
    Ok(edges)
}

pub fn read_distances(path: &Path, sensors: &[String]) -> Result<Vec<DistanceEdge>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_distances_from(f, &path.display().to_string(), sensors)
}

/// Coordinates in the order of `sensors`; every sensor must be present.
pub fn read_coords_from<R: Read>(r: R, label: &str, sensors: &[String]) -> Result<Vec<(f64, f64)>> {
    let index: HashMap<&str, usize> = sensors.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut out: Vec<Option<(f64, f64)>> = vec![None; sensors.len()];
    let mut rdr = reader(r);
    let header = rdr.headers().with_context(|| format!("{label}: header"))?.clone();
    if header.iter().collect::<Vec<_>>() != ["sensor_id", "latitude", "longitude"] {
        return Err(data_err(format!("{label}: header must be sensor_id,latitude,longitude")));
    }
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.with_context(|| format!("{label}: line {line}"))?;
        if rec.len() != 3 {
            return Err(data_err(format!("{label}: line {line} has {} fields, expected 3", rec.len())));
        }
        let v = *index
            .get(&rec[0])
            .ok_or_else(|| data_err(format!("{label}: line {line}: unknown sensor {:?}", &rec[0])))?;
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| data_err(format!("{label}: line {line}: bad coordinate {s:?}")))
        };
        out[v] = Some((parse(&rec[1])?, parse(&rec[2])?));
    }
    out.into_iter()
        .enumerate()
        .map(|(v, c)| c.ok_or_else(|| data_err(format!("{label}: no coordinates for sensor {:?}", sensors[v]))))
        .collect()
}

pub fn read_coords(path: &Path, sensors: &[String]) -> Result<Vec<(f64, f64)>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_coords_from(f, &path.display().to_string(), sensors)
}

pub fn write_readings<W: Write>(w: W, sensors: &[String], series: &RawSeries) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["timestamp".to_owned()];
    header.extend(sensors.iter().cloned());
    wtr.write_record(&header)?;
    let (n, t) = (series.num_nodes(), series.num_steps());
    let data = series.readings.data();
    let mut row = Vec::with_capacity(n + 1);
    for s in 0..t {
        row.clear();
        row.push(series.timestamps[s].to_string());
        row.extend((0..n).map(|v| data[v * t + s].to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_distances<W: Write>(w: W, sensors: &[String], edges: &[DistanceEdge]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["from", "to", "dist"])?;
    for e in edges {
        wtr.write_record([sensors[e.from].as_str(), sensors[e.to].as_str(), &e.dist.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_coords<W: Write>(w: W, sensors: &[String], coords: &[(f64, f64)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["sensor_id", "latitude", "longitude"])?;
    for (s, (lat, lon)) in sensors.iter().zip(coords) {
        wtr.write_record([s.as_str(), &lat.to_string(), &lon.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
