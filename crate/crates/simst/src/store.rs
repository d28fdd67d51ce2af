//! On-disk artifacts: preprocessed dataset directories, checkpoints,
//! manifests and training logs. Binary arrays are little-endian f64.

use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use simst_core::dataset::{DatasetConfig, SplitData, WindowedDataset, ZScore};
use simst_core::graph::ego_width;
use simst_core::model::{ModelConfig, SimSt};
use simst_core::trainer::EpochRecord;
use simst_core::{ParamStore, Tensor};

use crate::config::parse_kv;
use crate::error::{config_err, data_err};

pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SIMSTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const META_FILE: &str = "meta";
pub const FEATURES_FILE: &str = "ego_features.bin";
pub const TARGETS_FILE: &str = "targets.bin";
pub const SERIES_FILE: &str = "series.bin";
pub const SENSORS_FILE: &str = "sensors";
pub const COORDS_FILE: &str = "coords.csv";
pub const MANIFEST_FILE: &str = "manifest";

pub fn write_f64s(path: &Path, chunks: &[&[f64]]) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    for chunk in chunks {
        for x in *chunk {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() % 8 != 0 {
        return Err(data_err(format!("{}: length {} is not a multiple of 8", path.display(), bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// A preprocessed dataset plus what the command line needs around it.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    pub data: WindowedDataset,
    pub sensors: Vec<String>,
    /// Raw readings `[V, T]`, kept for the historical-average baseline.
    pub series: Tensor,
    pub start: i64,
    pub step: i64,
    pub threshold: f64,
    pub num_edges: usize,
    pub coords: Option<Vec<(f64, f64)>>,
}

impl PreparedDataset {
    pub fn timestamps(&self) -> Vec<i64> {
        (0..self.data.num_steps as i64).map(|t| self.start + t * self.step).collect()
    }
}

fn range_text(r: &Range<usize>) -> String {
    format!("{}..{}", r.start, r.end)
}

fn parse_range(key: &str, v: &str) -> Result<Range<usize>> {
    let (a, b) = v
        .split_once("..")
        .ok_or_else(|| data_err(format!("meta {key}: expected start..end, got {v:?}")))?;
    let p = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| data_err(format!("meta {key}: bad index {s:?}")))
    };
    Ok(p(a)?..p(b)?)
}

pub fn meta_text(p: &PreparedDataset) -> String {
    let d = &p.data;
    let c = &d.config;
    let mut lines = vec![
        format!("format = simst-dataset"),
        format!("version = {DATASET_VERSION}"),
        format!("num_nodes = {}", d.num_nodes),
        format!("num_steps = {}", d.num_steps),
        format!("feature_width = {}", c.feature_width()),
        format!("ego_width = {}", ego_width(c.k)),
        format!("k = {}", c.k),
        format!("t_h = {}", c.t_h),
        format!("t_f = {}", c.t_f),
        format!("day_of_week = {}", c.include_day_of_week),
        format!("split = {},{},{}", c.split[0], c.split[1], c.split[2]),
        format!("train_range = {}", range_text(&d.ranges[0])),
        format!("val_range = {}", range_text(&d.ranges[1])),
        format!("test_range = {}", range_text(&d.ranges[2])),
        format!("train_instances = {}", d.train.len()),
        format!("val_instances = {}", d.val.len()),
        format!("test_instances = {}", d.test.len()),
        format!("mean = {:?}", d.stats.mean),
        format!("std = {:?}", d.stats.std),
        format!("threshold = {}", p.threshold),
        format!("num_edges = {}", p.num_edges),
        format!("start_timestamp = {}", p.start),
        format!("step_seconds = {}", p.step),
    ];
    lines.push(String::new());
    lines.join("\n")
}

pub fn write_dataset(dir: &Path, p: &PreparedDataset) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let d = &p.data;
    fs::write(dir.join(META_FILE), meta_text(p))?;
    fs::write(dir.join(SENSORS_FILE), p.sensors.iter().map(|s| format!("{s}\n")).collect::<String>())?;
    write_f64s(
        &dir.join(FEATURES_FILE),
        &[&d.train.features, &d.val.features, &d.test.features],
    )?;
    write_f64s(
        &dir.join(TARGETS_FILE),
        &[&d.train.targets, &d.val.targets, &d.test.targets],
    )?;
    write_f64s(&dir.join(SERIES_FILE), &[p.series.data()])?;
    if let Some(coords) = &p.coords {
        let f = fs::File::create(dir.join(COORDS_FILE))?;
        crate::formats::write_coords(f, &p.sensors, coords)?;
    }
    Ok(())
}

/// Instance order of a split: node-major, then window start.
fn enumerate_split(num_nodes: usize, range: &Range<usize>, window: usize) -> (Vec<usize>, Vec<usize>) {
    let (mut nodes, mut starts) = (Vec::new(), Vec::new());
    if range.len() >= window {
        for v in 0..num_nodes {
            for t in range.start..=range.end - window {
                nodes.push(v);
                starts.push(t);
            }
        }
    }
    (nodes, starts)
}

pub fn read_dataset(dir: &Path) -> Result<PreparedDataset> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?;
    let meta = parse_kv(&text).map_err(|e| data_err(format!("{}: {e}", meta_path.display())))?;
    let get = |k: &str| {
        meta.get(k)
            .map(String::as_str)
            .ok_or_else(|| data_err(format!("{}: missing {k}", meta_path.display())))
    };
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| data_err(format!("meta {k}: bad value {v:?}")))
    }
    if get("format")? != "simst-dataset" {
        return Err(data_err(format!("{} is not a dataset directory", dir.display())));
    }
    let version: u32 = num("version", get("version")?)?;
    if version != DATASET_VERSION {
        return Err(config_err(format!("dataset version {version}, this build reads {DATASET_VERSION}")));
    }
    let split: Vec<f64> = get("split")?
        .split(',')
        .map(|s| num("split", s))
        .collect::<Result<_>>()?;
    let config = DatasetConfig {
        t_h: num("t_h", get("t_h")?)?,
        t_f: num("t_f", get("t_f")?)?,
        k: num("k", get("k")?)?,
        split: split.try_into().map_err(|_| data_err("meta split: expected three ratios"))?,
        include_day_of_week: num("day_of_week", get("day_of_week")?)?,
    };
    let n: usize = num("num_nodes", get("num_nodes")?)?;
    let steps: usize = num("num_steps", get("num_steps")?)?;
    let ranges = [
        parse_range("train_range", get("train_range")?)?,
        parse_range("val_range", get("val_range")?)?,
        parse_range("test_range", get("test_range")?)?,
    ];
    let stats = ZScore {
        mean: num("mean", get("mean")?)?,
        std: num("std", get("std")?)?,
    };
    let w = config.feature_width();
    let window = config.t_h + config.t_f;
    let mut features = read_f64s(&dir.join(FEATURES_FILE))?;
    let mut targets = read_f64s(&dir.join(TARGETS_FILE))?;
    let series = read_f64s(&dir.join(SERIES_FILE))?;
    if series.len() != n * steps {
        return Err(data_err(format!("{SERIES_FILE}: {} values, meta implies {}", series.len(), n * steps)));
    }

    let mut splits: Vec<SplitData> = ranges
        .iter()
        .map(|r| {
            let (nodes, starts) = enumerate_split(n, r, window);
            SplitData {
                nodes,
                starts,
                features: Vec::new(),
                targets: Vec::new(),
            }
        })
        .collect();
    let total: usize = splits.iter().map(|s| s.nodes.len()).sum();
    for (name, s) in ["train", "val", "test"].iter().zip(&splits) {
        let recorded: usize = num(name, get(&format!("{name}_instances"))?)?;
        if recorded != s.nodes.len() {
            return Err(data_err(format!("meta {name}_instances = {recorded}, ranges imply {}", s.nodes.len())));
        }
    }
    if features.len() != total * config.t_h * w || targets.len() != total * config.t_f {
        return Err(data_err(format!(
            "{}: binary sizes do not match {total} instances of width {w}",
            dir.display()
        )));
    }
    for s in splits.iter_mut().rev() {
        let len = s.nodes.len();
        s.features = features.split_off(features.len() - len * config.t_h * w);
        s.targets = targets.split_off(targets.len() - len * config.t_f);
    }
    let [train, val, test]: [SplitData; 3] = splits.try_into().expect("three splits");

    let sensors: Vec<String> = fs::read_to_string(dir.join(SENSORS_FILE))
        .with_context(|| format!("reading {}", dir.join(SENSORS_FILE).display()))?
        .lines()
        .map(str::to_owned)
        .collect();
    if sensors.len() != n {
        return Err(data_err(format!("{SENSORS_FILE}: {} ids for {n} sensors", sensors.len())));
    }
    let coords_path = dir.join(COORDS_FILE);
    let coords = if coords_path.exists() {
        Some(crate::formats::read_coords(&coords_path, &sensors)?)
    } else {
        None
    };
    Ok(PreparedDataset {
        data: WindowedDataset {
            config,
            num_nodes: n,
            num_steps: steps,
            ranges,
            stats,
            train,
            val,
            test,
        },
        sensors,
        series: Tensor::new(vec![n, steps], series)?,
        start: num("start_timestamp", get("start_timestamp")?)?,
        step: num("step_seconds", get("step_seconds")?)?,
        threshold: num("threshold", get("threshold")?)?,
        num_edges: num("num_edges", get("num_edges")?)?,
        coords,
    })
}

/// Trained model plus the normalization it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub stats: ZScore,
    pub seed: u64,
    pub sensors: Vec<String>,
    pub params: ParamStore,
}

fn model_text(c: &Checkpoint) -> String {
    let m = &c.model;
    [
        format!("encoder = {}", m.encoder),
        format!("num_nodes = {}", m.num_nodes),
        format!("d_m = {}", m.d_m),
        format!("d_n = {}", m.d_n),
        format!("layers = {}", m.layers),
        format!("predictor_dim = {}", m.predictor_dim),
        format!("dropout = {:?}", m.dropout),
        format!("tcn_kernel = {}", m.tcn_kernel),
        format!("tcn_skip_dim = {}", m.tcn_skip_dim),
        format!("ct_heads = {}", m.ct_heads),
        format!("ct_ffn_dim = {}", m.ct_ffn_dim),
        format!("k = {}", m.k),
        format!("aux_width = {}", m.aux_width),
        format!("t_h = {}", m.t_h),
        format!("t_f = {}", m.t_f),
        format!("ablate_cl = {}", m.ablate_cl),
        format!("ablate_pm = {}", m.ablate_pm),
        format!("mean = {:?}", c.stats.mean),
        format!("std = {:?}", c.stats.std),
        format!("seed = {}", c.seed),
        String::new(),
    ]
    .join("\n")
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Layout: magic, u32 version, config text, sensor ids, then each
/// parameter as name, rank, u64 dims and f64 values. Strings are u32
/// length-prefixed UTF-8; all integers little-endian.
pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, &model_text(c));
    out.extend_from_slice(&(c.sensors.len() as u32).to_le_bytes());
    for s in &c.sensors {
        put_str(&mut out, s);
    }
    out.extend_from_slice(&(c.params.len() as u32).to_le_bytes());
    for p in c.params.iter() {
        put_str(&mut out, &p.name);
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for d in p.value.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| data_err(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| data_err("checkpoint string is not UTF-8"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(data_err("not a checkpoint file"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(config_err(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let kv = parse_kv(&cur.string()?)?;
    let get = |k: &str| {
        kv.get(k)
            .map(String::as_str)
            .ok_or_else(|| config_err(format!("checkpoint config is missing {k}")))
    };
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| config_err(format!("checkpoint {k}: bad value {v:?}")))
    }
    let model = ModelConfig {
        encoder: get("encoder")?.parse()?,
        num_nodes: num("num_nodes", get("num_nodes")?)?,
        d_m: num("d_m", get("d_m")?)?,
        d_n: num("d_n", get("d_n")?)?,
        layers: num("layers", get("layers")?)?,
        predictor_dim: num("predictor_dim", get("predictor_dim")?)?,
        dropout: num("dropout", get("dropout")?)?,
        tcn_kernel: num("tcn_kernel", get("tcn_kernel")?)?,
        tcn_skip_dim: num("tcn_skip_dim", get("tcn_skip_dim")?)?,
        ct_heads: num("ct_heads", get("ct_heads")?)?,
        ct_ffn_dim: num("ct_ffn_dim", get("ct_ffn_dim")?)?,
        k: num("k", get("k")?)?,
        aux_width: num("aux_width", get("aux_width")?)?,
        t_h: num("t_h", get("t_h")?)?,
        t_f: num("t_f", get("t_f")?)?,
        ablate_cl: num("ablate_cl", get("ablate_cl")?)?,
        ablate_pm: num("ablate_pm", get("ablate_pm")?)?,
    };
    let stats = ZScore {
        mean: num("mean", get("mean")?)?,
        std: num("std", get("std")?)?,
    };
    let seed = num("seed", get("seed")?)?;
    let n_sensors = cur.u32()? as usize;
    let sensors = (0..n_sensors).map(|_| cur.string()).collect::<Result<Vec<_>>>()?;
    let count = cur.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = cur.string()?;
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(cur.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel.checked_mul(8).ok_or_else(|| data_err("checkpoint shape overflows"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.add(&name, Tensor::new(shape, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(data_err("trailing bytes after checkpoint parameters"));
    }
    Ok(Checkpoint {
        model,
        stats,
        seed,
        sensors,
        params,
    })
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(c)).with_context(|| format!("writing {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_checkpoint(&bytes).with_context(|| format!("loading {}", path.display()))
}

impl Checkpoint {
    /// Rebuilds the model; parameters must match its layout exactly.
    pub fn instantiate(&self) -> Result<(SimSt, ParamStore)> {
        let (model, mut store) = SimSt::new(self.model.clone(), self.seed)?;
        store
            .load_from(&self.params)
            .map_err(|e| config_err(format!("checkpoint does not match its configuration: {e}")))?;
        Ok((model, store))
    }

    /// Errors unless the checkpoint was trained on data shaped like `d`.
    pub fn check_dataset(&self, d: &WindowedDataset) -> Result<()> {
        let m = &self.model;
        let c = &d.config;
        if m.num_nodes != d.num_nodes || m.k != c.k || m.t_h != c.t_h || m.t_f != c.t_f || m.aux_width != c.aux_width() {
            return Err(config_err(format!(
                "checkpoint expects {} sensors, k={}, t_h={}, t_f={}, aux={}; dataset has {}, {}, {}, {}, {}",
                m.num_nodes,
                m.k,
                m.t_h,
                m.t_f,
                m.aux_width,
                d.num_nodes,
                c.k,
                c.t_h,
                c.t_f,
                c.aux_width()
            )));
        }
        Ok(())
    }
}

/// Where and how an artifact directory was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub resolved_config: String,
    pub seeds: Vec<u64>,
    pub version: String,
    pub output_dir: PathBuf,
    pub started: String,
    pub finished: String,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let mut s = String::new();
        s.push_str(&format!("command = {}\n", self.command));
        s.push_str(&format!(
            "config_path = {}\n",
            self.config_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        ));
        s.push_str(&format!("seeds = {}\n", seeds.join(",")));
        s.push_str(&format!("version = {}\n", self.version));
        s.push_str(&format!("output_dir = {}\n", self.output_dir.display()));
        s.push_str(&format!("started = {}\n", self.started));
        s.push_str(&format!("finished = {}\n", self.finished));
        s.push_str("[resolved]\n");
        s.push_str(&self.resolved_config);
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), self.to_text()).with_context(|| format!("writing manifest in {}", dir.display()))
    }
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_mae,val_rmse,val_mape,seconds";

/// One log line; epochs without validation leave the metric fields empty.
pub fn log_line(r: &EpochRecord, deterministic: bool) -> String {
    let secs = if deterministic { 0.0 } else { r.seconds };
    match &r.val {
        Some(v) => format!("{},{:?},{:?},{:?},{:?},{:.3}", r.epoch, r.train_loss, v.mae, v.rmse, v.mape, secs),
        None => format!("{},{:?},,,,{:.3}", r.epoch, r.train_loss, secs),
    }
}
