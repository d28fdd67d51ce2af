//! Command-line surface and the command implementations behind it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use simst_core::analysis::{distance_decay_check, SimilarityStudy};
use simst_core::baseline::HistoricalAverage;
use simst_core::dataset::{build_windowed_dataset, Split};
use simst_core::graph::{build_adjacency, ego_width};
use simst_core::metrics::{MetricsAccumulator, MetricsReport};
use simst_core::trainer::{evaluate, fit, EpochRecord, FitObserver};
use simst_core::Tensor;

use crate::bench::{measure_tps, scaling_study, write_scale_csv, BenchResult, ScaleConfig, ScalePoint, BENCH_HEADER};
use crate::config::RunConfig;
use crate::error::{config_err, data_err};
use crate::formats;
use crate::store::{self, Checkpoint, PreparedDataset, RunManifest, LOG_HEADER};
use crate::synth::{self, Profile, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "simst", version, about = "Graph-free traffic forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build ego features and windows from raw CSV files.
    Preprocess(PreprocessArgs),
    /// Train one model per seed and report test metrics.
    Train(TrainArgs),
    /// Score a checkpoint (or the historical average) on a split.
    Eval(EvalArgs),
    /// Measure inference throughput on the validation split.
    Bench(BenchArgs),
    /// Time SimST against GCN baselines as the sensor count grows.
    ScaleStudy(ScaleArgs),
    /// Generate a synthetic sensor network.
    Synth(SynthArgs),
    /// Relate learned sensor embeddings to geography.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub readings: PathBuf,
    #[arg(long)]
    pub distances: PathBuf,
    #[arg(long)]
    pub coords: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub t_h: Option<usize>,
    #[arg(long)]
    pub t_f: Option<usize>,
    /// Train,val,test ratios.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub day_of_week: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// gru, tcn (alias wn) or ct.
    #[arg(long)]
    pub encoder: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, conflicts_with = "seed")]
    pub seeds: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub d_m: Option<usize>,
    #[arg(long)]
    pub d_n: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub ablate_cl: bool,
    #[arg(long)]
    pub ablate_pm: bool,
    /// Zero the wall-clock column so logs are byte-reproducible.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "ha", conflicts_with = "ha")]
    pub checkpoint: Option<PathBuf>,
    /// Score the historical-average baseline instead of a checkpoint.
    #[arg(long)]
    pub ha: bool,
    /// Weekly instead of daily slots for the historical average.
    #[arg(long, requires = "ha")]
    pub weekly: bool,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Relative to the training std.
    #[arg(long, default_value_t = 1e-3)]
    pub mape_epsilon: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1024)]
    pub batch_size: usize,
    /// Untimed batches before measuring.
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScaleArgs {
    #[arg(long, default_value = "100,200,400")]
    pub sizes: String,
    #[arg(long, default_value_t = 8)]
    pub degree: usize,
    #[arg(long, default_value_t = 64)]
    pub d_m: usize,
    #[arg(long, default_value_t = 12)]
    pub t_h: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "coupled-sine")]
    pub profile: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub sensors: usize,
    #[arg(long, default_value_t = 14)]
    pub days: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub coords: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub anchor: usize,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long, default_value_t = 1000)]
    pub permutations: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(a) => cmd_preprocess(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            if a.out.is_none() {
                print!("{}", metrics_csv(&report));
            }
            Ok(())
        }
        Command::Bench(a) => {
            let r = cmd_bench(&a)?;
            if a.out.is_none() {
                println!("{BENCH_HEADER}\n{}", r.csv_row());
            }
            eprintln!("{:.1} samples/s, {:.2} us/sample", r.tps, r.per_sample_us);
            Ok(())
        }
        Command::ScaleStudy(a) => {
            for p in cmd_scale_study(&a)? {
                eprintln!("{:>13} |V|={:<5} {:>10.2} us/sample", p.system, p.num_nodes, p.per_sample_us);
            }
            Ok(())
        }
        Command::Synth(a) => cmd_synth(&a),
        Command::Analyze(a) => cmd_analyze(&a).map(|_| ()),
    }
}

fn now_text() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn version_text() -> String {
    format!("simst {}", env!("CARGO_PKG_VERSION"))
}

fn manifest(command: &str, config_path: Option<&Path>, resolved: String, seeds: Vec<u64>, out: &Path, started: String) -> RunManifest {
    RunManifest {
        command: command.to_owned(),
        config_path: config_path.map(Path::to_path_buf),
        resolved_config: resolved,
        seeds,
        version: version_text(),
        output_dir: out.to_path_buf(),
        started,
        finished: now_text(),
    }
}

fn load_config(path: Option<&Path>) -> Result<(RunConfig, Vec<String>)> {
    match path {
        None => Ok((RunConfig::default(), Vec::new())),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let keys = crate::config::parse_kv(&text)?.into_keys().collect();
            let cfg = RunConfig::from_text(&text).with_context(|| format!("in {}", p.display()))?;
            Ok((cfg, keys))
        }
    }
}

fn apply(cfg: &mut RunConfig, key: &str, value: Option<String>) -> Result<()> {
    match value {
        Some(v) => cfg.set(key, &v),
        None => Ok(()),
    }
}

pub fn cmd_preprocess(a: &PreprocessArgs) -> Result<PreparedDataset> {
    let started = now_text();
    let (mut cfg, _) = load_config(a.config.as_deref())?;
    apply(&mut cfg, "k", a.k.map(|v| v.to_string()))?;
    apply(&mut cfg, "threshold", a.threshold.map(|v| v.to_string()))?;
    apply(&mut cfg, "t_h", a.t_h.map(|v| v.to_string()))?;
    apply(&mut cfg, "t_f", a.t_f.map(|v| v.to_string()))?;
    apply(&mut cfg, "split", a.split.clone())?;
    if a.day_of_week {
        cfg.dataset.include_day_of_week = true;
    }

    let readings = formats::read_readings(&a.readings)?;
    let edges = formats::read_distances(&a.distances, &readings.sensors)?;
    let coords = a
        .coords
        .as_deref()
        .map(|p| formats::read_coords(p, &readings.sensors))
        .transpose()?;
    let n = readings.sensors.len();
    let graph = build_adjacency(&edges, n, cfg.threshold).with_context(|| format!("building graph from {}", a.distances.display()))?;

    let start = Instant::now();
    let data = build_windowed_dataset(&readings.series, &graph, &cfg.dataset)?;
    let construction = start.elapsed().as_secs_f64();
    let ts = &readings.series.timestamps;
    let prepared = PreparedDataset {
        sensors: readings.sensors.clone(),
        series: readings.series.readings.clone(),
        start: ts[0],
        step: if ts.len() > 1 { ts[1] - ts[0] } else { 300 },
        threshold: cfg.threshold,
        num_edges: graph.num_edges(),
        coords,
        data,
    };
    store::write_dataset(&a.out, &prepared)?;
    manifest("preprocess", a.config.as_deref(), cfg.to_text(), Vec::new(), &a.out, started).write(&a.out)?;
    eprintln!(
        "{} sensors, {} edges, ego width {}, {}/{}/{} instances; ego construction {:.3}s",
        n,
        prepared.num_edges,
        ego_width(cfg.dataset.k),
        prepared.data.train.len(),
        prepared.data.val.len(),
        prepared.data.test.len(),
        construction
    );
    Ok(prepared)
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub epochs_run: usize,
    pub test: MetricsReport,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

struct LogObserver<'a> {
    clock: Instant,
    file: fs::File,
    deterministic: bool,
    quiet: bool,
    seed: u64,
    err: &'a mut Option<std::io::Error>,
}

impl FitObserver for LogObserver<'_> {
    fn now(&mut self) -> f64 {
        self.clock.elapsed().as_secs_f64()
    }

    fn on_epoch(&mut self, r: &EpochRecord) {
        if let Err(e) = writeln!(self.file, "{}", store::log_line(r, self.deterministic)) {
            self.err.get_or_insert(e);
        }
        if !self.quiet {
            let val = r.val.as_ref().map(|v| format!("{:.4}", v.mae)).unwrap_or_else(|| "-".into());
            eprintln!("seed {} epoch {:>3} loss {:.4} val mae {} ({:.1}s)", self.seed, r.epoch, r.train_loss, val, r.seconds);
        }
    }
}

/// Resolves the run configuration for a dataset; dataset-shaping keys set
/// in the file must agree with how the dataset was built.
pub fn train_config(a: &TrainArgs, prepared: &PreparedDataset) -> Result<RunConfig> {
    let (mut cfg, keys) = load_config(a.config.as_deref())?;
    let d = &prepared.data.config;
    for key in keys {
        let clash = match key.as_str() {
            "t_h" => cfg.dataset.t_h != d.t_h,
            "t_f" => cfg.dataset.t_f != d.t_f,
            "k" => cfg.dataset.k != d.k,
            "day_of_week" => cfg.dataset.include_day_of_week != d.include_day_of_week,
            "split" => cfg.dataset.split != d.split,
            "threshold" => cfg.threshold != prepared.threshold,
            _ => false,
        };
        if clash {
            return Err(config_err(format!("{key} in the config file disagrees with the preprocessed dataset")));
        }
    }
    cfg.dataset = d.clone();
    cfg.threshold = prepared.threshold;
    apply(&mut cfg, "encoder", a.encoder.clone())?;
    apply(&mut cfg, "seeds", a.seeds.clone())?;
    apply(&mut cfg, "seeds", a.seed.map(|s| s.to_string()))?;
    apply(&mut cfg, "max_epochs", a.epochs.map(|v| v.to_string()))?;
    apply(&mut cfg, "patience", a.patience.map(|v| v.to_string()))?;
    apply(&mut cfg, "batch_size", a.batch_size.map(|v| v.to_string()))?;
    apply(&mut cfg, "lr", a.lr.map(|v| v.to_string()))?;
    apply(&mut cfg, "weight_decay", a.weight_decay.map(|v| v.to_string()))?;
    apply(&mut cfg, "d_m", a.d_m.map(|v| v.to_string()))?;
    apply(&mut cfg, "d_n", a.d_n.map(|v| v.to_string()))?;
    apply(&mut cfg, "layers", a.layers.map(|v| v.to_string()))?;
    apply(&mut cfg, "dropout", a.dropout.map(|v| v.to_string()))?;
    cfg.ablate_cl |= a.ablate_cl;
    cfg.ablate_pm |= a.ablate_pm;
    cfg.deterministic |= a.deterministic;
    if cfg.train.patience > cfg.train.max_epochs {
        cfg.train.patience = cfg.train.max_epochs;
    }
    if cfg.train.seeds.is_empty() {
        return Err(config_err("at least one seed is required"));
    }
    cfg.train.validate()?;
    cfg.model_config(prepared.data.num_nodes).validate()?;
    Ok(cfg)
}

fn file_tag(seed: u64) -> String {
    format!("seed{seed}")
}

pub fn cmd_train(a: &TrainArgs) -> Result<Vec<SeedRun>> {
    let started = now_text();
    let prepared = store::read_dataset(&a.data)?;
    let cfg = train_config(a, &prepared)?;
    let data = &prepared.data;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mcfg = cfg.model_config(data.num_nodes);
    let mut runs = Vec::new();
    for &seed in &cfg.train.seeds {
        let (model, mut params) = simst_core::model::SimSt::new(mcfg.clone(), seed)?;
        let log = a.out.join(format!("train_log_{}.csv", file_tag(seed)));
        let mut file = fs::File::create(&log).with_context(|| format!("creating {}", log.display()))?;
        writeln!(file, "{LOG_HEADER}")?;
        let mut io_err = None;
        let mut obs = LogObserver {
            clock: Instant::now(),
            file,
            deterministic: cfg.deterministic,
            quiet: a.quiet,
            seed,
            err: &mut io_err,
        };
        let result = fit(&model, &mut params, data, &cfg.train, seed, &mut obs)
            .with_context(|| format!("training seed {seed}"))?;
        obs.file.flush()?;
        if let Some(e) = io_err {
            return Err(e).with_context(|| format!("writing {}", log.display()));
        }
        let test = evaluate(&model, &params, data, Split::Test, &cfg.train)?;
        let ckpt = Checkpoint {
            model: mcfg.clone(),
            stats: data.stats,
            seed,
            sensors: prepared.sensors.clone(),
            params,
        };
        let path = a.out.join(format!("checkpoint_{}.bin", file_tag(seed)));
        store::save_checkpoint(&path, &ckpt)?;
        fs::write(a.out.join(format!("test_metrics_{}.csv", file_tag(seed))), metrics_csv(&test))?;
        if !a.quiet {
            eprintln!(
                "seed {seed}: best epoch {} val mae {:.4}; test mae {:.4} rmse {:.4} mape {:.2}%",
                result.best_epoch, result.best_val_mae, test.mae, test.rmse, test.mape
            );
        }
        runs.push(SeedRun {
            seed,
            best_epoch: result.best_epoch,
            best_val_mae: result.best_val_mae,
            epochs_run: result.state.history.len(),
            test,
            checkpoint: path,
            log,
        });
    }
    let reports: Vec<&MetricsReport> = runs.iter().map(|r| &r.test).collect();
    fs::write(a.out.join("test_metrics.csv"), aggregate_csv(&reports))?;
    manifest("train", a.config.as_deref(), cfg.to_text(), cfg.train.seeds.clone(), &a.out, started).write(&a.out)?;
    Ok(runs)
}

/// `metric,horizon,value`; horizons are 1-based and `all` is the mean.
pub fn metrics_csv(r: &MetricsReport) -> String {
    let mut s = String::from("metric,horizon,value\n");
    for (name, pick) in [
        ("mae", (|h: &simst_core::metrics::HorizonMetrics| h.mae) as fn(&_) -> f64),
        ("rmse", |h| h.rmse),
        ("mape", |h| h.mape),
    ] {
        for (i, h) in r.horizons.iter().enumerate() {
            s.push_str(&format!("{name},{},{:?}\n", i + 1, pick(h)));
        }
    }
    s.push_str(&format!("mae,all,{:?}\nrmse,all,{:?}\nmape,all,{:?}\n", r.mae, r.rmse, r.mape));
    s
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// `metric,horizon,mean,std` across seeds (population std).
pub fn aggregate_csv(reports: &[&MetricsReport]) -> String {
    let mut s = String::from("metric,horizon,mean,std\n");
    if reports.is_empty() {
        return s;
    }
    let horizons = reports[0].horizons.len();
    type Pick = fn(&MetricsReport, Option<usize>) -> f64;
    let picks: [(&str, Pick); 3] = [
        ("mae", |r, h| h.map_or(r.mae, |h| r.horizons[h].mae)),
        ("rmse", |r, h| h.map_or(r.rmse, |h| r.horizons[h].rmse)),
        ("mape", |r, h| h.map_or(r.mape, |h| r.horizons[h].mape)),
    ];
    for (name, pick) in picks {
        for h in (0..horizons).map(Some).chain([None]) {
            let xs: Vec<f64> = reports.iter().map(|r| pick(r, h)).collect();
            let (m, sd) = mean_std(&xs);
            let label = h.map_or("all".to_owned(), |h| (h + 1).to_string());
            s.push_str(&format!("{name},{label},{m:?},{sd:?}\n"));
        }
    }
    s
}

/// Historical-average metrics on a split, fitted on the training range.
pub fn ha_report(p: &PreparedDataset, split: Split, weekly: bool, mape_epsilon: f64) -> Result<MetricsReport> {
    let d = &p.data;
    let ts = p.timestamps();
    let train = d.ranges[0].clone();
    let n = d.num_nodes;
    let mut cols = Vec::with_capacity(n * train.len());
    for v in 0..n {
        cols.extend_from_slice(&p.series.row(v)[train.clone()]);
    }
    let ha = HistoricalAverage::fit(&Tensor::new(vec![n, train.len()], cols)?, &ts[train], weekly)?;
    let s = d.split(split);
    let (t_h, t_f) = (d.config.t_h, d.config.t_f);
    let mut acc = MetricsAccumulator::new(t_f, mape_epsilon * d.stats.std);
    let mut preds = Vec::with_capacity(t_f);
    for i in 0..s.len() {
        preds.clear();
        let (v, t0) = (s.nodes[i], s.starts[i]);
        preds.extend((0..t_f).map(|h| ha.predict(v, ts[t0 + t_h + h])));
        acc.push(&preds, &s.targets[i * t_f..(i + 1) * t_f])?;
    }
    Ok(acc.finish()?)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<MetricsReport> {
    let prepared = store::read_dataset(&a.data)?;
    let split = Split::from(a.split);
    let report = match &a.checkpoint {
        None => ha_report(&prepared, split, a.weekly, a.mape_epsilon)?,
        Some(path) => {
            let ckpt = store::load_checkpoint(path)?;
            ckpt.check_dataset(&prepared.data)?;
            let (model, params) = ckpt.instantiate()?;
            let tcfg = simst_core::trainer::TrainConfig {
                mape_epsilon: a.mape_epsilon,
                ..Default::default()
            };
            evaluate(&model, &params, &prepared.data, split, &tcfg)?
        }
    };
    if let Some(out) = &a.out {
        fs::write(out, metrics_csv(&report)).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(report)
}

pub fn cmd_bench(a: &BenchArgs) -> Result<BenchResult> {
    let ckpt = store::load_checkpoint(&a.checkpoint)?;
    let prepared = store::read_dataset(&a.data)?;
    ckpt.check_dataset(&prepared.data)?;
    let (model, params) = ckpt.instantiate()?;
    let data = &prepared.data;
    let n = data.val.len();
    let batches: Vec<_> = simst_core::dataset::sequential_batches(n, a.batch_size)
        .map(|r| data.batch(Split::Val, &r.collect::<Vec<_>>()))
        .collect::<simst_core::Result<_>>()?;
    let result = measure_tps(
        &format!("simst-{}", ckpt.model.encoder),
        data.num_nodes,
        n,
        a.batch_size,
        a.warmup,
        a.repeats,
        |r| {
            let b = &batches[r.start / a.batch_size];
            model.infer(&params, &b.x, &b.nodes)?;
            Ok(())
        },
    )?;
    if let Some(out) = &a.out {
        fs::write(out, format!("{BENCH_HEADER}\n{}\n", result.csv_row())).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(result)
}

fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| config_err(format!("bad size {x:?}"))))
        .collect()
}

pub fn cmd_scale_study(a: &ScaleArgs) -> Result<Vec<ScalePoint>> {
    let cfg = ScaleConfig {
        sizes: parse_sizes(&a.sizes)?,
        degree: a.degree,
        d_m: a.d_m,
        t_h: a.t_h,
        repeats: a.repeats,
        seed: a.seed,
        ..ScaleConfig::default()
    };
    let points = scaling_study(&cfg)?;
    let f = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_scale_csv(f, &points)?;
    Ok(points)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let started = now_text();
    let profile: Profile = a.profile.parse().map_err(|e: anyhow::Error| config_err(e.to_string()))?;
    let cfg = SynthConfig {
        profile,
        num_sensors: a.sensors,
        days: a.days,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let data = synth::generate(&cfg).map_err(|e| config_err(e.to_string()))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let sensors: Vec<String> = (0..a.sensors).map(|i| i.to_string()).collect();
    formats::write_readings(fs::File::create(a.out.join("readings.csv"))?, &sensors, &data.series)?;
    formats::write_distances(fs::File::create(a.out.join("distances.csv"))?, &sensors, &data.distances)?;
    let coords = data.series.coords.as_ref().expect("generator emits coordinates");
    formats::write_coords(fs::File::create(a.out.join("coords.csv"))?, &sensors, coords)?;
    let resolved = format!(
        "profile = {}\nsensors = {}\ndays = {}\nseed = {}\n",
        a.profile, a.sensors, a.days, a.seed
    );
    manifest("synth", None, resolved, vec![a.seed], &a.out, started).write(&a.out)?;
    Ok(())
}

/// Loads the embedding table of a checkpoint and pairs it with coordinates.
pub fn similarity_study(ckpt: &Checkpoint, coords_path: &Path) -> Result<SimilarityStudy> {
    if ckpt.model.ablate_cl {
        return Err(config_err("checkpoint was trained without sensor embeddings"));
    }
    let (model, params) = ckpt.instantiate()?;
    let table = model
        .embedding_table(&params)
        .ok_or_else(|| config_err("checkpoint has no sensor embedding"))?;
    let coords = formats::read_coords(coords_path, &ckpt.sensors)?;
    Ok(SimilarityStudy::new(table, &coords)?)
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<SimilarityStudy> {
    let started = now_text();
    let ckpt = store::load_checkpoint(&a.checkpoint)?;
    if !a.coords.exists() {
        return Err(data_err(format!(
            "coordinates file {} does not exist; the analysis needs sensor coordinates",
            a.coords.display()
        )));
    }
    let study = similarity_study(&ckpt, &a.coords)?;
    let top = study.top_similar(a.anchor, a.top)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let mut s = String::from("lo_km,hi_km,count,mean_cos\n");
    for b in &study.buckets {
        let mean = b.mean_cos.map(|m| format!("{m:?}")).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", b.lo_km, b.hi_km, b.count, mean));
    }
    fs::write(a.out.join("similarity_buckets.csv"), s)?;

    let mut s = String::from("anchor,rank,sensor,cos,km\n");
    for (rank, t) in top.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{:?},{:?}\n",
            ckpt.sensors[a.anchor],
            rank + 1,
            ckpt.sensors[t.sensor],
            t.cos,
            t.km
        ));
    }
    fs::write(a.out.join("top_similar.csv"), s)?;

    match distance_decay_check(&study, 0.05, a.permutations, ckpt.seed) {
        Ok(check) => eprintln!(
            "bucket means {:.4?}; non-increasing {}; mantel r = {:.4}, p = {:.4}",
            check.means, check.non_increasing, check.mantel_r, check.p_value
        ),
        Err(simst_core::Error::Empty(what)) => eprintln!("decay check skipped: {what} is empty"),
        Err(e) => return Err(e.into()),
    }
    let resolved = format!(
        "checkpoint = {}\ncoords = {}\nanchor = {}\ntop = {}\npermutations = {}\n",
        a.checkpoint.display(),
        a.coords.display(),
        a.anchor,
        a.top,
        a.permutations
    );
    manifest("analyze", None, resolved, vec![ckpt.seed], &a.out, started).write(&a.out)?;
    Ok(study)
}
