//! Acceptance suite: one PASS/FAIL line per criterion, run sequentially so
//! that the timing criteria are not disturbed by concurrent training.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use simst::bench::{scaling_study, ScaleConfig};
use simst::cli::{cmd_preprocess, cmd_synth, cmd_train, ha_report, similarity_study, PreprocessArgs, SeedRun, SynthArgs, TrainArgs};
use simst::store::load_checkpoint;
use simst_core::analysis::{distance_decay_check, DecayCheck, SimilarityStudy};
use simst_core::dataset::{node_batch_iter, BatchSpec, Split, ZScore};
use simst_core::gradcheck::{finite_difference_check, FdConfig};
use simst_core::graph::{build_ego_features, ego_width, normalize_adjacency, select_topk_neighbors, SensorGraph};
use simst_core::metrics::metrics;
use simst_core::model::{EncoderKind, ModelConfig, SimSt};
use simst_core::rng::{stream, substream, Stream};
use simst_core::trainer::mae_loss;
use simst_core::{Tape, Tensor};
use tempfile::TempDir;

const KINDS: [EncoderKind; 3] = [EncoderKind::Gru, EncoderKind::Tcn, EncoderKind::CausalTransformer];
const SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: usize = 20;
const LARGE_BATCH: usize = 19_648;
const DECAY_PERMUTATIONS: usize = 2000;
const ALPHA: f64 = 0.05;
const NULL_DRAWS: u64 = 200;

type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median3(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn fmt(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = stream(seed, Stream::Probe);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn reduced(kind: EncoderKind) -> ModelConfig {
    ModelConfig {
        d_m: 16,
        predictor_dim: 64,
        tcn_skip_dim: 16,
        ct_ffn_dim: 32,
        t_h: 12,
        ..ModelConfig::defaults(kind, 10)
    }
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for kind in KINDS {
        for seed in 0..5u64 {
            let cfg = reduced(kind);
            let (model, mut store) = SimSt::new(cfg.clone(), seed).unwrap();
            let b = 3;
            let x = random_tensor(&[cfg.t_h * b, cfg.input_width()], -2.0, 2.0, 100 + seed);
            let nodes: Vec<usize> = (0..b).map(|i| (i * 3 + seed as usize) % cfg.num_nodes).collect();
            let y = random_tensor(&[b, cfg.t_f], 0.0, 60.0, 200 + seed);
            let stats = ZScore { mean: 30.0, std: 12.0 };
            let report = finite_difference_check(
                &mut store,
                |tape, s| {
                    let mut drop = substream(seed, Stream::Dropout, 0);
                    let out = model.forward(tape, s, &x, &nodes, Some(&mut drop))?;
                    mae_loss(tape, out.prediction, &y, &stats)
                },
                &FdConfig { coords_per_param: 64, seed, ..FdConfig::default() },
            )
            .unwrap();
            worst = worst.max(report.max_rel_error);
            coords += report.coords_checked;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-4 && secs < 120.0,
        format!("max rel error {worst:.2e} over {coords} coordinates, 3 encoders x 5 seeds, {secs:.1}s"),
    )
}

fn causality() -> Outcome {
    let mut probes = 0;
    let mut rows = 0;
    for kind in [EncoderKind::Tcn, EncoderKind::CausalTransformer] {
        let cfg = ModelConfig::defaults(kind, 10);
        let (model, store) = SimSt::new(cfg.clone(), 7).unwrap();
        let mut rng = stream(8, Stream::Probe);
        let (b, w) = (2, cfg.input_width());
        for probe in 0..100u64 {
            let x = random_tensor(&[cfg.t_h * b, w], -2.0, 2.0, 1000 + probe);
            let nodes = [probe as usize % 10, (probe as usize + 3) % 10];
            let cut = rng.gen_range(0..cfg.t_h - 1);
            let mut y = x.clone();
            for v in &mut y.data_mut()[(cut + 1) * b * w..] {
                *v += rng.gen_range(-3.0..3.0);
            }
            let mut ta = Tape::new();
            let oa = model.forward(&mut ta, &store, &x, &nodes, None).unwrap();
            let mut tb = Tape::new();
            let ob = model.forward(&mut tb, &store, &y, &nodes, None).unwrap();
            for (sa, sb) in oa.encoder.sequences.iter().zip(&ob.encoder.sequences) {
                let (va, vb) = (ta.value(*sa), tb.value(*sb));
                for r in 0..(cut + 1) * b {
                    if va.row(r) != vb.row(r) {
                        return Err(format!("{kind} probe {probe}: step row {r} changed (cut {cut})"));
                    }
                    rows += 1;
                }
            }
            probes += 1;
        }
    }
    Ok(format!("{probes} probes over TCN and CT, {rows} past rows bit-identical"))
}

fn dense_normalized(a: &Tensor) -> Vec<Vec<f64>> {
    let n = a.rows();
    let aug: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| a.at(i, j) + if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        d[i][i] = 1.0 / aug[i].iter().sum::<f64>().sqrt();
    }
    let mm = |p: &[Vec<f64>], q: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|k| p[i][k] * q[k][j]).sum()).collect())
            .collect()
    };
    mm(&mm(&d, &aug), &d)
}

fn brute_ego(a: &Tensor, hist: &Tensor, k: usize, v: usize) -> Vec<Vec<f64>> {
    let n = a.rows();
    let ranked = |norm: Vec<Vec<f64>>| {
        let mut ids: Vec<usize> = (0..n).filter(|&u| u != v && norm[v][u] > 0.0).collect();
        ids.sort_by(|&p, &q| norm[v][q].partial_cmp(&norm[v][p]).unwrap().then(p.cmp(&q)));
        ids
    };
    let at = Tensor::new(vec![n, n], (0..n * n).map(|i| a.at(i % n, i / n)).collect()).unwrap();
    let lists = [ranked(dense_normalized(a)), ranked(dense_normalized(&at))];
    (0..hist.cols())
        .map(|t| {
            let mut row = vec![hist.at(v, t)];
            for list in &lists {
                row.extend((0..k).map(|i| list.get(i).map_or(0.0, |&u| hist.at(u, t))));
            }
            for list in &lists {
                let sum: f64 = list.iter().map(|&u| hist.at(u, t)).sum();
                row.push(if list.is_empty() { 0.0 } else { sum / list.len() as f64 });
            }
            row
        })
        .collect()
}

fn ego_contract() -> Outcome {
    let three = Tensor::from_rows(&[[0.0, 0.9, 0.2], [0.0, 0.0, 0.0], [0.0, 0.5, 0.0]]).unwrap();
    let five = Tensor::from_rows(&[
        [0.0, 0.8, 0.0, 0.3, 0.0],
        [0.8, 0.0, 0.6, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.7, 0.7],
        [0.1, 0.0, 0.4, 0.0, 0.9],
        [0.0, 0.0, 0.0, 0.0, 0.0],
    ])
    .unwrap();
    let mut checked = 0;
    for a in [three, five] {
        let n = a.rows();
        let hist = Tensor::new(vec![n, 4], (0..4 * n).map(|x| f64::from(x as u32) * 1.5 - 4.0).collect()).unwrap();
        let graph = SensorGraph::from_adjacency(a.clone()).unwrap();
        for k in 0..=3 {
            if ego_width(k) != 2 * k + 3 {
                return Err(format!("ego_width({k}) = {}", ego_width(k)));
            }
            let topk = select_topk_neighbors(&graph, k);
            for v in 0..n {
                let ego = build_ego_features(&hist, &graph, &topk, v).unwrap();
                if ego.shape() != [4, 2 * k + 3] {
                    return Err(format!("{n}-node graph, k {k}: shape {:?}", ego.shape()));
                }
                for (t, row) in brute_ego(&a, &hist, k, v).iter().enumerate() {
                    if ego.row(t) != row.as_slice() {
                        return Err(format!("{n}-node graph, k {k}, node {v}, step {t}: {:?} vs {row:?}", ego.row(t)));
                    }
                }
                checked += 1;
            }
        }
    }
    Ok(format!("width 2k+3 for k in 0..=3; {checked} (graph, k, node) cases match brute force exactly"))
}

fn normalization_oracle() -> Outcome {
    let mut rng = stream(11, Stream::Probe);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=10);
        let density: f64 = rng.gen();
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.gen::<f64>() < density {
                    a.data_mut()[i * n + j] = rng.gen_range(0.05..1.0);
                }
            }
        }
        let fast = normalize_adjacency(&a).unwrap();
        let slow = dense_normalized(&a);
        for (i, row) in slow.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                worst = worst.max((fast.at(i, j) - x).abs());
            }
        }
    }
    verdict(worst <= 1e-12, format!("100 graphs, max abs deviation {worst:.1e}"))
}

fn sampler_coverage() -> Outcome {
    let len = 10_007;
    let spec = BatchSpec::new(1024, 99).unwrap();
    for epoch in 0..10 {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for idx in node_batch_iter(len, &spec, epoch).flatten() {
            *counts.entry(idx).or_default() += 1;
        }
        if counts.len() != len || counts.iter().any(|(i, c)| *i >= len || *c != 1) {
            return Err(format!("epoch {epoch} is not a permutation of the instances"));
        }
    }
    // The same batch size over datasets with different sensor counts.
    for sensors in [7usize, 20, 307] {
        let n = sensors * 100;
        let sizes: Vec<usize> = node_batch_iter(n, &spec, 0).map(|b| b.len()).collect();
        if sizes[0] != 1024.min(n) || sizes.iter().sum::<usize>() != n {
            return Err(format!("{sensors} sensors: batch sizes {sizes:?}"));
        }
    }
    Ok("10 epochs x 10,007 instances each covered exactly once; B=1024 holds for 7, 20 and 307 sensors".into())
}

fn metrics_oracle() -> Outcome {
    let fixture = metrics(&[3.0, 3.0], &[2.0, 4.0], 1, 1e-3).unwrap();
    if (fixture.mae, fixture.rmse, fixture.mape) != (1.0, 1.0, 37.5) {
        return Err(format!("fixture gave ({}, {}, {})", fixture.mae, fixture.rmse, fixture.mape));
    }
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = stream(seed, Stream::Probe);
        let (rows, h) = (rng.gen_range(1..50), rng.gen_range(1..13));
        let y: Vec<f64> = (0..rows * h).map(|_| rng.gen_range(5.0..80.0)).collect();
        let p: Vec<f64> = y.iter().map(|v| v + rng.gen_range(-5.0..5.0)).collect();
        let r = metrics(&p, &y, h, 1e-3).unwrap();
        let (mut mae, mut rmse, mut mape) = (0.0, 0.0, 0.0);
        for c in 0..h {
            let e: Vec<(f64, f64)> = (0..rows).map(|i| (p[i * h + c] - y[i * h + c], y[i * h + c])).collect();
            mae += e.iter().map(|(d, _)| d.abs()).sum::<f64>() / rows as f64;
            rmse += (e.iter().map(|(d, _)| d * d).sum::<f64>() / rows as f64).sqrt();
            mape += 100.0 * e.iter().map(|(d, t)| (d / t).abs()).sum::<f64>() / rows as f64;
        }
        let k = h as f64;
        worst = worst
            .max((r.mae - mae / k).abs())
            .max((r.rmse - rmse / k).abs())
            .max((r.mape - mape / k).abs() / (mape / k).max(1.0));
    }
    verdict(worst <= 1e-12, format!("fixture (1, 1, 37.5%); 100 random arrays, max deviation {worst:.1e}"))
}

fn complexity_scaling() -> Outcome {
    let start = Instant::now();
    let points = scaling_study(&ScaleConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let get = |system: &str, n: usize| points.iter().find(|p| p.system == system && p.num_nodes == n).unwrap().clone();
    let simst_ratio = get("simst", 400).per_sample_us / get("simst", 100).per_sample_us;
    let gcn_ratio = get("gcn-adaptive", 400).total_us / get("gcn-adaptive", 100).total_us;
    verdict(
        simst_ratio < 2.0 && gcn_ratio >= 4.0 && secs < 300.0,
        format!("SimST per-sample 400/100 = {simst_ratio:.2}; adaptive GCN total 400/100 = {gcn_ratio:.2}; {secs:.1}s"),
    )
}

struct Variant {
    runs: Vec<SeedRun>,
    seconds: Vec<f64>,
}

/// Synthetic task shared by the training criteria.
struct Lab {
    tmp: TempDir,
    synth: PathBuf,
    data: PathBuf,
    ha_test_mae: f64,
    variants: BTreeMap<&'static str, Variant>,
}

impl Lab {
    fn new() -> Lab {
        let tmp = TempDir::new().unwrap();
        let synth = tmp.path().join("synth");
        cmd_synth(&SynthArgs {
            profile: "coupled-sine".into(),
            out: synth.clone(),
            sensors: 20,
            days: 14,
            seed: 0,
        })
        .unwrap();
        let data = tmp.path().join("data");
        let prepared = cmd_preprocess(&PreprocessArgs {
            readings: synth.join("readings.csv"),
            distances: synth.join("distances.csv"),
            coords: Some(synth.join("coords.csv")),
            config: None,
            out: data.clone(),
            k: None,
            threshold: None,
            t_h: None,
            t_f: None,
            split: Some("0.6,0.2,0.2".into()),
            day_of_week: false,
        })
        .unwrap();
        let ha_test_mae = ha_report(&prepared, Split::Test, false, 1e-3).unwrap().mae;
        Lab { tmp, synth, data, ha_test_mae, variants: BTreeMap::new() }
    }

    fn args(&self, out: &Path, seed: u64) -> TrainArgs {
        TrainArgs {
            data: self.data.clone(),
            out: out.to_path_buf(),
            config: None,
            encoder: Some("gru".into()),
            seeds: None,
            seed: Some(seed),
            epochs: Some(EPOCHS),
            patience: None,
            batch_size: None,
            lr: None,
            weight_decay: None,
            d_m: Some(32),
            d_n: None,
            layers: None,
            dropout: None,
            ablate_cl: false,
            ablate_pm: false,
            deterministic: true,
            quiet: true,
        }
    }

    fn variant(&mut self, name: &'static str) -> &Variant {
        if !self.variants.contains_key(name) {
            let mut v = Variant { runs: Vec::new(), seconds: Vec::new() };
            for seed in SEEDS {
                let out = self.tmp.path().join(name).join(format!("seed{seed}"));
                let mut a = self.args(&out, seed);
                match name {
                    "nocl" => a.ablate_cl = true,
                    "nopm" => a.ablate_pm = true,
                    "large" => a.batch_size = Some(LARGE_BATCH),
                    _ => {}
                }
                let start = Instant::now();
                v.runs.extend(cmd_train(&a).unwrap());
                v.seconds.push(start.elapsed().as_secs_f64());
            }
            self.variants.insert(name, v);
        }
        &self.variants[name]
    }
}

fn test_maes(v: &Variant) -> Vec<f64> {
    v.runs.iter().map(|r| r.test.mae).collect()
}

fn learnability(lab: &mut Lab) -> Outcome {
    let ha = lab.ha_test_mae;
    let full = lab.variant("full");
    let ratios: Vec<f64> = test_maes(full).iter().map(|m| m / ha).collect();
    let epochs: Vec<usize> = full.runs.iter().map(|r| r.epochs_run).collect();
    let slowest = full.seconds.iter().copied().fold(0.0, f64::max);
    verdict(
        ratios.iter().all(|r| *r <= 0.7) && epochs.iter().all(|e| *e <= 50) && slowest < 600.0,
        format!(
            "HA test MAE {ha:.3}; SimST-GRU test MAE {} (ratio {}), epochs {epochs:?}, slowest seed {slowest:.0}s",
            fmt(&test_maes(full)),
            fmt(&ratios)
        ),
    )
}

fn ablation(lab: &mut Lab) -> Outcome {
    let full = test_maes(lab.variant("full"));
    let nopm = test_maes(lab.variant("nopm"));
    let nocl = test_maes(lab.variant("nocl"));
    let (f, p, c) = (median3(full.clone()), median3(nopm.clone()), median3(nocl.clone()));
    verdict(
        f < p && f < c,
        format!(
            "median test MAE full {f:.3} {}, ablate_pm {p:.3} {}, ablate_cl {c:.3} {}",
            fmt(&full),
            fmt(&nopm),
            fmt(&nocl)
        ),
    )
}

fn batch_size_effect(lab: &mut Lab) -> Outcome {
    let val = |v: &Variant| v.runs.iter().map(|r| r.best_val_mae).collect::<Vec<_>>();
    let small = val(lab.variant("full"));
    let large = val(lab.variant("large"));
    let (s, l) = (median3(small.clone()), median3(large.clone()));
    verdict(
        s <= l,
        format!("median val MAE B=1024 {s:.3} {}, B={LARGE_BATCH} {l:.3} {}", fmt(&small), fmt(&large)),
    )
}

fn describe(c: &DecayCheck) -> String {
    format!(
        "means [{:.3}, {:.3}, {:.3}] r={:.3} p={:.4}",
        c.means[0], c.means[1], c.means[2], c.mantel_r, c.p_value
    )
}

fn untrained_check(model: &ModelConfig, seed: u64, positions: &[(f64, f64)]) -> DecayCheck {
    let (m, params) = SimSt::new(model.clone(), seed).unwrap();
    let study = SimilarityStudy::new(m.embedding_table(&params).unwrap(), positions).unwrap();
    distance_decay_check(&study, ALPHA, DECAY_PERMUTATIONS, seed).unwrap()
}

fn embedding_geography(lab: &mut Lab) -> Outcome {
    let coords = lab.synth.join("coords.csv");
    let mut lines = Vec::new();
    let mut trained_ok = true;
    let mut model = None;
    let mut positions = Vec::new();
    for run in &lab.variant("full").runs.clone() {
        let ckpt = load_checkpoint(&run.checkpoint).unwrap();
        let trained = distance_decay_check(&similarity_study(&ckpt, &coords).unwrap(), ALPHA, DECAY_PERMUTATIONS, ckpt.seed).unwrap();
        positions = simst::formats::read_coords(&coords, &ckpt.sensors).unwrap();
        let untrained = untrained_check(&ckpt.model, ckpt.seed, &positions);
        trained_ok &= trained.passed;
        lines.push(format!(
            "seed {}: trained {} {}, its init {} {}",
            run.seed,
            describe(&trained),
            if trained.passed { "passes" } else { "fails" },
            describe(&untrained),
            if untrained.passed { "passes" } else { "fails" }
        ));
        model = Some(ckpt.model);
    }
    // Null control: how often independent untrained tables pass.
    let model = model.unwrap();
    let false_passes = (0..NULL_DRAWS).filter(|&s| untrained_check(&model, 10_000 + s, &positions).passed).count();
    let rate = false_passes as f64 / NULL_DRAWS as f64;
    lines.push(format!("untrained pass rate {false_passes}/{NULL_DRAWS} = {rate:.3} (alpha {ALPHA})"));
    verdict(trained_ok && rate <= ALPHA, lines.join(" | "))
}

fn determinism(lab: &mut Lab) -> Outcome {
    let run = |name: &str| {
        let out = lab.tmp.path().join(name);
        let a = TrainArgs { epochs: Some(2), ..lab.args(&out, 5) };
        cmd_train(&a).unwrap();
        out
    };
    let (a, b) = (run("det_a"), run("det_b"));
    for f in ["checkpoint_seed5.bin", "train_log_seed5.csv", "test_metrics_seed5.csv"] {
        if fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap() {
            return Err(format!("{f} differs between identical runs"));
        }
    }
    let bytes = fs::metadata(a.join("checkpoint_seed5.bin")).unwrap().len();
    Ok(format!("two 2-epoch runs with seed 5: checkpoint ({bytes} bytes), log and metrics bit-identical"))
}

fn main() {
    let mut results = Vec::new();
    let mut run = |n: usize, title: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {tag} {title}: {detail} ({:.1}s)", start.elapsed().as_secs_f64());
        results.push(outcome.is_ok());
    };

    run(1, "gradient oracle", &mut gradient_oracle);
    run(2, "causality", &mut causality);
    run(3, "ego-graph contract", &mut ego_contract);
    run(4, "normalization oracle", &mut normalization_oracle);
    run(5, "sampler coverage", &mut sampler_coverage);
    run(6, "metrics oracle", &mut metrics_oracle);
    run(9, "complexity scaling", &mut complexity_scaling);
    let mut lab = Lab::new();
    run(7, "synthetic learnability", &mut || learnability(&mut lab));
    run(8, "ablation directionality", &mut || ablation(&mut lab));
    run(10, "batch-size effect", &mut || batch_size_effect(&mut lab));
    run(11, "embedding geography", &mut || embedding_geography(&mut lab));
    run(12, "determinism", &mut || determinism(&mut lab));

    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
