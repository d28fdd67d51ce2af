use proptest::prelude::*;
use rand::Rng;
use simst_core::dataset::{build_windowed_dataset, chronological_split, DatasetConfig, RawSeries, Split, WindowedDataset};
use simst_core::graph::SensorGraph;
use simst_core::model::{EncoderKind, ModelConfig, SimSt};
use simst_core::rng::{stream, Stream};
use simst_core::trainer::{fit, mae_loss, train_epoch, TrainConfig, TrainState};
use simst_core::{Tape, Tensor};

const STEP: i64 = 300;

fn sines(n: usize, steps: usize, amplitude: f64, seed: u64) -> RawSeries {
    let mut rng = stream(seed, Stream::Probe);
    let mut data = Vec::with_capacity(n * steps);
    for v in 0..n {
        let phase = v as f64 * 0.7;
        for t in 0..steps {
            let x = 50.0 + amplitude * (t as f64 * 0.05 + phase).sin() + rng.gen_range(-1.0..1.0);
            data.push(x.max(0.0));
        }
    }
    RawSeries::new(
        Tensor::new(vec![n, steps], data).unwrap(),
        (0..steps as i64).map(|t| t * STEP).collect(),
        None,
    )
    .unwrap()
}

fn ring(n: usize) -> SensorGraph {
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        a.data_mut()[i * n + (i + 1) % n] = 1.0;
        a.data_mut()[((i + 1) % n) * n + i] = 0.5;
    }
    SensorGraph::from_adjacency(a).unwrap()
}

fn small_dataset(amplitude: f64) -> WindowedDataset {
    let cfg = DatasetConfig {
        t_h: 6,
        t_f: 3,
        k: 1,
        ..DatasetConfig::default()
    };
    build_windowed_dataset(&sines(4, 160, amplitude, 1), &ring(4), &cfg).unwrap()
}

fn small_model(data: &WindowedDataset, seed: u64) -> (SimSt, simst_core::ParamStore) {
    let cfg = ModelConfig {
        d_m: 8,
        d_n: 4,
        predictor_dim: 16,
        k: data.config.k,
        aux_width: data.config.aux_width(),
        t_h: data.config.t_h,
        t_f: data.config.t_f,
        ..ModelConfig::defaults(EncoderKind::Gru, data.num_nodes)
    };
    SimSt::new(cfg, seed).unwrap()
}

fn quick(max_epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        max_epochs,
        patience,
        batch_size: 64,
        seeds: vec![0],
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let data = small_dataset(10.0);
    let (model, mut store) = small_model(&data, 0);
    let before = store.clone();
    let cfg = TrainConfig {
        lr: 0.0,
        weight_decay: 0.0,
        ..quick(1, 1)
    };
    let mut state = TrainState::new(&store, &cfg);
    train_epoch(&model, &mut store, &data, &cfg, &mut state, 0).unwrap();
    for (a, b) in before.iter().zip(store.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = small_dataset(10.0);
    let run = |seed| {
        let (model, mut store) = small_model(&data, seed);
        let r = fit(&model, &mut store, &data, &quick(3, 3), seed, &mut ()).unwrap();
        (store, r.state.history)
    };
    let (a, ha) = run(4);
    let (b, hb) = run(4);
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    let (c, _) = run(5);
    assert_ne!(a, c);
}

#[test]
fn clipping_engages_on_steep_targets() {
    let data = small_dataset(5000.0);
    let (model, mut store) = small_model(&data, 0);
    let cfg = quick(1, 1);
    let mut state = TrainState::new(&store, &cfg);
    train_epoch(&model, &mut store, &data, &cfg, &mut state, 0).unwrap();
    assert!(state.clipped_batches > 0);
}

#[test]
fn patience_stops_a_stalled_run() {
    let data = small_dataset(10.0);
    let (model, mut store) = small_model(&data, 0);
    let cfg = TrainConfig {
        lr: 0.0,
        weight_decay: 0.0,
        ..quick(50, 3)
    };
    let r = fit(&model, &mut store, &data, &cfg, 0, &mut ()).unwrap();
    assert!(r.stopped_early);
    assert_eq!(r.best_epoch, 0);
    assert_eq!(r.state.history.len(), 4);
}

#[test]
fn returned_model_is_the_best_validation_epoch() {
    let data = small_dataset(10.0);
    let (model, mut store) = small_model(&data, 2);
    let cfg = TrainConfig { lr: 0.01, ..quick(6, 6) };
    let r = fit(&model, &mut store, &data, &cfg, 2, &mut ()).unwrap();
    for rec in &r.state.history {
        assert!(r.best_val_mae <= rec.val.as_ref().unwrap().mae);
    }
    let again = simst_core::trainer::evaluate(&model, &store, &data, Split::Val, &cfg).unwrap();
    assert_eq!(again.mae, r.best_val_mae);
}

#[test]
fn windows_stay_inside_their_split() {
    let data = small_dataset(10.0);
    let window = data.config.t_h + data.config.t_f;
    for (r, s) in data.ranges.iter().zip([&data.train, &data.val, &data.test]) {
        assert!(!s.is_empty());
        for &t in &s.starts {
            assert!(t >= r.start && t + window <= r.end);
        }
    }
    assert_eq!(data.ranges[0].end, data.ranges[1].start);
    assert_eq!(data.ranges[1].end, data.ranges[2].start);
}

#[test]
fn normalization_ignores_held_out_data() {
    let cfg = DatasetConfig { t_h: 6, t_f: 3, k: 1, ..DatasetConfig::default() };
    let raw = sines(4, 160, 10.0, 1);
    let base = build_windowed_dataset(&raw, &ring(4), &cfg).unwrap();
    let mut shifted = raw.clone();
    let test_start = base.ranges[2].start;
    for v in 0..4 {
        for t in test_start..160 {
            shifted.readings.data_mut()[v * 160 + t] += 1000.0;
        }
    }
    let other = build_windowed_dataset(&shifted, &ring(4), &cfg).unwrap();
    assert_eq!(base.stats, other.stats);
    assert_eq!(base.train.features, other.train.features);
}

#[test]
fn batches_are_time_major() {
    let data = small_dataset(10.0);
    let idx = [5, 0, 17];
    let b = data.batch(Split::Train, &idx).unwrap();
    let (t_h, w) = (data.config.t_h, data.width());
    for (i, &n) in idx.iter().enumerate() {
        for t in 0..t_h {
            let src = &data.train.features[(n * t_h + t) * w..(n * t_h + t + 1) * w];
            assert_eq!(b.x.row(t * idx.len() + i), src);
        }
        assert_eq!(b.nodes[i], data.train.nodes[n]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn splits_partition_the_timeline(t in 40usize..5000, a in 0.2f64..0.7, b in 0.1f64..0.25) {
        let ratio = [a, b, 1.0 - a - b];
        if let Ok([tr, va, te]) = chronological_split(t, ratio, 10) {
            prop_assert_eq!(tr.start, 0);
            prop_assert_eq!(tr.end, va.start);
            prop_assert_eq!(va.end, te.start);
            prop_assert_eq!(te.end, t);
            prop_assert!(tr.len() >= 10 && va.len() >= 10 && te.len() >= 10);
        }
    }

    #[test]
    fn mae_loss_scales_with_the_target_std(seed in any::<u64>(), c in 0.1f64..50.0) {
        let mut rng = stream(seed, Stream::Probe);
        let p: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..80.0)).collect();
        let loss = |scale: f64| {
            let mut tape = Tape::new();
            let pv = tape.input(Tensor::new(vec![2, 3], p.clone()).unwrap());
            let yt = Tensor::new(vec![2, 3], y.iter().map(|v| v * scale).collect()).unwrap();
            let stats = simst_core::dataset::ZScore { mean: 40.0 * scale, std: 12.0 * scale };
            let l = mae_loss(&mut tape, pv, &yt, &stats).unwrap();
            tape.value(l).data()[0]
        };
        let (base, scaled) = (loss(1.0), loss(c));
        prop_assert!((scaled - c * base).abs() <= 1e-9 * scaled.abs().max(1.0));
    }
}
