//! Training loop: MAE on the original scale, node-based batches, Adam,
//! gradient clipping and early stopping on validation MAE.

use alloc::vec::Vec;

use crate::dataset::{node_batch_iter, sequential_batches, BatchSpec, Split, WindowedDataset, ZScore};
use crate::error::{Error, Result};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::SimSt;
use crate::optim::{adam_step, clip_gradients_norm, AdamState};
use crate::params::ParamStore;
use crate::rng::{substream, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    pub eval_batch_size: usize,
    /// Absolute targets below this are left out of MAPE.
    pub mape_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            weight_decay: 0.0001,
            max_epochs: 150,
            patience: 20,
            batch_size: 1024,
            clip_norm: 5.0,
            seeds: (0..5).collect(),
            eval_every: 1,
            eval_batch_size: 4096,
            mape_epsilon: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(alloc::format!("{what} must be positive")));
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and weight decay must be non-negative".into()));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs");
        }
        if self.patience == 0 {
            return bad("patience");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm");
        }
        if self.eval_every == 0 || self.eval_batch_size == 0 {
            return bad("evaluation interval and batch size");
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(alloc::format!(
                "patience {} exceeds max_epochs {}",
                self.patience,
                self.max_epochs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Present on evaluation epochs.
    pub val: Option<MetricsReport>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val_mae: f64,
    pub best_epoch: Option<usize>,
    pub epochs_since_improve: usize,
    pub optimizer: AdamState,
    pub history: Vec<EpochRecord>,
    /// Batches whose gradient was rescaled by clipping.
    pub clipped_batches: usize,
}

impl TrainState {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            best_val_mae: f64::INFINITY,
            best_epoch: None,
            epochs_since_improve: 0,
            optimizer: AdamState::new(store, cfg.lr, cfg.weight_decay),
            history: Vec::new(),
            clipped_batches: 0,
        }
    }

    /// Records a validation MAE; returns whether it is a new best.
    pub fn observe_val(&mut self, epoch: usize, val_mae: f64) -> bool {
        if val_mae < self.best_val_mae {
            self.best_val_mae = val_mae;
            self.best_epoch = Some(epoch);
            self.epochs_since_improve = 0;
            true
        } else {
            self.epochs_since_improve += 1;
            false
        }
    }
}

/// Mean absolute error after mapping `pred` back to the original scale.
pub fn mae_loss(tape: &mut Tape, pred: Var, target: &Tensor, stats: &ZScore) -> Result<Var> {
    if tape.value(pred).shape() != target.shape() {
        return Err(Error::shape("mae_loss", tape.value(pred).shape(), target.shape()));
    }
    let denorm = tape.affine(pred, stats.std, stats.mean);
    let y = tape.input(target.clone());
    let diff = tape.sub(denorm, y)?;
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

/// One pass over the shuffled training instances. Returns the mean loss
/// weighted by batch size.
pub fn train_epoch(
    model: &SimSt,
    store: &mut ParamStore,
    data: &WindowedDataset,
    cfg: &TrainConfig,
    state: &mut TrainState,
    seed: u64,
) -> Result<f64> {
    let spec = BatchSpec::new(cfg.batch_size, seed)?;
    let epoch = state.epoch;
    let mut dropout_rng = substream(seed, Stream::Dropout, epoch as u32);
    let (mut total, mut seen) = (0.0, 0usize);
    for (bi, idx) in node_batch_iter(data.train.len(), &spec, epoch as u32).enumerate() {
        let batch = data.batch(Split::Train, &idx)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, store, &batch.x, &batch.nodes, Some(&mut dropout_rng))?;
        let loss = mae_loss(&mut tape, out.prediction, &batch.y, &data.stats)?;
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: bi,
                loss: lv,
            });
        }
        store.zero_grad();
        tape.backward(loss, store)?;
        if clip_gradients_norm(store, cfg.clip_norm) < 1.0 {
            state.clipped_batches += 1;
        }
        adam_step(store, &mut state.optimizer)?;
        total += lv * idx.len() as f64;
        seen += idx.len();
    }
    if seen == 0 {
        return Err(Error::Empty("training split"));
    }
    state.epoch += 1;
    Ok(total / seen as f64)
}

/// Original-scale predictions `[n, t_f]` for every instance of a split.
pub fn predict_split(model: &SimSt, store: &ParamStore, data: &WindowedDataset, split: Split, batch_size: usize) -> Result<Vec<f64>> {
    let n = data.split(split).len();
    let mut out = Vec::with_capacity(n * data.config.t_f);
    for range in sequential_batches(n, batch_size) {
        let idx: Vec<usize> = range.collect();
        let batch = data.batch(split, &idx)?;
        let pred = model.infer(store, &batch.x, &batch.nodes)?;
        out.extend(pred.data().iter().map(|z| data.stats.inverse(*z)));
    }
    Ok(out)
}

pub fn evaluate(model: &SimSt, store: &ParamStore, data: &WindowedDataset, split: Split, cfg: &TrainConfig) -> Result<MetricsReport> {
    let n = data.split(split).len();
    if n == 0 {
        return Err(Error::Empty("evaluation split"));
    }
    let mut acc = MetricsAccumulator::new(data.config.t_f, cfg.mape_epsilon * data.stats.std);
    let t_f = data.config.t_f;
    for range in sequential_batches(n, cfg.eval_batch_size) {
        let idx: Vec<usize> = range.collect();
        let batch = data.batch(split, &idx)?;
        let pred = model.infer(store, &batch.x, &batch.nodes)?;
        let denorm: Vec<f64> = pred.data().iter().map(|z| data.stats.inverse(*z)).collect();
        acc.push(&denorm, &batch.y.data()[..idx.len() * t_f])?;
    }
    acc.finish()
}

/// Hooks for wall-clock timing and progress reporting.
pub trait FitObserver {
    /// Seconds on a monotonic clock.
    fn now(&mut self) -> f64 {
        0.0
    }

    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

impl FitObserver for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub state: TrainState,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_early: bool,
}

/// Trains until `max_epochs` or until validation MAE has not improved for
/// `patience` consecutive evaluations, then loads the best parameters into
/// `store`.
pub fn fit(
    model: &SimSt,
    store: &mut ParamStore,
    data: &WindowedDataset,
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn FitObserver,
) -> Result<FitResult> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
        return Err(Error::Empty("dataset split"));
    }
    let mut state = TrainState::new(store, cfg);
    let mut best = store.clone();
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let start = observer.now();
        let train_loss = train_epoch(model, store, data, cfg, &mut state, seed)?;
        let val = if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.max_epochs {
            let report = evaluate(model, store, data, Split::Val, cfg)?;
            if state.observe_val(epoch, report.mae) {
                best = store.clone();
            }
            Some(report)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val,
            seconds: observer.now() - start,
        };
        observer.on_epoch(&record);
        state.history.push(record);
        if state.epochs_since_improve >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    store.load_from(&best)?;
    Ok(FitResult {
        best_epoch: state.best_epoch.unwrap_or(0),
        best_val_mae: state.best_val_mae,
        state,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let mut tape = Tape::new();
        let p = tape.input(Tensor::vector(alloc::vec![0.0, 0.0]));
        let y = Tensor::vector(alloc::vec![1.0, 3.0]);
        let l = mae_loss(&mut tape, p, &y, &ZScore::identity()).unwrap();
        assert_eq!(tape.value(l).data(), &[2.0]);

        let mut tape = Tape::new();
        let p = tape.input(Tensor::vector(alloc::vec![1.0]));
        let stats = ZScore { mean: 0.0, std: 2.0 };
        let l = mae_loss(&mut tape, p, &Tensor::vector(alloc::vec![2.0]), &stats).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
    }

    #[test]
    fn patience_one_stops_after_two_evaluations() {
        let mut s = TrainState::new(&ParamStore::new(), &TrainConfig::default());
        assert!(s.observe_val(0, 3.0));
        assert!(!s.observe_val(1, 3.0));
        assert_eq!(s.epochs_since_improve, 1);
        assert!(s.observe_val(2, 2.0));
        assert_eq!(s.epochs_since_improve, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            patience: 200,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
