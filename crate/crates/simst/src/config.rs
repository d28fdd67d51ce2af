//! Flat `key = value` run configuration.
//!
//! Lengths are in time steps, distances in the distance file's unit,
//! learning rate per optimizer step. Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use anyhow::Result;
use simst_core::dataset::DatasetConfig;
use simst_core::model::{EncoderKind, ModelConfig};
use simst_core::trainer::TrainConfig;

use crate::error::config_err;

pub const DEFAULT_THRESHOLD: f64 = 0.1;

/// Parses `key = value` lines; duplicate keys are an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
        let (k, v) = (k.trim().to_owned(), v.trim().to_owned());
        if k.is_empty() {
            return Err(config_err(format!("line {}: empty key", i + 1)));
        }
        if out.insert(k.clone(), v).is_some() {
            return Err(config_err(format!("line {}: duplicate key {k:?}", i + 1)));
        }
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_err(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

/// Every tunable of preprocessing, the model and training.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub threshold: f64,
    pub encoder: EncoderKind,
    pub d_m: usize,
    pub d_n: usize,
    /// `None` picks the encoder's default depth.
    pub layers: Option<usize>,
    pub predictor_dim: usize,
    pub dropout: f64,
    pub tcn_kernel: usize,
    pub tcn_skip_dim: usize,
    pub ct_heads: usize,
    pub ct_ffn_dim: usize,
    pub ablate_cl: bool,
    pub ablate_pm: bool,
    pub train: TrainConfig,
    /// Write zero wall-clock seconds so logs are byte-reproducible.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::defaults(EncoderKind::Gru, 1);
        RunConfig {
            dataset: DatasetConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            encoder: m.encoder,
            d_m: m.d_m,
            d_n: m.d_n,
            layers: None,
            predictor_dim: m.predictor_dim,
            dropout: m.dropout,
            tcn_kernel: m.tcn_kernel,
            tcn_skip_dim: m.tcn_skip_dim,
            ct_heads: m.ct_heads,
            ct_ffn_dim: m.ct_ffn_dim,
            ablate_cl: false,
            ablate_pm: false,
            train: TrainConfig::default(),
            deterministic: false,
        }
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "t_h" => self.dataset.t_h = parse(key, v)?,
            "t_f" => self.dataset.t_f = parse(key, v)?,
            "k" => self.dataset.k = parse(key, v)?,
            "split" => {
                let parts: Vec<f64> = parse_list(key, v)?;
                self.dataset.split = parts
                    .try_into()
                    .map_err(|_| config_err("split: expected three ratios train,val,test"))?;
            }
            "day_of_week" => self.dataset.include_day_of_week = parse_bool(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "encoder" => self.encoder = v.parse().map_err(|e| config_err(format!("encoder: {e}")))?,
            "d_m" => self.d_m = parse(key, v)?,
            "d_n" => self.d_n = parse(key, v)?,
            "layers" => self.layers = Some(parse(key, v)?),
            "predictor_dim" => self.predictor_dim = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "tcn_kernel" => self.tcn_kernel = parse(key, v)?,
            "tcn_skip_dim" => self.tcn_skip_dim = parse(key, v)?,
            "ct_heads" => self.ct_heads = parse(key, v)?,
            "ct_ffn_dim" => self.ct_ffn_dim = parse(key, v)?,
            "ablate_cl" => self.ablate_cl = parse_bool(key, v)?,
            "ablate_pm" => self.ablate_pm = parse_bool(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "max_epochs" => self.train.max_epochs = parse(key, v)?,
            "patience" => self.train.patience = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "clip_norm" => self.train.clip_norm = parse(key, v)?,
            "seeds" => self.train.seeds = parse_list(key, v)?,
            "eval_every" => self.train.eval_every = parse(key, v)?,
            "eval_batch_size" => self.train.eval_batch_size = parse(key, v)?,
            "mape_epsilon" => self.train.mape_epsilon = parse(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            _ => return Err(config_err(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.layers
            .unwrap_or_else(|| ModelConfig::defaults(self.encoder, 1).layers)
    }

    /// Model configuration for a dataset of `num_nodes` sensors.
    pub fn model_config(&self, num_nodes: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder,
            num_nodes,
            d_m: self.d_m,
            d_n: self.d_n,
            layers: self.layers(),
            predictor_dim: self.predictor_dim,
            dropout: self.dropout,
            tcn_kernel: self.tcn_kernel,
            tcn_skip_dim: self.tcn_skip_dim,
            ct_heads: self.ct_heads,
            ct_ffn_dim: self.ct_ffn_dim,
            k: self.dataset.k,
            aux_width: self.dataset.aux_width(),
            t_h: self.dataset.t_h,
            t_f: self.dataset.t_f,
            ablate_cl: self.ablate_cl,
            ablate_pm: self.ablate_pm,
        }
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_text(&self) -> String {
        let d = &self.dataset;
        let t = &self.train;
        let join = |xs: &[String]| xs.join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("t_h", d.t_h.to_string());
        put("t_f", d.t_f.to_string());
        put("k", d.k.to_string());
        put("split", join(&d.split.map(|x| x.to_string())));
        put("day_of_week", d.include_day_of_week.to_string());
        put("threshold", self.threshold.to_string());
        put("encoder", self.encoder.to_string());
        put("d_m", self.d_m.to_string());
        put("d_n", self.d_n.to_string());
        put("layers", self.layers().to_string());
        put("predictor_dim", self.predictor_dim.to_string());
        put("dropout", self.dropout.to_string());
        put("tcn_kernel", self.tcn_kernel.to_string());
        put("tcn_skip_dim", self.tcn_skip_dim.to_string());
        put("ct_heads", self.ct_heads.to_string());
        put("ct_ffn_dim", self.ct_ffn_dim.to_string());
        put("ablate_cl", self.ablate_cl.to_string());
        put("ablate_pm", self.ablate_pm.to_string());
        put("lr", t.lr.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("max_epochs", t.max_epochs.to_string());
        put("patience", t.patience.to_string());
        put("batch_size", t.batch_size.to_string());
        put("clip_norm", t.clip_norm.to_string());
        put("seeds", join(&t.seeds.iter().map(|x| x.to_string()).collect::<Vec<_>>()));
        put("eval_every", t.eval_every.to_string());
        put("eval_batch_size", t.eval_batch_size.to_string());
        put("mape_epsilon", t.mape_epsilon.to_string());
        put("deterministic", self.deterministic.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("encoder", "ct").unwrap();
        cfg.set("seeds", "3, 4").unwrap();
        cfg.set("split", "0.7,0.1,0.2").unwrap();
        let text = cfg.to_text();
        assert!(text.contains("layers = 2"));
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.train.seeds, [3, 4]);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(RunConfig::from_text("learning_rate = 1").is_err());
        assert!(RunConfig::from_text("lr 0.1").is_err());
        assert!(RunConfig::from_text("lr = fast").is_err());
        assert!(RunConfig::from_text("lr = 1\nlr = 2").is_err());
        assert!(RunConfig::from_text("split = 0.5,0.5").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::from_text("# tiny\n\nd_m = 32 \n").unwrap();
        assert_eq!(cfg.d_m, 32);
    }
}
