//! The forecasting network.
//!
//! Sequences live on the tape in time-major layout `[t_h * b, width]`, so
//! row `t * b + i` is step `t` of instance `i` and one recurrent or
//! convolutional step touches a contiguous row block.

mod gru;
mod tcn;
mod transformer;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::ego_width;
use crate::params::{ParamId, ParamStore};
use crate::rng::{stream, Stream, StreamRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use gru::GruEncoder;
pub use tcn::{receptive_field, TcnEncoder};
pub use transformer::{positional_encoding, CtEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Gru,
    Tcn,
    CausalTransformer,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Gru => "gru",
            EncoderKind::Tcn => "tcn",
            EncoderKind::CausalTransformer => "ct",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(EncoderKind::Gru),
            "tcn" | "wn" | "wavenet" => Ok(EncoderKind::Tcn),
            "ct" | "causal_transformer" | "transformer" => Ok(EncoderKind::CausalTransformer),
            other => Err(Error::Config(alloc::format!("unknown encoder kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub num_nodes: usize,
    pub d_m: usize,
    pub d_n: usize,
    pub layers: usize,
    pub predictor_dim: usize,
    pub dropout: f64,
    pub tcn_kernel: usize,
    pub tcn_skip_dim: usize,
    pub ct_heads: usize,
    pub ct_ffn_dim: usize,
    pub k: usize,
    /// Auxiliary calendar columns after the ego columns.
    pub aux_width: usize,
    pub t_h: usize,
    pub t_f: usize,
    pub ablate_cl: bool,
    pub ablate_pm: bool,
}

impl ModelConfig {
    /// Reference configuration of each variant.
    pub fn defaults(encoder: EncoderKind, num_nodes: usize) -> Self {
        ModelConfig {
            encoder,
            num_nodes,
            d_m: 64,
            d_n: 20,
            layers: match encoder {
                EncoderKind::Tcn => 3,
                _ => 2,
            },
            predictor_dim: 512,
            dropout: 0.1,
            tcn_kernel: 3,
            tcn_skip_dim: 64,
            ct_heads: 2,
            ct_ffn_dim: 128,
            k: 3,
            aux_width: 1,
            t_h: 12,
            t_f: 12,
            ablate_cl: false,
            ablate_pm: false,
        }
    }

    /// Width of each input row.
    pub fn input_width(&self) -> usize {
        ego_width(self.k) + self.aux_width
    }

    /// Width seen by the proximity MLP.
    pub fn pm_width(&self) -> usize {
        if self.ablate_pm {
            1 + self.aux_width
        } else {
            self.input_width()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_nodes == 0 {
            return fail("model needs at least one sensor".into());
        }
        for (name, v) in [
            ("d_m", self.d_m),
            ("d_n", self.d_n),
            ("layers", self.layers),
            ("predictor_dim", self.predictor_dim),
            ("t_h", self.t_h),
            ("t_f", self.t_f),
        ] {
            if v == 0 {
                return fail(alloc::format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(alloc::format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.encoder {
            EncoderKind::CausalTransformer => {
                if self.ct_heads == 0 || !self.d_m.is_multiple_of(self.ct_heads) {
                    return fail(alloc::format!(
                        "d_m {} is not divisible by {} heads",
                        self.d_m,
                        self.ct_heads
                    ));
                }
                if self.ct_ffn_dim == 0 {
                    return fail("ct_ffn_dim must be positive".into());
                }
            }
            EncoderKind::Tcn => {
                if self.tcn_kernel < 2 || self.tcn_skip_dim == 0 {
                    return fail("tcn needs kernel >= 2 and a positive skip width".into());
                }
                let rf = receptive_field(self.tcn_kernel, self.layers);
                if rf < self.t_h {
                    return fail(alloc::format!(
                        "receptive field {rf} is shorter than the history length {}",
                        self.t_h
                    ));
                }
            }
            EncoderKind::Gru => {}
        }
        Ok(())
    }
}

/// Two-layer perceptron `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut StreamRng) -> Self {
        Mlp {
            w1: store.add_weight(&alloc::format!("{name}.w1"), d_in, d_hidden, rng),
            b1: store.add(&alloc::format!("{name}.b1"), Tensor::zeros(&[d_hidden])),
            w2: store.add_weight(&alloc::format!("{name}.w2"), d_hidden, d_out, rng),
            b2: store.add(&alloc::format!("{name}.b2"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            tape.param(store, self.w1),
            tape.param(store, self.b1),
            tape.param(store, self.w2),
            tape.param(store, self.b2),
        );
        let h = tape.linear(x, w1, Some(b1))?;
        let h = tape.relu(h);
        tape.linear(h, w2, Some(b2))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Gru(GruEncoder),
    Tcn(TcnEncoder),
    Ct(CtEncoder),
}

/// Encoder result: the summary `[b, d_m]` plus per-layer time-major
/// activations for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub summary: Var,
    /// Every entry is `[t_h * b, width]`.
    pub sequences: Vec<Var>,
    /// Attention weights per block, `[b * heads * t_h, t_h]`, grouped by
    /// instance then head.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[b, t_f]` normalized-scale predictions.
    pub prediction: Var,
    pub encoder: EncoderOutput,
}

/// Parameter layout of the network; values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimSt {
    pub config: ModelConfig,
    pub pm: Mlp,
    pub embedding: Option<ParamId>,
    pub cl: Option<Mlp>,
    pub encoder: Encoder,
    pub predictor: Mlp,
}

impl SimSt {
    /// Registers and initializes every parameter from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(SimSt, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(seed, Stream::Init);
        let c = &config;
        let pm = Mlp::new(&mut store, "pm", c.pm_width(), c.d_m, c.d_m, &mut rng);
        let (embedding, cl) = if c.ablate_cl {
            (None, None)
        } else {
            let e = store.add_uniform("cl.embedding", &[c.num_nodes, c.d_n], 0.1, &mut rng);
            (Some(e), Some(Mlp::new(&mut store, "cl", c.d_n, c.d_m, c.d_m, &mut rng)))
        };
        let encoder = match c.encoder {
            EncoderKind::Gru => Encoder::Gru(GruEncoder::new(&mut store, c, &mut rng)),
            EncoderKind::Tcn => Encoder::Tcn(TcnEncoder::new(&mut store, c, &mut rng)),
            EncoderKind::CausalTransformer => Encoder::Ct(CtEncoder::new(&mut store, c, &mut rng)),
        };
        let predictor = Mlp::new(&mut store, "predictor", 2 * c.d_m, c.predictor_dim, c.t_f, &mut rng);
        let model = SimSt {
            config,
            pm,
            embedding,
            cl,
            encoder,
            predictor,
        };
        Ok((model, store))
    }

    /// Per-step proximity MLP over `[t_h * b, input_width]` rows.
    pub fn pm_encode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let c = &self.config;
        let width = tape.value(x).cols();
        if width != c.input_width() {
            return Err(Error::Config(alloc::format!(
                "input width {width} does not match configured {}",
                c.input_width()
            )));
        }
        let x = if c.ablate_pm {
            let own = tape.slice_cols(x, 0, 1)?;
            let aux = tape.slice_cols(x, ego_width(c.k), c.aux_width)?;
            tape.concat_cols(&[own, aux])?
        } else {
            x
        };
        self.pm.forward(tape, store, x)
    }

    /// Sensor embedding rows projected to `[b, d_m]`; zeros when ablated.
    pub fn cl_embed(&self, tape: &mut Tape, store: &ParamStore, nodes: &[usize]) -> Result<Var> {
        let c = &self.config;
        if let Some(&v) = nodes.iter().find(|v| **v >= c.num_nodes) {
            return Err(Error::Index {
                what: "sensor",
                index: v,
                len: c.num_nodes,
            });
        }
        let (Some(e), Some(cl)) = (self.embedding, self.cl) else {
            return Ok(tape.input(Tensor::zeros(&[nodes.len(), c.d_m])));
        };
        let ev = tape.param(store, e);
        let index = nodes
            .iter()
            .flat_map(|&v| (0..c.d_n).map(move |j| v * c.d_n + j))
            .collect();
        let rows = tape.gather(ev, index, &[nodes.len(), c.d_n])?;
        cl.forward(tape, store, rows)
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: Var,
        batch: usize,
        dropout_rng: Option<&mut StreamRng>,
    ) -> Result<EncoderOutput> {
        match &self.encoder {
            Encoder::Gru(e) => e.forward(tape, store, &self.config, seq, batch, dropout_rng),
            Encoder::Tcn(e) => e.forward(tape, store, &self.config, seq, batch, dropout_rng),
            Encoder::Ct(e) => e.forward(tape, store, &self.config, seq, batch, dropout_rng),
        }
    }

    /// Predictor over `[summary | embedding]`.
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, summary: Var, embedded: Var) -> Result<Var> {
        let cat = tape.concat_cols(&[summary, embedded])?;
        self.predictor.forward(tape, store, cat)
    }

    /// Full network on a time-major batch. Dropout is active only when a
    /// generator is supplied.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        nodes: &[usize],
        dropout_rng: Option<&mut StreamRng>,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let b = nodes.len();
        if b == 0 {
            return Err(Error::Empty("batch"));
        }
        if x.rows() != c.t_h * b {
            return Err(Error::shape("forward", x.shape(), &[c.t_h * b, c.input_width()]));
        }
        let xv = tape.input(x.clone());
        let h = self.pm_encode(tape, store, xv)?;
        let encoder = self.encode(tape, store, h, b, dropout_rng)?;
        let hv = self.cl_embed(tape, store, nodes)?;
        let prediction = self.predict(tape, store, encoder.summary, hv)?;
        Ok(ForwardOutput { prediction, encoder })
    }

    /// Inference-mode predictions `[b, t_f]` on the normalized scale.
    pub fn infer(&self, store: &ParamStore, x: &Tensor, nodes: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, x, nodes, None)?;
        Ok(tape.value(out.prediction).clone())
    }

    /// The sensor embedding table, if the model has one.
    pub fn embedding_table<'a>(&self, store: &'a ParamStore) -> Option<&'a Tensor> {
        self.embedding.map(|e| store.value(e))
    }
}
