use alloc::vec::Vec;

use super::{EncoderOutput, ModelConfig};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruLayer {
    pub w_i: ParamId,
    pub b_i: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
}

/// Stacked gated recurrent units; the summary is the last hidden state of
/// the top layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GruEncoder {
    pub layers: Vec<GruLayer>,
}

impl GruEncoder {
    pub fn new(store: &mut ParamStore, c: &ModelConfig, rng: &mut StreamRng) -> Self {
        let d = c.d_m;
        let layers = (0..c.layers)
            .map(|l| GruLayer {
                w_i: store.add_weight(&alloc::format!("gru.{l}.w_i"), d, 3 * d, rng),
                b_i: store.add(&alloc::format!("gru.{l}.b_i"), Tensor::zeros(&[3 * d])),
                w_h: store.add_weight(&alloc::format!("gru.{l}.w_h"), d, 3 * d, rng),
                b_h: store.add(&alloc::format!("gru.{l}.b_h"), Tensor::zeros(&[3 * d])),
            })
            .collect();
        GruEncoder { layers }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        c: &ModelConfig,
        seq: Var,
        b: usize,
        mut dropout_rng: Option<&mut StreamRng>,
    ) -> Result<EncoderOutput> {
        let mut input = seq;
        let mut sequences = Vec::with_capacity(self.layers.len());
        let mut last = seq;
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                let training = dropout_rng.is_some();
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    input = tape.dropout(input, c.dropout, training, rng)?;
                }
            }
            let (w_i, b_i, w_h, b_h) = (
                tape.param(store, layer.w_i),
                tape.param(store, layer.b_i),
                tape.param(store, layer.w_h),
                tape.param(store, layer.b_h),
            );
            let xp_all = tape.linear(input, w_i, Some(b_i))?;
            let mut h = tape.input(Tensor::zeros(&[b, c.d_m]));
            let mut steps = Vec::with_capacity(c.t_h);
            for t in 0..c.t_h {
                let xp = tape.row_block(xp_all, t * b, b)?;
                let hp = tape.linear(h, w_h, Some(b_h))?;
                h = tape.gru_cell(xp, hp, h)?;
                steps.push(h);
            }
            last = h;
            input = tape.concat_rows(&steps)?;
            sequences.push(input);
        }
        Ok(EncoderOutput {
            summary: last,
            sequences,
            attention: Vec::new(),
        })
    }
}
