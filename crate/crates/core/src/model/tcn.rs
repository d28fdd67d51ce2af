use alloc::vec::Vec;

use super::{EncoderOutput, ModelConfig};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Receptive field of `layers` causal convolutions with dilations
/// `1, 2, 4, ...`.
pub fn receptive_field(kernel: usize, layers: usize) -> usize {
    let dilations: usize = (0..layers).map(|l| 1usize << l).sum();
    1 + (kernel.saturating_sub(1)) * dilations
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TcnLayer {
    pub dilation: usize,
    /// `[kernel * d_m, 2 * d_m]`: filter half then gate half.
    pub w_conv: ParamId,
    pub b_conv: ParamId,
    pub w_res: ParamId,
    pub b_res: ParamId,
    pub w_skip: ParamId,
    pub b_skip: ParamId,
}

/// Dilated causal convolutions with gated activations, residual and skip
/// paths; the summary is the projected skip sum at the last step.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnEncoder {
    pub layers: Vec<TcnLayer>,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl TcnEncoder {
    pub fn new(store: &mut ParamStore, c: &ModelConfig, rng: &mut StreamRng) -> Self {
        let (d, s, k) = (c.d_m, c.tcn_skip_dim, c.tcn_kernel);
        let layers = (0..c.layers)
            .map(|l| {
                let name = |p: &str| alloc::format!("tcn.{l}.{p}");
                TcnLayer {
                    dilation: 1 << l,
                    w_conv: store.add_weight(&name("w_conv"), k * d, 2 * d, rng),
                    b_conv: store.add(&name("b_conv"), Tensor::zeros(&[2 * d])),
                    w_res: store.add_weight(&name("w_res"), d, d, rng),
                    b_res: store.add(&name("b_res"), Tensor::zeros(&[d])),
                    w_skip: store.add_weight(&name("w_skip"), d, s, rng),
                    b_skip: store.add(&name("b_skip"), Tensor::zeros(&[s])),
                }
            })
            .collect();
        TcnEncoder {
            layers,
            w_out: store.add_weight("tcn.w_out", s, d, rng),
            b_out: store.add("tcn.b_out", Tensor::zeros(&[d])),
        }
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
        let (t_h, d) = (c.t_h, c.d_m);
        let mut x = seq;
        let mut skip_sum: Option<Var> = None;
        let mut sequences = Vec::with_capacity(self.layers.len() + 1);
        for layer in &self.layers {
            let mut taps = Vec::with_capacity(c.tcn_kernel);
            taps.push(x);
            for j in 1..c.tcn_kernel {
                taps.push(shift(tape, x, j * layer.dilation, b, t_h, d)?);
            }
            let stacked = tape.concat_cols(&taps)?;
            let (wc, bc) = (tape.param(store, layer.w_conv), tape.param(store, layer.b_conv));
            let conv = tape.linear(stacked, wc, Some(bc))?;
            let filter = tape.slice_cols(conv, 0, d)?;
            let gate = tape.slice_cols(conv, d, d)?;
            let filter = tape.tanh(filter);
            let gate = tape.sigmoid(gate);
            let mut z = tape.mul(filter, gate)?;
            let training = dropout_rng.is_some();
            if let Some(rng) = dropout_rng.as_deref_mut() {
                z = tape.dropout(z, c.dropout, training, rng)?;
            }
            let (ws, bs) = (tape.param(store, layer.w_skip), tape.param(store, layer.b_skip));
            let skip = tape.linear(z, ws, Some(bs))?;
            skip_sum = Some(match skip_sum {
                Some(acc) => tape.add(acc, skip)?,
                None => skip,
            });
            let (wr, br) = (tape.param(store, layer.w_res), tape.param(store, layer.b_res));
            let res = tape.linear(z, wr, Some(br))?;
            x = tape.add(x, res)?;
            sequences.push(x);
        }
        let skip_sum = skip_sum.expect("at least one layer");
        let act = tape.relu(skip_sum);
        sequences.push(act);
        let last = tape.row_block(act, (t_h - 1) * b, b)?;
        let (wo, bo) = (tape.param(store, self.w_out), tape.param(store, self.b_out));
        let summary = tape.linear(last, wo, Some(bo))?;
        Ok(EncoderOutput {
            summary,
            sequences,
            attention: Vec::new(),
        })
    }
}

/// Delays a time-major sequence by `s` steps, filling the front with zeros.
fn shift(tape: &mut Tape, x: Var, s: usize, b: usize, t_h: usize, d: usize) -> Result<Var> {
    if s >= t_h {
        return Ok(tape.input(Tensor::zeros(&[t_h * b, d])));
    }
    let pad = tape.input(Tensor::zeros(&[s * b, d]));
    let body = tape.row_block(x, 0, (t_h - s) * b)?;
    tape.concat_rows(&[pad, body])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_field_formula() {
        assert_eq!(receptive_field(3, 3), 15);
        assert_eq!(receptive_field(2, 1), 2);
        assert_eq!(receptive_field(3, 0), 1);
    }
}
