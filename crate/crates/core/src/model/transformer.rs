use alloc::vec;
use alloc::vec::Vec;

use super::{EncoderOutput, ModelConfig};
use crate::error::Result;
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Sinusoidal position table `[steps, d]`.
pub fn positional_encoding(steps: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[steps, d]);
    for t in 0..steps {
        for i in 0..d {
            let freq = math::pow(10_000.0, (2 * (i / 2)) as f64 / d as f64);
            let angle = t as f64 / freq;
            pe.data_mut()[t * d + i] = if i % 2 == 0 { math::sin(angle) } else { math::cos(angle) };
        }
    }
    pe
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtBlock {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w_ff1: ParamId,
    pub b_ff1: ParamId,
    pub w_ff2: ParamId,
    pub b_ff2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

/// Encoder blocks with causally masked multi-head attention and
/// post-residual layer norm; the summary is the last step.
#[derive(Debug, Clone, PartialEq)]
pub struct CtEncoder {
    pub blocks: Vec<CtBlock>,
}

impl CtEncoder {
    pub fn new(store: &mut ParamStore, c: &ModelConfig, rng: &mut StreamRng) -> Self {
        let (d, f) = (c.d_m, c.ct_ffn_dim);
        let blocks = (0..c.layers)
            .map(|l| {
                let name = |p: &str| alloc::format!("ct.{l}.{p}");
                let mut lin = |p: &str, i: usize, o: usize| {
                    (
                        store.add_weight(&name(&alloc::format!("w_{p}")), i, o, rng),
                        store.add(&name(&alloc::format!("b_{p}")), Tensor::zeros(&[o])),
                    )
                };
                let (w_q, b_q) = lin("q", d, d);
                let (w_k, b_k) = lin("k", d, d);
                let (w_v, b_v) = lin("v", d, d);
                let (w_o, b_o) = lin("o", d, d);
                let (w_ff1, b_ff1) = lin("ff1", d, f);
                let (w_ff2, b_ff2) = lin("ff2", f, d);
                CtBlock {
                    w_q,
                    b_q,
                    w_k,
                    b_k,
                    w_v,
                    b_v,
                    w_o,
                    b_o,
                    ln1_g: store.add(&name("ln1_g"), Tensor::full(&[d], 1.0)),
                    ln1_b: store.add(&name("ln1_b"), Tensor::zeros(&[d])),
                    w_ff1,
                    b_ff1,
                    w_ff2,
                    b_ff2,
                    ln2_g: store.add(&name("ln2_g"), Tensor::full(&[d], 1.0)),
                    ln2_b: store.add(&name("ln2_b"), Tensor::zeros(&[d])),
                }
            })
            .collect();
        CtEncoder { blocks }
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
        let (t_h, d, heads) = (c.t_h, c.d_m, c.ct_heads);
        let dh = d / heads;
        let groups = b * heads;

        let pe = positional_encoding(t_h, d);
        let mut pos = Vec::with_capacity(t_h * b * d);
        for t in 0..t_h {
            for _ in 0..b {
                pos.extend_from_slice(pe.row(t));
            }
        }
        let pos = tape.input(Tensor::new(vec![t_h * b, d], pos)?);
        let mut x = tape.add(seq, pos)?;

        // (t, i, h, c) in the time-major sequence <-> (i, h, t, c) per head group
        let mut split = vec![0; groups * t_h * dh];
        let mut merge = vec![0; t_h * b * d];
        for t in 0..t_h {
            for i in 0..b {
                for h in 0..heads {
                    for ch in 0..dh {
                        let seq_at = (t * b + i) * d + h * dh + ch;
                        let head_at = ((i * heads + h) * t_h + t) * dh + ch;
                        split[head_at] = seq_at;
                        merge[seq_at] = head_at;
                    }
                }
            }
        }
        let mask: Vec<bool> = (0..groups * t_h * t_h)
            .map(|e| {
                let (row, col) = ((e / t_h) % t_h, e % t_h);
                col <= row
            })
            .collect();
        let scale = 1.0 / math::sqrt(dh as f64);

        let mut sequences = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let mut p = |id| tape.param(store, id);
            let (wq, bq, wk, bk, wv, bv, wo, bo) = (
                p(blk.w_q),
                p(blk.b_q),
                p(blk.w_k),
                p(blk.b_k),
                p(blk.w_v),
                p(blk.b_v),
                p(blk.w_o),
                p(blk.b_o),
            );
            let (g1, be1, wf1, bf1, wf2, bf2, g2, be2) = (
                p(blk.ln1_g),
                p(blk.ln1_b),
                p(blk.w_ff1),
                p(blk.b_ff1),
                p(blk.w_ff2),
                p(blk.b_ff2),
                p(blk.ln2_g),
                p(blk.ln2_b),
            );
            let head_shape = [groups * t_h, dh];
            let q = tape.linear(x, wq, Some(bq))?;
            let q = tape.gather(q, split.clone(), &head_shape)?;
            let k = tape.linear(x, wk, Some(bk))?;
            let k = tape.gather(k, split.clone(), &head_shape)?;
            let v = tape.linear(x, wv, Some(bv))?;
            let v = tape.gather(v, split.clone(), &head_shape)?;
            let scores = tape.batched_matmul(q, k, groups, true)?;
            let scores = tape.affine(scores, scale, 0.0);
            let att = tape.softmax_rows(scores, Some(&mask))?;
            attention.push(att);
            let ctx = tape.batched_matmul(att, v, groups, false)?;
            let ctx = tape.gather(ctx, merge.clone(), &[t_h * b, d])?;
            let mut o = tape.linear(ctx, wo, Some(bo))?;
            let training = dropout_rng.is_some();
            if let Some(rng) = dropout_rng.as_deref_mut() {
                o = tape.dropout(o, c.dropout, training, rng)?;
            }
            let r = tape.add(x, o)?;
            x = tape.layer_norm(r, g1, be1, LN_EPS)?;
            let f = tape.linear(x, wf1, Some(bf1))?;
            let f = tape.relu(f);
            let mut f = tape.linear(f, wf2, Some(bf2))?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                f = tape.dropout(f, c.dropout, training, rng)?;
            }
            let r = tape.add(x, f)?;
            x = tape.layer_norm(r, g2, be2, LN_EPS)?;
            sequences.push(x);
        }
        let summary = tape.row_block(x, (t_h - 1) * b, b)?;
        Ok(EncoderOutput {
            summary,
            sequences,
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_table_values() {
        let pe = positional_encoding(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(1, 0) - math::sin(1.0)).abs() < 1e-15);
        assert!((pe.at(2, 2) - math::sin(2.0 / 100.0)).abs() < 1e-15);
    }
}
