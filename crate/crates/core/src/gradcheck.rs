//! Central finite differences as an independent oracle for [`Tape::backward`].

use alloc::vec::Vec;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{stream, Stream};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    /// Perturbation size `h`.
    pub step: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are
    /// checked exhaustively.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: 1e-5,
            coords_per_param: usize::MAX,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdWorst {
    pub param: ParamId,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<FdWorst>,
}

fn evaluate<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(alloc::format!(
            "finite-difference objective must be scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compares the tape's gradient of `f` with central differences.
///
/// `f` builds a scalar objective on the given tape from the parameters in
/// the store. On return the store's gradient buffers hold the analytic
/// gradient and every parameter value is restored bit for bit.
pub fn finite_difference_check<F>(store: &mut ParamStore, mut f: F, cfg: &FdConfig) -> Result<FdReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if cfg.step <= 0.0 {
        return Err(Error::Config(alloc::format!("finite-difference step {} must be positive", cfg.step)));
    }
    let first = evaluate(store, &mut f)?;
    let second = evaluate(store, &mut f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::OracleInvalid { first, second });
    }

    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;

    let mut rng = stream(cfg.seed, Stream::Probe);
    let mut report = FdReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        let coords: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            index::sample(&mut rng, n, cfg.coords_per_param).into_vec()
        };
        for c in coords {
            let original = store.value(id).data()[c];
            store.get_mut(id).value.data_mut()[c] = original + cfg.step;
            let plus = evaluate(store, &mut f);
            store.get_mut(id).value.data_mut()[c] = original - cfg.step;
            let minus = evaluate(store, &mut f);
            store.get_mut(id).value.data_mut()[c] = original;
            let numeric = (plus? - minus?) / (2.0 * cfg.step);
            let analytic = store.grad(id).data()[c];
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(FdWorst {
                    param: id,
                    coord: c,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
