//! MAE, RMSE and masked MAPE per horizon.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub horizons: Vec<HorizonMetrics>,
    /// Means over horizons.
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    /// Entries left out of MAPE because `|y| < epsilon`.
    pub masked: usize,
}

/// Running sums over `[n, horizons]` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsAccumulator {
    horizons: usize,
    epsilon: f64,
    count: usize,
    abs: Vec<f64>,
    sq: Vec<f64>,
    pct: Vec<f64>,
    pct_count: Vec<usize>,
}

impl MetricsAccumulator {
    pub fn new(horizons: usize, epsilon: f64) -> Self {
        MetricsAccumulator {
            horizons,
            epsilon,
            count: 0,
            abs: vec![0.0; horizons],
            sq: vec![0.0; horizons],
            pct: vec![0.0; horizons],
            pct_count: vec![0; horizons],
        }
    }

    /// Adds whole rows; both slices are row-major `[rows, horizons]`.
    pub fn push(&mut self, preds: &[f64], targets: &[f64]) -> Result<()> {
        if preds.len() != targets.len() || !preds.len().is_multiple_of(self.horizons.max(1)) {
            return Err(Error::shape("metrics", &[preds.len()], &[targets.len()]));
        }
        for (i, (p, y)) in preds.iter().zip(targets).enumerate() {
            let h = i % self.horizons;
            let e = p - y;
            self.abs[h] += e.abs();
            self.sq[h] += e * e;
            if y.abs() >= self.epsilon {
                self.pct[h] += (e / y).abs();
                self.pct_count[h] += 1;
            }
        }
        self.count += preds.len() / self.horizons.max(1);
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.count == 0 || self.horizons == 0 {
            return Err(Error::Empty("metrics input"));
        }
        let n = self.count as f64;
        let mut horizons = Vec::with_capacity(self.horizons);
        for h in 0..self.horizons {
            if self.pct_count[h] == 0 {
                return Err(Error::UndefinedMape { horizon: h });
            }
            horizons.push(HorizonMetrics {
                mae: self.abs[h] / n,
                rmse: math::sqrt(self.sq[h] / n),
                mape: 100.0 * self.pct[h] / self.pct_count[h] as f64,
            });
        }
        let k = self.horizons as f64;
        let masked = self.count * self.horizons - self.pct_count.iter().sum::<usize>();
        Ok(MetricsReport {
            mae: horizons.iter().map(|m| m.mae).sum::<f64>() / k,
            rmse: horizons.iter().map(|m| m.rmse).sum::<f64>() / k,
            mape: horizons.iter().map(|m| m.mape).sum::<f64>() / k,
            horizons,
            masked,
        })
    }
}

/// Metrics of row-major `[n, horizons]` predictions against targets, both
/// on the original scale.
pub fn metrics(preds: &[f64], targets: &[f64], horizons: usize, mask_epsilon: f64) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(horizons, mask_epsilon);
    acc.push(preds, targets)?;
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [1.0, 2.0, 3.0, 4.0];
        let r = metrics(&y, &y, 2, 1e-3).unwrap();
        assert_eq!((r.mae, r.rmse, r.mape), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_fixture() {
        let y = [2.0, 4.0];
        let p = [3.0, 3.0];
        let r = metrics(&p, &y, 1, 1e-3).unwrap();
        assert_eq!((r.mae, r.rmse, r.mape), (1.0, 1.0, 37.5));
    }

    #[test]
    fn masking() {
        let r = metrics(&[1.0, 3.0], &[0.0, 2.0], 1, 0.1).unwrap();
        assert_eq!(r.mape, 50.0);
        assert_eq!(r.masked, 1);
        assert_eq!(
            metrics(&[1.0], &[0.0], 1, 0.1),
            Err(Error::UndefinedMape { horizon: 0 })
        );
    }
}
