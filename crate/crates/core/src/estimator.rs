//! Online estimate of the target label distribution: an exponential moving
//! average of batch-mean predictions, starting from uniform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::RealMatrix;
use crate::losses::LabelDistribution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEstimate {
    y_hat: LabelDistribution,
    step: usize,
    pub alpha: f64,
    pub top_k: Option<usize>,
}

/// `Some(3)` once the label space is large, otherwise no filtering.
pub fn default_top_k(num_classes: usize) -> Option<usize> {
    (num_classes >= 100).then_some(3)
}

impl PriorEstimate {
    pub fn new(num_classes: usize, alpha: f64, top_k: Option<usize>) -> Self {
        Self {
            y_hat: LabelDistribution::uniform(num_classes),
            step: 0,
            alpha,
            top_k,
        }
    }

    pub fn y_hat(&self) -> &LabelDistribution {
        &self.y_hat
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn reset(&mut self) {
        self.y_hat = LabelDistribution::uniform(self.y_hat.len());
        self.step = 0;
    }

    /// Batch mean of the (optionally top-k filtered) probability rows.
    pub fn batch_mean(&self, probs: &RealMatrix) -> Result<Vec<f64>> {
        let c = self.y_hat.len();
        if probs.rows() == 0 {
            return Err(Error::Input("empty batch for prior estimation".into()));
        }
        if probs.cols() != c {
            return Err(Error::Dimension {
                op: "prior_update",
                left: probs.shape(),
                right: (probs.rows(), c),
            });
        }
        let mut mean = vec![0.0; c];
        let mut row = vec![0.0; c];
        for r in 0..probs.rows() {
            row.copy_from_slice(probs.row(r));
            if let Some(k) = self.top_k.filter(|&k| k < c) {
                keep_top_k(&mut row, k);
            }
            for (m, v) in mean.iter_mut().zip(&row) {
                *m += v;
            }
        }
        let n = probs.rows() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(mean)
    }

    /// `Y_t = Y_{t-1} + alpha (ybar_t - Y_{t-1})`, the EMA written so that a
    /// batch mean equal to the current estimate leaves it bit-identical.
    pub fn update(&mut self, probs: &RealMatrix) -> Result<()> {
        let mean = self.batch_mean(probs)?;
        let next: Vec<f64> = self
            .y_hat
            .probs()
            .iter()
            .zip(&mean)
            .map(|(&y, &m)| y + self.alpha * (m - y))
            .collect();
        self.y_hat = LabelDistribution::new(next)?;
        self.step += 1;
        Ok(())
    }
}

/// Zeroes all but the `k` largest entries (ties: lowest index) and rescales
/// the survivors to sum to one.
fn keep_top_k(row: &mut [f64], k: usize) {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    for &i in &order[k..] {
        row[i] = 0.0;
    }
    let s: f64 = row.iter().sum();
    if s > 0.0 {
        row.iter_mut().for_each(|v| *v /= s);
    }
}
