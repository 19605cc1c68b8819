//! Normalization layers with the statistic regimes used at test time:
//! source running statistics, test-batch statistics, and instance-aware
//! correction (IABN) that only follows the batch when it deviates beyond a
//! soft-shrinkage threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Graph, RealMatrix, Var};

/// Floor applied to variances before taking the inverse square root.
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Batch statistics, running statistics updated with `momentum_stats`.
    Train,
    EvalSource,
    EvalBatch,
    EvalIabn,
}

impl NormMode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, NormMode::EvalSource)
    }
}

/// How a forward pass treats every normalization layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormContext {
    pub mode: NormMode,
    /// Whether `Train` and `EvalIabn` may write their running statistics.
    pub update_stats: bool,
}

impl NormContext {
    pub fn new(mode: NormMode) -> Self {
        Self {
            mode,
            update_stats: true,
        }
    }

    pub fn frozen(mode: NormMode) -> Self {
        Self {
            mode,
            update_stats: false,
        }
    }
}

/// Hyperparameters shared by every normalization layer of a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub momentum_stats: f64,
    /// IABN soft-shrinkage width.
    pub alpha_shrink: f64,
    /// IABN running-statistics momentum.
    pub m_iabn: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            momentum_stats: 0.1,
            alpha_shrink: 4.0,
            m_iabn: 0.01,
        }
    }
}

/// Running statistics and hyperparameters of one normalization layer. The
/// affine `gamma`/`beta` live in the owning [`crate::model::ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    pub running_mean: RealMatrix,
    pub running_var: RealMatrix,
    pub config: NormConfig,
}

/// `sign(x) * max(|x| - lambda, 0)`.
pub fn soft_shrink(x: f64, lambda: f64) -> f64 {
    x.signum() * (x.abs() - lambda).max(0.0)
}

impl NormLayer {
    pub fn new(width: usize, config: NormConfig) -> Self {
        Self {
            running_mean: RealMatrix::zeros(1, width),
            running_var: RealMatrix::ones(1, width),
            config,
        }
    }

    pub fn width(&self) -> usize {
        self.running_mean.cols()
    }

    /// Normalizes `x` (n×d) under `ctx.mode`, then applies `gamma`, `beta`.
    pub fn normalize(
        &mut self,
        g: &mut Graph,
        x: Var,
        gamma: Var,
        beta: Var,
        ctx: NormContext,
    ) -> Result<Var> {
        let (n, d) = g.shape(x);
        if d != self.width() {
            return Err(Error::Dimension {
                op: "normalize",
                left: (n, d),
                right: (1, self.width()),
            });
        }
        if ctx.mode.uses_batch_stats() && n < 2 {
            return Err(Error::DegenerateBatch { rows: n });
        }

        let standardized = match ctx.mode {
            NormMode::EvalSource => {
                let mean = g.constant(self.running_mean.clone());
                let var = g.constant(self.running_var.clone());
                standardize(g, x, mean, var)?
            }
            NormMode::Train | NormMode::EvalBatch => {
                let (mean, var) = batch_stats(g, x)?;
                let out = standardize(g, x, mean, var)?;
                if ctx.mode == NormMode::Train && ctx.update_stats {
                    let m = self.config.momentum_stats;
                    self.update_running(g.value(mean), g.value(var), n, m);
                }
                out
            }
            NormMode::EvalIabn => {
                let (batch_mean, batch_var) = batch_stats(g, x)?;
                let alpha = self.config.alpha_shrink;
                let run_mean = g.constant(self.running_mean.clone());
                let run_var = g.constant(self.running_var.clone());
                let nf = n as f64;
                let lambda_mean = self.running_var.map(|s2| alpha * (s2 / nf).sqrt());
                let lambda_var = self
                    .running_var
                    .map(|s2| alpha * (2.0 * s2 * s2 / (nf - 1.0)).sqrt());
                let lambda_mean = nan_to_inf(lambda_mean);
                let lambda_var = nan_to_inf(lambda_var);

                let dev = g.sub(batch_mean, run_mean)?;
                let dev = g.soft_shrink(dev, lambda_mean)?;
                let mean = g.add(run_mean, dev)?;
                let dev = g.sub(batch_var, run_var)?;
                let dev = g.soft_shrink(dev, lambda_var)?;
                let var = g.add(run_var, dev)?;
                let out = standardize(g, x, mean, var)?;
                if ctx.update_stats {
                    let m = self.config.m_iabn;
                    let (cm, cv) = (g.value(mean).clone(), g.value(var).clone());
                    self.update_corrected(&cm, &cv, m);
                }
                out
            }
        };
        g.rowwise_affine(standardized, gamma, beta)
    }

    /// Corrected (mean, var) that `EvalIabn` would use for `x`, without
    /// touching the running statistics.
    pub fn iabn_statistics(&self, x: &RealMatrix) -> (Vec<f64>, Vec<f64>) {
        let n = x.rows() as f64;
        let alpha = self.config.alpha_shrink;
        let mean_b = x.col_means();
        let mut var_b = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (j, v) in x.row(r).iter().enumerate() {
                let c = v - mean_b.data()[j];
                var_b[j] += c * c / n;
            }
        }
        let mut mean = Vec::with_capacity(x.cols());
        let mut var = Vec::with_capacity(x.cols());
        for j in 0..x.cols() {
            let mu = self.running_mean.data()[j];
            let s2 = self.running_var.data()[j];
            let lm = alpha * (s2 / n).sqrt();
            let lv = alpha * (2.0 * s2 * s2 / (n - 1.0)).sqrt();
            mean.push(mu + soft_shrink(mean_b.data()[j] - mu, lm));
            var.push(s2 + soft_shrink(var_b[j] - s2, lv));
        }
        (mean, var)
    }

    // The corrected statistics already mix in the unbiased running variance.
    fn update_corrected(&mut self, mean: &RealMatrix, var: &RealMatrix, momentum: f64) {
        for j in 0..self.width() {
            let rm = &mut self.running_mean.data_mut()[j];
            *rm = (1.0 - momentum) * *rm + momentum * mean.data()[j];
            let rv = &mut self.running_var.data_mut()[j];
            *rv = ((1.0 - momentum) * *rv + momentum * var.data()[j]).max(VAR_FLOOR);
        }
    }

    fn update_running(&mut self, mean: &RealMatrix, var: &RealMatrix, n: usize, momentum: f64) {
        let unbias = n as f64 / (n as f64 - 1.0);
        for j in 0..self.width() {
            let rm = &mut self.running_mean.data_mut()[j];
            *rm = (1.0 - momentum) * *rm + momentum * mean.data()[j];
            let rv = &mut self.running_var.data_mut()[j];
            *rv = ((1.0 - momentum) * *rv + momentum * var.data()[j] * unbias).max(VAR_FLOOR);
        }
    }
}

// alpha = inf with a zero variance would give inf * 0 = NaN.
fn nan_to_inf(m: RealMatrix) -> RealMatrix {
    m.map(|v| if v.is_nan() { f64::INFINITY } else { v })
}

/// Batch mean (1×d) and biased batch variance (1×d) as graph nodes.
pub fn batch_stats(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    let d = g.shape(x).1;
    let mean = g.row_mean(x)?;
    let neg_mean = g.scale(mean, -1.0)?;
    let ones = g.constant(RealMatrix::ones(1, d));
    let centered = g.rowwise_affine(x, ones, neg_mean)?;
    let sq = g.mul(centered, centered)?;
    let var = g.row_mean(sq)?;
    Ok((mean, var))
}

/// `(x - mean) / sqrt(max(var, VAR_FLOOR))` with row-broadcast statistics.
pub fn standardize(g: &mut Graph, x: Var, mean: Var, var: Var) -> Result<Var> {
    let d = g.shape(x).1;
    let ones = g.constant(RealMatrix::ones(1, d));
    let zeros = g.constant(RealMatrix::zeros(1, d));
    let neg_mean = g.scale(mean, -1.0)?;
    let centered = g.rowwise_affine(x, ones, neg_mean)?;
    let floored = g.clamp_min(var, VAR_FLOOR)?;
    let inv_std = g.powf(floored, -0.5)?;
    g.rowwise_affine(centered, inv_std, zeros)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::check::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> RealMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        RealMatrix::from_vec(rows, cols, data).unwrap()
    }

    fn layer_with_stats(d: usize, seed: u64) -> NormLayer {
        let mut layer = NormLayer::new(d, NormConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for j in 0..d {
            layer.running_mean.data_mut()[j] = rng.random_range(-0.5..0.5);
            layer.running_var.data_mut()[j] = rng.random_range(0.5..2.0);
        }
        layer
    }

    fn run(layer: &mut NormLayer, x: &RealMatrix, mode: NormMode) -> RealMatrix {
        let d = x.cols();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gamma = g.constant(RealMatrix::ones(1, d));
        let beta = g.constant(RealMatrix::zeros(1, d));
        let out = layer
            .normalize(&mut g, xv, gamma, beta, NormContext::frozen(mode))
            .unwrap();
        g.value(out).clone()
    }

    #[test]
    fn eval_batch_standardizes_columns() {
        let x = random(16, 5, 1).map(|v| 3.0 * v + 1.0);
        let mut layer = NormLayer::new(5, NormConfig::default());
        let out = run(&mut layer, &x, NormMode::EvalBatch);
        let mean = out.col_means();
        for j in 0..5 {
            assert!(mean.data()[j].abs() < 1e-10);
            let var: f64 = (0..16).map(|r| out.get(r, j).powi(2)).sum::<f64>() / 16.0;
            assert!((var - 1.0).abs() < 1e-8, "var {var}");
        }
    }

    #[test]
    fn iabn_infinite_alpha_is_source() {
        let x = random(12, 4, 2);
        let mut layer = layer_with_stats(4, 3);
        layer.config.alpha_shrink = f64::INFINITY;
        let iabn = run(&mut layer, &x, NormMode::EvalIabn);
        let source = run(&mut layer, &x, NormMode::EvalSource);
        assert_eq!(iabn, source);
    }

    #[test]
    fn iabn_zero_alpha_is_batch() {
        let x = random(12, 4, 4).map(|v| v * 1.7 + 0.3);
        let mut layer = layer_with_stats(4, 5);
        layer.config.alpha_shrink = 0.0;
        let iabn = run(&mut layer, &x, NormMode::EvalIabn);
        let batch = run(&mut layer, &x, NormMode::EvalBatch);
        assert!(iabn.max_abs_diff(&batch) < 1e-12);
    }

    #[test]
    fn eval_source_is_pure() {
        let x = random(8, 3, 6);
        let mut layer = layer_with_stats(3, 7);
        let before = layer.clone();
        let a = run(&mut layer, &x, NormMode::EvalSource);
        let b = run(&mut layer, &x, NormMode::EvalSource);
        assert_eq!(a, b);
        assert_eq!(layer, before);
    }

    #[test]
    fn degenerate_batch_rejected() {
        let x = random(1, 3, 8);
        let mut layer = NormLayer::new(3, NormConfig::default());
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.constant(RealMatrix::ones(1, 3));
        let beta = g.constant(RealMatrix::zeros(1, 3));
        for mode in [NormMode::Train, NormMode::EvalBatch, NormMode::EvalIabn] {
            let r = layer.normalize(&mut g, xv, gamma, beta, NormContext::new(mode));
            assert!(matches!(r, Err(Error::DegenerateBatch { rows: 1 })));
        }
        assert!(layer
            .normalize(&mut g, xv, gamma, beta, NormContext::new(NormMode::EvalSource))
            .is_ok());
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let x = random(10, 2, 9).map(|v| v + 5.0);
        let mut layer = NormLayer::new(2, NormConfig::default());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gamma = g.constant(RealMatrix::ones(1, 2));
        let beta = g.constant(RealMatrix::zeros(1, 2));
        layer
            .normalize(&mut g, xv, gamma, beta, NormContext::new(NormMode::Train))
            .unwrap();
        let mean = x.col_means();
        for j in 0..2 {
            assert!((layer.running_mean.data()[j] - 0.1 * mean.data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_gradients_every_mode() {
        let x = random(6, 3, 10);
        let weights = random(6, 3, 11);
        for mode in [
            NormMode::Train,
            NormMode::EvalSource,
            NormMode::EvalBatch,
            NormMode::EvalIabn,
        ] {
            let layer = layer_with_stats(3, 12);
            let inputs = vec![x.clone(), random(1, 3, 13), random(1, 3, 14)];
            let w = weights.clone();
            let res = check_gradients(&inputs, 1e-5, |g, v| {
                let mut layer = layer.clone();
                let out = layer.normalize(g, v[0], v[1], v[2], NormContext::frozen(mode))?;
                let wc = g.constant(w.clone());
                let prod = g.mul(out, wc)?;
                g.sum(prod)
            })
            .unwrap();
            assert!(res.max_rel_err < 1e-4, "{mode:?}: {}", res.max_rel_err);
        }
    }

    proptest::proptest! {
        #[test]
        fn iabn_mean_between_running_and_batch(seed in 0u64..10_000, alpha in 0.0f64..8.0) {
            let x = random(8, 4, seed);
            let mut layer = layer_with_stats(4, seed + 1);
            layer.config.alpha_shrink = alpha;
            let (mean, _) = layer.iabn_statistics(&x);
            let batch = x.col_means();
            for j in 0..4 {
                let lo = layer.running_mean.data()[j].min(batch.data()[j]);
                let hi = layer.running_mean.data()[j].max(batch.data()[j]);
                proptest::prop_assert!(mean[j] >= lo - 1e-15 && mean[j] <= hi + 1e-15);
            }
        }
    }
}
