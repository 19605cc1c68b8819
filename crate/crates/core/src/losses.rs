//! Training and adaptation objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Graph, RealMatrix, Var};

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Input("empty label distribution".into()));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::Domain("label distribution has a negative entry".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("label distribution sums to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::Domain("weights must have positive sum".into()));
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn reversed(&self) -> Self {
        Self(self.0.iter().rev().copied().collect())
    }

    /// `ln(max(p, PROB_FLOOR))` per class.
    pub fn log_floored(&self) -> Vec<f64> {
        self.0.iter().map(|p| p.max(PROB_FLOOR).ln()).collect()
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn as_row(&self) -> RealMatrix {
        RealMatrix::row_vector(self.0.clone())
    }
}

fn check_labels(labels: &[usize], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Input(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    Ok(())
}

/// Mean of `-log softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = g.shape(logits);
    check_labels(labels, n, c)?;
    let mut onehot = RealMatrix::zeros(n, c);
    for (i, &y) in labels.iter().enumerate() {
        onehot.set(i, y, 1.0);
    }
    let logp = g.log_softmax(logits)?;
    let mask = g.constant(onehot);
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / n as f64)
}

/// Cross-entropy on `logits + tau * log(pi_s)`.
pub fn generalized_logit_adjusted(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    pi_s: &LabelDistribution,
    tau: f64,
) -> Result<Var> {
    let c = g.shape(logits).1;
    if pi_s.len() != c {
        return Err(Error::Dimension {
            op: "generalized_logit_adjusted",
            left: g.shape(logits),
            right: (1, pi_s.len()),
        });
    }
    let shift: Vec<f64> = pi_s.log_floored().iter().map(|l| tau * l).collect();
    let ones = g.constant(RealMatrix::ones(1, c));
    let shift = g.constant(RealMatrix::row_vector(shift));
    let adjusted = g.rowwise_affine(logits, ones, shift)?;
    cross_entropy(g, adjusted, labels)
}

/// Balanced softmax: the `tau = 1` case of the logit-adjusted loss.
pub fn balanced_softmax(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    pi_s: &LabelDistribution,
) -> Result<Var> {
    generalized_logit_adjusted(g, logits, labels, pi_s, 1.0)
}

/// Mean Shannon entropy (nats) of the softmax rows.
pub fn entropy_loss(g: &mut Graph, logits: Var) -> Result<Var> {
    let n = g.shape(logits).0;
    let logp = g.log_softmax(logits)?;
    let p = g.exp(logp)?;
    let plogp = g.mul(p, logp)?;
    let total = g.sum(plogp)?;
    g.scale(total, -1.0 / n as f64)
}

/// Mean per-row entropy minus the entropy of the batch-mean prediction.
pub fn info_max_loss(g: &mut Graph, logits: Var) -> Result<Var> {
    let n = g.shape(logits).0;
    if n < 2 {
        return Err(Error::DegenerateBatch { rows: n });
    }
    let ent = entropy_loss(g, logits)?;
    let logp = g.log_softmax(logits)?;
    let p = g.exp(logp)?;
    let mean = g.row_mean(p)?;
    let floored = g.clamp_min(mean, PROB_FLOOR)?;
    let log_mean = g.log(floored)?;
    let plogp = g.mul(mean, log_mean)?;
    let neg_marginal_entropy = g.sum(plogp)?;
    g.add(ent, neg_marginal_entropy)
}

/// Cross-entropy against the constant argmax labels of `logits`.
pub fn pseudo_label_loss(g: &mut Graph, logits: Var) -> Result<Var> {
    let labels = g.value(logits).argmax_rows();
    cross_entropy(g, logits, &labels)
}

/// `logits + log(target_prior) - log(pi_s)`, applied row-wise.
pub fn posthoc_logit_adjust(
    logits: &RealMatrix,
    target_prior: &LabelDistribution,
    pi_s: &LabelDistribution,
) -> Result<RealMatrix> {
    let c = logits.cols();
    if target_prior.len() != c || pi_s.len() != c {
        return Err(Error::Dimension {
            op: "posthoc_logit_adjust",
            left: logits.shape(),
            right: (1, target_prior.len()),
        });
    }
    let lt = target_prior.log_floored();
    let ls = pi_s.log_floored();
    let mut out = logits.clone();
    for r in 0..out.rows() {
        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
            *v += lt[j] - ls[j];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(logits: RealMatrix, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let l = g.constant(logits);
        let out = f(&mut g, l).unwrap();
        g.value(out).item()
    }

    fn row(v: &[f64]) -> RealMatrix {
        RealMatrix::row_vector(v.to_vec())
    }

    #[test]
    fn cross_entropy_cases() {
        let ce = eval(RealMatrix::zeros(1, 4), |g, l| cross_entropy(g, l, &[2]));
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        let ce = eval(row(&[10.0, -10.0]), |g, l| cross_entropy(g, l, &[0]));
        assert!(ce < 1e-8);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let l = g.constant(RealMatrix::zeros(2, 3));
        assert!(matches!(cross_entropy(&mut g, l, &[0, 3]), Err(Error::Input(_))));
    }

    #[test]
    fn gla_uniform_prior_equals_cross_entropy() {
        let logits = RealMatrix::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.0, 0.0, 0.5]]).unwrap();
        let u = LabelDistribution::uniform(3);
        let ce = eval(logits.clone(), |g, l| cross_entropy(g, l, &[1, 2]));
        for tau in [-1.5, 0.0, 1.0, 3.0] {
            let gla = eval(logits.clone(), |g, l| {
                generalized_logit_adjusted(g, l, &[1, 2], &u, tau)
            });
            assert!((gla - ce).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_cases() {
        let e = eval(RealMatrix::zeros(3, 10), entropy_loss);
        assert!((e - 10f64.ln()).abs() < 1e-12);
        let e = eval(row(&[50.0, -50.0]), entropy_loss);
        assert!(e < 1e-20);
    }

    #[test]
    fn info_max_cases() {
        let same = RealMatrix::from_rows(&[vec![0.5, 1.0, -0.3], vec![0.5, 1.0, -0.3]]).unwrap();
        assert!(eval(same, info_max_loss).abs() < 1e-12);
        let split = RealMatrix::from_rows(&[vec![60.0, -60.0], vec![-60.0, 60.0]]).unwrap();
        assert!((eval(split, info_max_loss) + 2f64.ln()).abs() < 1e-12);
        let mut g = Graph::new();
        let l = g.constant(RealMatrix::zeros(1, 3));
        assert!(info_max_loss(&mut g, l).is_err());
    }

    #[test]
    fn pseudo_label_cases() {
        assert!(eval(row(&[20.0, -20.0, -20.0]), pseudo_label_loss) < 1e-8);
        let u = eval(RealMatrix::zeros(2, 4), pseudo_label_loss);
        assert!((u - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn posthoc_identity_and_flip() {
        let logits = RealMatrix::from_rows(&[vec![0.2, -0.7, 1.1]]).unwrap();
        let p = LabelDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        assert_eq!(posthoc_logit_adjust(&logits, &p, &p).unwrap(), logits);

        let src = LabelDistribution::new(vec![0.9, 0.1]).unwrap();
        let tgt = LabelDistribution::new(vec![0.1, 0.9]).unwrap();
        let adj = posthoc_logit_adjust(&RealMatrix::zeros(1, 2), &tgt, &src).unwrap();
        assert_eq!(adj.argmax_rows(), vec![1]);
    }

    #[test]
    fn label_distribution_validation() {
        assert!(LabelDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(LabelDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(LabelDistribution::new(vec![0.25; 4]).is_ok());
        let r = LabelDistribution::new(vec![0.7, 0.2, 0.1]).unwrap().reversed();
        assert_eq!(r.probs(), &[0.1, 0.2, 0.7]);
    }

    proptest::proptest! {
        #[test]
        fn entropy_is_bounded(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let logits = RealMatrix::from_vec(3, 4, vals).unwrap();
            let e = eval(logits, entropy_loss);
            proptest::prop_assert!(e >= -1e-12 && e <= 4f64.ln() + 1e-12);
        }
    }
}
