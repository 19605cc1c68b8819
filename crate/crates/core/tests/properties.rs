use proptest::prelude::*;

use shiftadapt::adapter::{inverse_distribution, MappingVector};
use shiftadapt::estimator::PriorEstimate;
use shiftadapt::gradcore::check::check_gradients;
use shiftadapt::losses::{self, posthoc_logit_adjust};
use shiftadapt::shiftbench::apportion;
use shiftadapt::{Graph, LabelDistribution, RealMatrix};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = RealMatrix> {
    proptest::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| RealMatrix::from_vec(rows, cols, d).unwrap())
}

fn distribution(c: usize) -> impl Strategy<Value = LabelDistribution> {
    proptest::collection::vec(0.01f64..1.0, c).prop_map(|w| LabelDistribution::from_weights(&w).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(4, 6).prop_map(|m| m.map(|v| 20.0 * v))) {
        let p = x.softmax_rows();
        for r in 0..p.rows() {
            prop_assert!(p.row(r).iter().all(|&v| v >= 0.0));
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn head_style_chain_gradients(x in matrix(3, 4), w in matrix(4, 5), gamma in matrix(1, 4), beta in matrix(1, 4)) {
        let check = check_gradients(&[x, w, gamma, beta], 1e-5, |g, v| {
            let h = g.rowwise_affine(v[0], v[2], v[3])?;
            let z = g.matmul(h, v[1])?;
            losses::entropy_loss(g, z)
        }).unwrap();
        prop_assert!(check.max_rel_err <= 1e-4, "{}", check.max_rel_err);
    }

    #[test]
    fn logit_adjusted_ce_gradients(z in matrix(5, 4), pi in distribution(4), tau in -2.0f64..2.0) {
        let labels = [0, 1, 2, 3, 1];
        let check = check_gradients(&[z], 1e-5, |g, v| {
            losses::generalized_logit_adjusted(g, v[0], &labels, &pi, tau)
        }).unwrap();
        prop_assert!(check.max_rel_err <= 1e-4, "{}", check.max_rel_err);
    }

    #[test]
    fn relu_gradient_away_from_kink(x in matrix(3, 3)) {
        prop_assume!(x.data().iter().all(|v| v.abs() > 1e-3));
        let check = check_gradients(&[x], 1e-5, |g, v| {
            let r = g.relu(v[0])?;
            let s = g.mul(r, r)?;
            g.sum(s)
        }).unwrap();
        prop_assert!(check.max_rel_err <= 1e-4);
    }

    #[test]
    fn entropy_within_bounds(z in matrix(6, 5).prop_map(|m| m.map(|v| 10.0 * v))) {
        let mut g = Graph::new();
        let zv = g.constant(z);
        let h = losses::entropy_loss(&mut g, zv).unwrap();
        let h = g.value(h).item();
        prop_assert!(h >= -1e-12 && h <= 5f64.ln() + 1e-12);
    }

    #[test]
    fn posthoc_with_matching_priors_is_identity(z in matrix(4, 6), pi in distribution(6)) {
        let out = posthoc_logit_adjust(&z, &pi, &pi).unwrap();
        prop_assert_eq!(out, z);
    }

    #[test]
    fn estimate_fixed_point_and_validity(
        rows in proptest::collection::vec(distribution(5), 1..20),
        alpha in 0.0f64..1.0,
    ) {
        let mut est = PriorEstimate::new(5, alpha, None);
        for r in &rows {
            est.update(&RealMatrix::row_vector(r.probs().to_vec())).unwrap();
            let y = est.y_hat().probs();
            prop_assert!(y.iter().all(|&v| v >= 0.0));
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        let current = est.y_hat().clone();
        est.update(&RealMatrix::row_vector(current.probs().to_vec())).unwrap();
        for (a, b) in est.y_hat().probs().iter().zip(current.probs()) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn apportion_is_exact_largest_remainder(pi in distribution(7), total in 0usize..5000) {
        let counts = apportion(&pi, total);
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        for (c, p) in counts.iter().zip(pi.probs()) {
            prop_assert!((*c as f64 - p * total as f64).abs() < 1.0);
        }
    }

    #[test]
    fn mapping_spans_head_to_tail(pi in distribution(8), c in 2usize..40) {
        let m = MappingVector::from_source(&pi);
        prop_assert!(m.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        let grid = MappingVector::from_source(&LabelDistribution::uniform(c));
        prop_assert!(grid.map(&LabelDistribution::uniform(c)).unwrap().abs() <= 1e-12);
        let inv = inverse_distribution(&pi);
        // The inverse distribution leans to the classes mapped toward +1.
        prop_assert!(m.map(&inv).unwrap() >= m.map(&pi).unwrap() - 1e-12);
    }
}
