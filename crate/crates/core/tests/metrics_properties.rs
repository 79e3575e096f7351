use dragevo::metrics::{
    average_ranks, combined_score, fitness_value, reliability, sign_accuracy, spearman, FitnessWeights, ScoreWeights,
};
use dragevo::taskbench::PairSet;
use proptest::prelude::*;

fn unit() -> impl Strategy<Value = f64> {
    0.0f64..=1.0
}

fn err() -> impl Strategy<Value = f64> {
    0.0f64..1.0
}

proptest! {
    #[test]
    fn combined_score_is_strictly_monotone(s in 0.0f64..0.99, mae in err(), rmse in err(), d in 1e-4f64..0.01) {
        let w = ScoreWeights::default();
        let base = combined_score(s, mae, rmse, &w).unwrap();
        prop_assert!(combined_score(s + d, mae, rmse, &w).unwrap() > base);
        prop_assert!(combined_score(s, mae + d, rmse, &w).unwrap() < base);
        prop_assert!(combined_score(s, mae, rmse + d, &w).unwrap() < base);
    }

    #[test]
    fn combined_score_is_bounded_by_weight_sum(s in unit(), mae in err(), rmse in err()) {
        let w = ScoreWeights::default();
        let v = combined_score(s, mae, rmse, &w).unwrap();
        prop_assert!(v > 0.0 && v <= w.alpha + w.beta + w.gamma + 1e-15);
    }

    #[test]
    fn reliability_is_at_most_one(scores in prop::collection::vec(unit(), 2..6)) {
        let r = reliability(&scores).unwrap();
        prop_assert!(r <= 1.0);
        let identical = scores.iter().all(|s| *s == scores[0]);
        prop_assert_eq!(r == 1.0, identical);
    }

    #[test]
    fn shifting_rho_preserves_fitness_order(
        cands in prop::collection::vec((-1.0f64..1.0, 0.5f64..1.0, 0usize..5000), 2..8),
        shift in -0.5f64..0.5,
    ) {
        let w = FitnessWeights::default();
        let f: Vec<f64> = cands.iter().map(|&(r, rel, p)| fitness_value(r, rel, p, &w)).collect();
        let g: Vec<f64> = cands.iter().map(|&(r, rel, p)| fitness_value(r + shift, rel, p, &w)).collect();
        for i in 0..f.len() {
            prop_assert!((g[i] - f[i] - w.accuracy * shift).abs() < 1e-12);
            for j in 0..f.len() {
                if (f[i] - f[j]).abs() > 1e-9 {
                    prop_assert_eq!(f[i] > f[j], g[i] > g[j]);
                }
            }
        }
    }

    #[test]
    fn spearman_ignores_monotone_transforms(
        pred in prop::collection::vec(-5.0f64..5.0, 3..20),
        labels in prop::collection::vec(-5.0f64..5.0, 20),
    ) {
        let labels = &labels[..pred.len()];
        if let Ok(rho) = spearman(&pred, labels) {
            let warped: Vec<f64> = pred.iter().map(|p| p.exp() * 3.0 + 1.0).collect();
            prop_assert!((spearman(&warped, labels).unwrap() - rho).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&rho));
        }
    }

    #[test]
    fn ranks_sum_to_triangle_number(values in prop::collection::vec(0u8..5, 1..20)) {
        let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        let n = v.len() as f64;
        prop_assert!((average_ranks(&v).iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_predictions_have_full_sign_accuracy(labels in prop::collection::vec(0.2f64..0.4, 2..20)) {
        let pairs = PairSet::from_labels(&labels, 1e-6);
        if !pairs.is_empty() {
            prop_assert_eq!(sign_accuracy(&labels, &labels, &pairs).unwrap(), 1.0);
            let flipped: Vec<f64> = labels.iter().map(|y| -y).collect();
            prop_assert_eq!(sign_accuracy(&flipped, &labels, &pairs).unwrap(), 0.0);
        }
    }
}
