use proptest::prelude::*;

use stylefence::evalkit::{roc_auc, tpr_at_fpr, ScoreSet};
use stylefence::verifier::{distance, loss_neg, loss_pos, project_vector, total_loss, LossWeights};
use stylefence::{Verdict, VerifierParams};

fn int_scores(max_len: usize) -> impl Strategy<Value = Vec<i32>> {
    prop::collection::vec(-1000i32..1000, 1..max_len)
}

fn as_f64(v: &[i32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

proptest! {
    #[test]
    fn auc_of_swapped_classes_is_complement(pos in int_scores(40), neg in int_scores(40)) {
        let s = ScoreSet::new(as_f64(&pos), as_f64(&neg)).unwrap();
        let a = roc_auc(&s).unwrap();
        let b = roc_auc(&s.swapped()).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn auc_ignores_strictly_increasing_transforms(pos in int_scores(40), neg in int_scores(40)) {
        let s = ScoreSet::new(as_f64(&pos), as_f64(&neg)).unwrap();
        let cube = |v: &[i32]| v.iter().map(|&x| f64::from(x).powi(3) - 7.0).collect::<Vec<_>>();
        let t = ScoreSet::new(cube(&pos), cube(&neg)).unwrap();
        prop_assert_eq!(roc_auc(&s).unwrap(), roc_auc(&t).unwrap());
        prop_assert_eq!(tpr_at_fpr(&s, 0.1).unwrap(), tpr_at_fpr(&t, 0.1).unwrap());
    }

    #[test]
    fn tpr_grows_with_the_fpr_budget(
        pos in int_scores(60),
        neg in int_scores(60),
        a in 0.001f64..0.999,
        b in 0.001f64..0.999,
    ) {
        let s = ScoreSet::new(as_f64(&pos), as_f64(&neg)).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(tpr_at_fpr(&s, lo).unwrap() <= tpr_at_fpr(&s, hi).unwrap());
    }

    #[test]
    fn verdict_survives_uniform_rescaling(
        v in prop::collection::vec(-3.0f64..3.0, 6),
        center in prop::collection::vec(-1.0f64..1.0, 4),
        radius in 0.0f64..4.0,
        seed in any::<u64>(),
        exp in -4i32..5,
    ) {
        let mut params = VerifierParams::init(6, 4, seed, &LossWeights::default());
        params.center.clone_from(&center);
        let z = project_vector(&v, &params).unwrap();
        let before = Verdict::new("x", distance(z.as_slice().unwrap(), &params.center), radius);

        let c = 2f64.powi(exp);
        params.projection.weight.mapv_inplace(|w| w * c);
        params.center.iter_mut().for_each(|o| *o *= c);
        let z = project_vector(&v, &params).unwrap();
        let after = Verdict::new("x", distance(z.as_slice().unwrap(), &params.center), radius * c);
        prop_assert_eq!(before.inside, after.inside);
    }

    #[test]
    fn positive_loss_rises_and_negative_loss_falls_with_distance(
        d in 0.0f64..50.0,
        step in 0.0f64..10.0,
        margin in 0.0f64..1.0,
    ) {
        let w = LossWeights { margin, ..LossWeights::default() };
        let near = [d];
        let far = [d + step];
        prop_assert!(loss_pos(&near, margin).unwrap() <= loss_pos(&far, margin).unwrap());
        prop_assert!(
            loss_neg(&near, margin, w.beta, w.epsilon).unwrap() >= loss_neg(&far, margin, w.beta, w.epsilon).unwrap()
        );
        prop_assert!(loss_pos(&near, margin).unwrap() >= 0.0);
        prop_assert!(loss_neg(&near, margin, w.beta, w.epsilon).unwrap() >= -w.epsilon.ln_1p());
    }

    #[test]
    fn total_loss_is_linear_in_the_weights(
        pos in prop::collection::vec(0.0f64..10.0, 1..20),
        neg in prop::collection::vec(0.0f64..10.0, 1..20),
        lp in 0.0f64..5.0,
        ln in 0.0f64..5.0,
    ) {
        let base = LossWeights::default();
        let only = |lambda_pos, lambda_neg| {
            total_loss(&pos, &neg, &LossWeights { lambda_pos, lambda_neg, ..base }).unwrap()
        };
        let combined = only(lp, ln);
        let expected = lp * only(1.0, 0.0) + ln * only(0.0, 1.0);
        prop_assert!((combined - expected).abs() <= 1e-9 * (1.0 + expected.abs()));
    }
}
