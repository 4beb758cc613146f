mod support;

use lsccal::losses::{
    class_weight, class_weight_of, dsc_labels, dsc_loss, dsc_loss_grad, joint_loss, weighted_ce_grad, CeMode,
    VoxelPrediction,
};
use proptest::prelude::*;
use support::*;

/// 4³ predictions in the open unit interval with binary targets (at least one foreground).
fn cube() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(0.01f64..0.99, 64), prop::collection::vec(any::<bool>(), 64)).prop_map(|(p, mut g)| {
        g[0] = true;
        (p, g.into_iter().map(|b| b as u8 as f64).collect())
    })
}

proptest! {
    #[test]
    fn dice_loss_is_bounded_and_zero_at_truth((p, g) in cube()) {
        let l = dsc_loss(VoxelPrediction::new(&p, &g).unwrap());
        prop_assert!((0.0..=1.0).contains(&l));
        prop_assert_eq!(dsc_loss(VoxelPrediction::new(&g, &g).unwrap()), 0.0);
    }

    #[test]
    fn dice_metric_is_symmetric(a in prop::collection::vec(0u8..2, 1..100), seed in any::<u64>()) {
        let b: Vec<u8> = a.iter().enumerate().map(|(i, v)| v ^ ((seed >> (i % 64)) & 1) as u8).collect();
        let (ab, ba) = (dsc_labels(&a, &b), dsc_labels(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dsc_labels(&a, &a), 1.0);
    }

    #[test]
    fn joint_loss_is_linear_in_lambda((p, g) in cube(), a1 in prop::collection::vec(0.0f64..1.0, 64), lambda in prop::array::uniform2(0.0f64..1.0)) {
        let aux: [&[f64]; 2] = [&a1, &p];
        let (base, _, _) = joint_loss(&p, &aux, &g, &lambda, CeMode::Balanced).unwrap();
        for k in 0..2 {
            let mut bumped = lambda;
            bumped[k] += 0.5;
            let (l, _, _) = joint_loss(&p, &aux, &g, &bumped, CeMode::Balanced).unwrap();
            let term = base.dsc_aux[k] + base.ce_aux[k];
            prop_assert!(((l.total - base.total) / 0.5 - term).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences((p, g) in cube(), a in prop::collection::vec(0.01f64..0.99, 64)) {
        let mut p = p;
        let all: Vec<usize> = (0..p.len()).collect();
        let w = class_weight_of(&g);

        let (_, grad) = dsc_loss_grad(VoxelPrediction::new(&p, &g).unwrap());
        let num = central_diff(&mut p, &all, |v| dsc_loss(VoxelPrediction::new(v, &g).unwrap()));
        prop_assert!(max_rel_err(&grad, &num, 1e-4) < 1e-6);

        for mode in [CeMode::Balanced, CeMode::Strict] {
            let (_, grad) = weighted_ce_grad(VoxelPrediction::new(&p, &g).unwrap(), w, mode);
            let num = central_diff(&mut p, &all, |v| weighted_ce_grad(VoxelPrediction::new(v, &g).unwrap(), w, mode).0);
            prop_assert!(max_rel_err(&grad, &num, 1e-4) < 1e-6);
        }

        let lambda = [0.5, 0.25];
        let (_, gm, ga) = joint_loss(&p, &[&a, &a], &g, &lambda, CeMode::Balanced).unwrap();
        let num = central_diff(&mut p, &all, |v| joint_loss(v, &[&a, &a], &g, &lambda, CeMode::Balanced).unwrap().0.total);
        prop_assert!(max_rel_err(&gm, &num, 1e-4) < 1e-6);
        let mut a2 = a.clone();
        let num = central_diff(&mut a2, &all, |v| joint_loss(&p, &[&a, v], &g, &lambda, CeMode::Balanced).unwrap().0.total);
        prop_assert!(max_rel_err(&ga[1], &num, 1e-4) < 1e-6);
    }

    #[test]
    fn class_weight_stays_in_unit_range(fg in 0usize..1000, extra in 0usize..1000) {
        let w = class_weight(fg, fg + extra);
        prop_assert!((0.0..=1.0).contains(&w));
    }
}
