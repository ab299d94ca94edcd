use proptest::prelude::*;
use revi_core::data::{assign_kinds, generate_sample, Kind, KindMix};
use revi_core::loss::{dilate3, edge_loss, edge_mask, total_loss, LossConfig};
use revi_core::metrics::{auc, best_f1, threshold, THRESHOLDS};
use revi_core::optim::{cosine_lr, OptimConfig};
use revi_core::{Tape, Tensor};

fn scored_pixels() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=64).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![(0u32..=16).prop_map(|k| k as f64 / 16.0), 0.0f64..=1.0], n),
            prop::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f64), n),
        )
    })
}

fn mask(side: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::bool::weighted(0.3), side * side)
        .prop_map(move |v| Tensor::new(&[1, side, side], v.into_iter().map(|b| b as u8 as f64).collect()).unwrap())
}

fn losses(logits: &Tensor, gt: &Tensor, lambda: f64) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone(), true);
    let cfg = LossConfig {
        lambda_edge: lambda,
        ..LossConfig::default()
    };
    let parts = total_loss(&mut tape, x, gt, &cfg).unwrap();
    (
        tape.value(parts.total).item(),
        tape.value(parts.bce).item(),
        tape.value(parts.edge).item(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn best_f1_dominates_every_grid_threshold((p, g) in scored_pixels()) {
        let (best, t) = best_f1(&p, &g);
        prop_assert!((0.0..=1.0).contains(&best));
        prop_assert!((1..=THRESHOLDS).any(|i| threshold(i) == t));
        for i in 1..=THRESHOLDS {
            prop_assert!(revi_core::metrics::f1_at(&p, &g, threshold(i)) <= best);
        }
    }

    #[test]
    fn auc_ignores_strictly_increasing_transforms((p, g) in scored_pixels()) {
        prop_assume!(g.contains(&1.0) && g.contains(&0.0));
        let base = auc(&p, &g).unwrap();
        let cubed: Vec<f64> = p.iter().map(|v| v * v * v).collect();
        let squashed: Vec<f64> = p.iter().map(|v| 1.0 / (1.0 + (-4.0 * v).exp())).collect();
        prop_assert_eq!(base, auc(&cubed, &g).unwrap());
        prop_assert_eq!(base, auc(&squashed, &g).unwrap());
        let flipped: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
        prop_assert!((auc(&flipped, &g).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn edge_band_lies_inside_the_dilation_and_is_complement_symmetric(m in mask(9)) {
        let edge = edge_mask(&m).unwrap();
        let dil = dilate3(&m).unwrap();
        for (e, d) in edge.data().iter().zip(dil.data()) {
            prop_assert!(*e == 0.0 || *e == 1.0);
            prop_assert!(*e <= *d);
        }
        let inverse = m.map(|v| 1.0 - v);
        prop_assert_eq!(edge_mask(&inverse).unwrap(), edge);
    }

    #[test]
    fn total_loss_is_affine_in_the_edge_weight(m in mask(8), seed in 0u64..1000, lambda in 0.0f64..50.0) {
        let logits = Tensor::normal(&[1, 8, 8], 3.0, &mut revi_core::rng::stream(seed, "logits", 0));
        let (total, bce, edge) = losses(&logits, &m, lambda);
        prop_assert!((total - (bce + lambda * edge)).abs() <= 1e-12 * (1.0 + total.abs()));
        let (_, bce0, edge0) = losses(&logits, &m, 0.0);
        prop_assert_eq!(bce, bce0);
        prop_assert_eq!(edge, edge0);
    }

    #[test]
    fn cosine_schedule_is_monotone_and_bounded(total in 1usize..3000) {
        let cfg = OptimConfig { total_steps: total, ..OptimConfig::default() };
        let mut prev = f64::INFINITY;
        for step in 0..=total {
            let lr = cosine_lr(step, &cfg).unwrap();
            prop_assert!(lr <= prev && lr >= cfg.lr_min && lr <= cfg.lr_init);
            prev = lr;
        }
        prop_assert!(cosine_lr(total + 1, &cfg).is_err());
    }
}

#[test]
fn saturated_correct_logits_have_almost_no_edge_loss() {
    let mut rng = revi_core::rng::stream(12, "masks", 0);
    for _ in 0..10 {
        let gt = Tensor::from_fn(&[1, 12, 12], |_| rand::Rng::random_bool(&mut rng, 0.4) as u8 as f64);
        let logits = gt.map(|v| if v == 1.0 { 20.0 } else { -20.0 });
        let mut tape = Tape::new();
        let x = tape.leaf(logits, true);
        let loss = edge_loss(&mut tape, x, &gt, 1e-7).unwrap();
        assert!(tape.value(loss).item() < 0.05);
    }
}

#[test]
fn split_kind_ratios_follow_the_mix() {
    let mix = KindMix::default();
    for total in [4, 10, 101, 2000] {
        let kinds = assign_kinds(3, "train", total, &mix);
        assert_eq!(kinds.len(), total);
        for k in Kind::ALL {
            let count = kinds.iter().filter(|&&x| x == k).count() as f64;
            assert!((count - total as f64 / 4.0).abs() <= 1.0, "{k}: {count} of {total}");
        }
    }
    let manipulated = assign_kinds(3, "train", 99, &KindMix::manipulated_only());
    assert!(manipulated.iter().all(|&k| k != Kind::Authentic));
}

#[test]
fn manipulated_samples_carry_a_nonempty_bounded_mask() {
    for seed in 0..40 {
        for kind in [Kind::CopyMove, Kind::Splice, Kind::Removal] {
            let s = generate_sample(seed, kind, 64);
            let area = s.mask.data().iter().sum::<f64>() / (64.0 * 64.0);
            assert!(area > 0.0 && area <= 0.5, "{kind} seed {seed}: {area}");
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let clean = generate_sample(seed, Kind::Authentic, 64);
        assert!(clean.mask.data().iter().all(|&v| v == 0.0));
    }
}
