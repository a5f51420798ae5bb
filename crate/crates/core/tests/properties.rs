mod common;

use proptest::prelude::*;

use adapterseg::adapters::{AdaptedModel, AdapterBlock, AdapterKind, AdapterPlan, Variant};
use adapterseg::autodiff::Tensor;
use adapterseg::metrics::{dsc, hd95, iou, Mask};
use adapterseg::model::{ModelConfig, Vlsm};

fn mask_pair(max: usize) -> impl Strategy<Value = (Mask, Mask)> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        (prop::collection::vec(any::<bool>(), h * w), prop::collection::vec(any::<bool>(), h * w))
            .prop_map(move |(a, b)| (Mask::new(h, w, a).unwrap(), Mask::new(h, w, b).unwrap()))
    })
}

proptest! {
    #[test]
    fn metrics_are_symmetric((a, b) in mask_pair(7)) {
        prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
        prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        prop_assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
    }

    #[test]
    fn dsc_and_iou_are_linked((a, b) in mask_pair(7)) {
        let (d, j) = (dsc(&a, &b).unwrap(), iou(&a, &b).unwrap());
        prop_assert!((d - 200.0 * j / (100.0 + j)).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&d) && j <= d + 1e-12);
    }

    #[test]
    fn hd95_matches_brute_force((a, b) in mask_pair(6)) {
        prop_assert!((hd95(&a, &b).unwrap() - common::hd95_brute(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn self_distance_is_zero((a, _) in mask_pair(6)) {
        prop_assert_eq!(hd95(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(dsc(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn zero_output_weights_give_identity(
        d in 1usize..8,
        rows in 1usize..4,
        seed in any::<u64>(),
        vals in prop::collection::vec(-5.0f64..5.0, 32),
    ) {
        let dp = 1 + (seed as usize % d);
        let mut r = adapterseg::rng::seeded(seed);
        // W1 and b1 arbitrary, W2 and b2 zero.
        let mut block = AdapterBlock::new("p", d, dp, &mut r).unwrap();
        let [w1, b1, _, _] = block.params_mut();
        w1.assign((0..d * dp).map(|i| vals[i % 32]).collect());
        b1.assign((0..dp).map(|i| vals[(i + 7) % 32]).collect());
        let x = Tensor::new((0..rows * d).map(|i| vals[(i * 3) % 32]).collect(), &[rows, d]).unwrap();
        let y = block.forward(&x).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }
}

#[test]
fn adapted_tiny_model_is_identity_at_init_for_random_inputs() {
    let cfg = ModelConfig::tiny();
    let backbone = Vlsm::new(cfg.clone(), 5).unwrap();
    let plain = AdaptedModel::attach(AdapterPlan::new(Variant::V, AdapterKind::Dense, 2), backbone.clone(), 0).unwrap();
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(16));
    runner
        .run(&(prop::collection::vec(0.0f64..1.0, cfg.image_size * cfg.image_size * 3), "[a-z ]{0,30}"), |(px, prompt)| {
            let image = Tensor::new(px, &[cfg.image_size, cfg.image_size, 3]).unwrap();
            let ids = backbone.tokenizer().encode(&prompt);
            let reference = backbone.forward(&image, &ids).unwrap();
            for kind in [AdapterKind::Shallow, AdapterKind::Dense] {
                let m = AdaptedModel::attach(AdapterPlan::new(Variant::VLC, kind, 2), backbone.clone(), 9).unwrap();
                prop_assert_eq!(m.forward(&image, &ids).unwrap().to_vec(), reference.to_vec());
            }
            prop_assert_eq!(plain.forward(&image, &ids).unwrap().to_vec(), reference.to_vec());
            Ok(())
        })
        .unwrap();
}
