use proptest::prelude::*;

use cada::metrics::{cdr, dice, fill_holes, vertical_diameter, Region};
use cada::nn::{activation, ema_update, poly_lr, IntTensor, ParamKind, ParamSet, Tape, Tensor};
use cada::segnet::{build_segnet, forward_eval, predict_mask, SegNetConfig, NUM_CLASSES, NUM_SCALES};
use cada::synth::{augment_with, AugmentConfig};

fn mask_strategy(max_side: usize) -> impl Strategy<Value = IntTensor> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(0u8..3, h * w).prop_map(move |d| IntTensor::new([h, w], d).unwrap())
    })
}

fn mask_pair(max_side: usize) -> impl Strategy<Value = (IntTensor, IntTensor)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        let v = || prop::collection::vec(0u8..3, h * w).prop_map(move |d| IntTensor::new([h, w], d).unwrap());
        (v(), v())
    })
}

fn flip_vertical(m: &IntTensor) -> IntTensor {
    let (h, w) = m.hw();
    let d = m.data();
    let out = (0..h).rev().flat_map(|y| d[y * w..(y + 1) * w].to_vec()).collect();
    IntTensor::new([h, w], out).unwrap()
}

fn flip_horizontal(m: &IntTensor) -> IntTensor {
    let (h, w) = m.hw();
    let d = m.data();
    let out = (0..h).flat_map(|y| (0..w).rev().map(move |x| d[y * w + x])).collect();
    IntTensor::new([h, w], out).unwrap()
}

/// Embeds `m` in a larger zero canvas at offset (dy, dx).
fn translate(m: &IntTensor, dy: usize, dx: usize) -> IntTensor {
    let (h, w) = m.hw();
    let (hh, ww) = (h + dy + 2, w + dx + 2);
    let mut out = vec![0u8; hh * ww];
    for y in 0..h {
        for x in 0..w {
            out[(y + dy) * ww + x + dx] = m.data()[y * w + x];
        }
    }
    IntTensor::new([hh, ww], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dice_is_symmetric_and_bounded((a, b) in mask_pair(12)) {
        for region in [Region::Disc, Region::Cup] {
            let ab = dice(&a, &b, region).unwrap();
            let ba = dice(&b, &a, region).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(dice(&a, &a, region).unwrap(), 1.0);
        }
    }

    #[test]
    fn fill_holes_is_idempotent_and_only_grows(m in mask_strategy(14)) {
        let once = fill_holes(&m);
        prop_assert_eq!(&fill_holes(&once), &once);
        for (&before, &after) in m.data().iter().zip(once.data()) {
            for region in [Region::Disc, Region::Cup] {
                if region.contains(before) {
                    prop_assert!(region.contains(after));
                }
            }
        }
    }

    #[test]
    fn vertical_diameter_ignores_translation_and_flips(m in mask_strategy(10), dy in 0usize..5, dx in 0usize..5) {
        for region in [Region::Disc, Region::Cup] {
            let d = vertical_diameter(&m, region);
            prop_assert!(d <= m.hw().0);
            prop_assert_eq!(vertical_diameter(&translate(&m, dy, dx), region), d);
            prop_assert_eq!(vertical_diameter(&flip_vertical(&m), region), d);
            prop_assert_eq!(vertical_diameter(&flip_horizontal(&m), region), d);
        }
        let (ratio, empty) = cdr(&m);
        prop_assert!((0.0..=1.0).contains(&ratio));
        prop_assert_eq!(empty, vertical_diameter(&m, Region::Disc) == 0);
    }

    #[test]
    fn augment_stays_in_unit_range(
        data in prop::collection::vec(0.0f32..=1.0, 3 * 4 * 4),
        seed in any::<u64>(),
        noise in 0.0f64..0.5,
        gain_lo in 0.5f64..1.0,
        gain_span in 0.0f64..1.0,
        offset in 0.0f64..0.3,
    ) {
        let image = Tensor::new([3, 4, 4], data).unwrap();
        let cfg = AugmentConfig { noise_sigma_max: noise, gain: (gain_lo, gain_lo + gain_span), offset: (-offset, offset) };
        let out = augment_with(&image, seed, &cfg);
        prop_assert_eq!(out.shape(), image.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(augment_with(&image, seed, &cfg).into_data(), out.into_data());
    }

    #[test]
    fn identity_augment_is_a_no_op(data in prop::collection::vec(0.0f32..=1.0, 3 * 2 * 5), seed in any::<u64>()) {
        let image = Tensor::new([3, 2, 5], data).unwrap();
        prop_assert_eq!(augment_with(&image, seed, &AugmentConfig::identity()).into_data(), image.into_data());
    }

    #[test]
    fn poly_lr_is_non_increasing_and_non_negative(base in 0.0f64..1.0, max_iter in 1u64..500, power in 0.1f64..3.0) {
        let mut prev = f64::INFINITY;
        for it in 0..=max_iter {
            let lr = poly_lr(base, it, max_iter, power).unwrap();
            prop_assert!(lr >= 0.0 && lr <= base);
            prop_assert!(lr <= prev);
            prev = lr;
        }
        prop_assert_eq!(poly_lr(base, 0, max_iter, power).unwrap(), base);
        prop_assert_eq!(poly_lr(base, max_iter, max_iter, power).unwrap(), 0.0);
        prop_assert!(poly_lr(base, max_iter + 1, max_iter, power).is_err());
    }

    #[test]
    fn ema_stays_between_teacher_and_student(
        t in prop::collection::vec(-5.0f64..5.0, 6),
        s in prop::collection::vec(-5.0f64..5.0, 6),
        alpha in 0.0f64..=1.0,
    ) {
        let set = |v: &[f64]| {
            let mut ps = ParamSet::new();
            ps.insert("w", Tensor::new([6], v.to_vec()).unwrap(), ParamKind::Trainable).unwrap();
            ps
        };
        let mut teacher = set(&t);
        ema_update(&mut teacher, &set(&s), alpha).unwrap();
        for ((&new, &a), &b) in teacher.value("w").unwrap().data().iter().zip(&t).zip(&s) {
            prop_assert!(new >= a.min(b) - 1e-12 && new <= a.max(b) + 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-20.0f64..20.0, 2 * NUM_CLASSES * 3 * 2)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([2, NUM_CLASSES, 3, 2], data).unwrap());
        let p = activation::softmax(x).unwrap();
        let v = p.value();
        for n in 0..2 {
            for pix in 0..6 {
                let sum: f64 = (0..NUM_CLASSES).map(|c| v.data()[(n * NUM_CLASSES + c) * 6 + pix]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_mask_picks_a_maximum(data in prop::collection::vec(-3.0f32..3.0, NUM_CLASSES * 4 * 3)) {
        let logits = Tensor::new([1, NUM_CLASSES, 4, 3], data.clone()).unwrap();
        let mask = predict_mask(&logits).unwrap();
        prop_assert_eq!(mask.shape(), &[1, 4, 3][..]);
        for (p, &label) in mask.data().iter().enumerate() {
            let best = (0..NUM_CLASSES).map(|c| data[c * 12 + p]).fold(f32::MIN, f32::max);
            prop_assert_eq!(data[label as usize * 12 + p], best);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn segnet_output_shapes(size_mult in 1usize..=2, batch in 1usize..=2, base in 1usize..=3, seed in any::<u64>()) {
        let size = 32 * size_mult;
        let cfg = SegNetConfig::new(base, size).unwrap();
        let params = build_segnet::<f32>(&cfg, seed).unwrap();
        let tape = Tape::new();
        let images = tape.constant(Tensor::full([batch, 3, size, size], 0.5f32));
        let out = forward_eval(&cfg, &params, images).unwrap();
        prop_assert_eq!(out.enc_feature.value().shape().to_vec(), vec![batch, 1, size / 8, size / 8]);
        prop_assert_eq!(out.scale_logits.len(), NUM_SCALES);
        for l in out.scale_logits {
            prop_assert_eq!(l.value().shape().to_vec(), vec![batch, NUM_CLASSES, size, size]);
        }
        prop_assert_eq!(out.avg_logits.value().shape().to_vec(), vec![batch, NUM_CLASSES, size, size]);
    }
}
