use proptest::prelude::*;

use shelfpipe::geometry::{iou, letterbox, nms, BBox, Detection, NmsParams};
use shelfpipe::{Rational, Scalar};

fn bbox() -> impl Strategy<Value = BBox<f64>> {
    (-50.0..500.0f64, -50.0..500.0f64, 0.5..300.0f64, 0.5..300.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
}

fn int_bbox() -> impl Strategy<Value = BBox<Rational>> {
    (0i64..60, 0i64..60, 1i64..40, 1i64..40).prop_map(|(x, y, w, h)| {
        BBox::new(Rational::from_int(x), Rational::from_int(y), Rational::from_int(w), Rational::from_int(h)).unwrap()
    })
}

fn detections() -> impl Strategy<Value = Vec<Detection<f64>>> {
    prop::collection::vec((bbox(), 0.0..=1.0f64), 0..30)
        .prop_map(|v| v.into_iter().map(|(b, s)| Detection::new(b, s).unwrap()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn iou_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_exact_symmetry_and_scale_invariance(a in int_bbox(), b in int_bbox(), k in 1i64..9) {
        let k = Rational::from_int(k);
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(iou(&a.scaled(k).unwrap(), &b.scaled(k).unwrap()), iou(&a, &b));
    }

    #[test]
    fn nms_output_is_a_fixed_point(dets in detections(), thr in 0.05..0.95f64, max_dets in 1usize..40) {
        let p = NmsParams { iou_thr: thr, score_thr: 0.1, max_dets };
        let once = nms(&dets, &p);
        prop_assert!(once.len() <= max_dets);
        for (i, a) in once.iter().enumerate() {
            prop_assert!(a.score() >= 0.1);
            prop_assert!(dets.contains(a));
            for b in &once[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) <= thr);
            }
        }
        for w in once.windows(2) {
            prop_assert!(w[0].score() >= w[1].score());
        }
        prop_assert_eq!(nms(&once, &p), once);
    }

    #[test]
    fn letterbox_round_trip(w in 1u32..4000, h in 1u32..4000, size in 32u32..1280, b in bbox()) {
        let t = letterbox::<f64>(w, h, size).unwrap();
        prop_assert!(t.resized_w <= size && t.resized_h <= size);
        prop_assert!(t.resized_w == size || t.resized_h == size);
        let back = t.unmap_box(&t.map_box(&b).unwrap()).unwrap();
        for (u, v) in [(back.x(), b.x()), (back.y(), b.y()), (back.w(), b.w()), (back.h(), b.h())] {
            prop_assert!((u - v).abs() < 1e-6, "{:?} vs {:?}", back, b);
        }
    }

    #[test]
    fn letterbox_round_trip_is_exact_on_rationals(w in 1u32..2000, h in 1u32..2000, size in 32u32..1280, b in int_bbox()) {
        let t = letterbox::<Rational>(w, h, size).unwrap();
        prop_assert_eq!(t.unmap_box(&t.map_box(&b).unwrap()).unwrap(), b);
    }
}
