//! Randomized invariants of geometry, suppression, matching, AP and attention.

use cft_core::autodiff::{Graph, ParamStore};
use cft_core::cft::{CftConfig, CftModule};
use cft_core::detector::nms;
use cft_core::geometry::{giou, iou, BBox, Detection, GroundTruth};
use cft_core::loss::giou_loss;
use cft_core::metrics::{average_precision, map_suite, match_detections, Interpolation};
use cft_core::rng::Rng;
use cft_core::Tensor;
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (-50.0f64..50.0, -50.0f64..50.0, 0.01f64..40.0, 0.01f64..40.0).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn det(classes: usize) -> impl Strategy<Value = Detection> {
    (bbox(), 0..classes, 0.0f64..1.0).prop_map(|(bbox, class_id, confidence)| Detection { bbox, class_id, confidence })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn giou_bounds_and_symmetry(a in bbox(), b in bbox()) {
        let g = giou(&a, &b).unwrap();
        prop_assert!(g > -1.0 && g <= 1.0);
        prop_assert_eq!(g, giou(&b, &a).unwrap());
        prop_assert!(g <= iou(&a, &b).unwrap() + 1e-15);
        let l = giou_loss(&a, &b).unwrap();
        prop_assert!((0.0..2.0).contains(&l));
    }

    #[test]
    fn giou_of_a_box_with_itself_is_one(a in bbox()) {
        prop_assert!((giou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_invariants(dets in proptest::collection::vec(det(2), 0..12), thr in 0.1f64..0.9) {
        let kept = nms(&dets, thr);
        // kept boxes are a subset, ordered by confidence
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        prop_assert!(kept.windows(2).all(|w| w[0].confidence >= w[1].confidence));
        // no two survivors of one class overlap at the threshold
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox).unwrap() < thr);
            }
        }
        // every dropped box is covered by a more confident survivor
        for d in &dets {
            if !kept.contains(d) {
                prop_assert!(kept.iter().any(|k| k.class_id == d.class_id
                    && k.confidence >= d.confidence
                    && iou(&k.bbox, &d.bbox).unwrap() >= thr));
            }
        }
        prop_assert_eq!(nms(&kept, thr), kept.clone());
    }

    #[test]
    fn matching_is_injective(dets in proptest::collection::vec(det(2), 0..10), gts in proptest::collection::vec((bbox(), 0usize..2), 0..6), thr in 0.05f64..0.95) {
        let gts: Vec<GroundTruth> = gts.into_iter().map(|(bbox, class_id)| GroundTruth { bbox, class_id }).collect();
        let m = match_detections(&dets, &gts, thr);
        let mut used: Vec<usize> = m.matched_gt.iter().flatten().copied().collect();
        let tp = used.len();
        used.sort();
        used.dedup();
        prop_assert_eq!(used.len(), tp);
        prop_assert_eq!(m.false_negatives, gts.len() - tp);
        for (d, g) in dets.iter().zip(&m.matched_gt) {
            if let Some(g) = g {
                prop_assert_eq!(d.class_id, gts[*g].class_id);
                prop_assert!(iou(&d.bbox, &gts[*g].bbox).unwrap() >= thr);
            }
        }
    }

    #[test]
    fn ap_bounds_and_monotonicity(flags in proptest::collection::vec(any::<bool>(), 0..30), extra in 0usize..5) {
        let tp = flags.iter().filter(|&&f| f).count();
        let num_gt = tp + extra;
        prop_assume!(num_gt > 0);
        for interp in [Interpolation::AllPoints, Interpolation::Coco101] {
            let ap = average_precision(&flags, num_gt, interp);
            prop_assert!((0.0..=1.0).contains(&ap));
            // appending a false positive never raises AP
            let mut more = flags.clone();
            more.push(false);
            prop_assert!(average_precision(&more, num_gt, interp) <= ap + 1e-15);
        }
        // AP at most the final recall
        prop_assert!(average_precision(&flags, num_gt, Interpolation::AllPoints) <= tp as f64 / num_gt as f64 + 1e-15);
    }

    #[test]
    fn map_is_invariant_to_detection_order(seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..4 {
            let g: Vec<GroundTruth> = (0..1 + rng.below(3)).map(|_| {
                let (x, y) = (rng.uniform_range(0.0, 40.0), rng.uniform_range(0.0, 40.0));
                GroundTruth { bbox: BBox::new(x, y, x + 8.0, y + 8.0), class_id: rng.below(2) }
            }).collect();
            let d: Vec<Detection> = g.iter().map(|t| Detection {
                bbox: BBox::new(t.bbox.x1 + rng.uniform_range(-2.0, 2.0), t.bbox.y1, t.bbox.x2, t.bbox.y2 + rng.uniform_range(-2.0, 2.0)),
                class_id: t.class_id,
                confidence: rng.uniform(),
            }).collect();
            dets.push(d);
            gts.push(g);
        }
        let a = map_suite(&dets, &gts, 2, Interpolation::AllPoints);
        for d in dets.iter_mut() {
            d.reverse();
        }
        let b = map_suite(&dets, &gts, 2, Interpolation::AllPoints);
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..10_000, heads in prop_oneof![Just(1usize), Just(2), Just(4)], literal in any::<bool>()) {
        let cfg = CftConfig { channels: 8, heads, blocks: 2, pooled_size: 3, mlp_ratio: 2, paper_literal_heads: literal, use_layernorm: false };
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(seed);
        let m = CftModule::new(cfg, &mut store, "m", &mut rng).unwrap();
        let f = |rng: &mut Rng| Tensor::from_fn(&[8, 5, 7], |_| rng.uniform_range(-3.0, 3.0) as f32);
        let (fr, ft) = (f(&mut rng), f(&mut rng));
        let g = Graph::new();
        let out = m.fuse(&g, &store, g.constant(fr), g.constant(ft), true).unwrap();
        let att = out.attention.unwrap();
        prop_assert_eq!(att.len(), 2 * heads);
        for a in &att {
            prop_assert_eq!(a.extent(), 18);
            prop_assert!(a.max_row_sum_error() < 1e-5);
            prop_assert!(a.entries_in_unit_interval());
            let q = a.blocks(3).unwrap();
            prop_assert_eq!(q.reassemble(), a.alpha.clone());
        }
        prop_assert_eq!(out.delta_r.shape(), vec![8, 5, 7]);
    }
}
