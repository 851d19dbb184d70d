mod common;

use lain_core::config::RunConfig;
use lain_core::dataset::{Dataset, PixelEncoding};
use lain_core::detect::Detection;
use lain_core::eval::{self, GroundTruth, Prediction};
use lain_core::geometry::{iou, BBox};
use lain_core::model::{checkpoint, layout_assignment};
use lain_core::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..0.9f64, 0.0..0.9f64, 0.01..0.6f64, 0.01..0.6f64)
        .prop_map(|(x, y, w, h)| [x, y, (x + w).min(1.0), (y + h).min(1.0)])
}

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let x = iou(&a, &b);
        prop_assert_eq!(x, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fusion_lowers_scores_and_keeps_row_order(
        s in (1usize..5, 1usize..6).prop_flat_map(|(n, c)| prop::collection::vec(0.0..1.0f64, n * c).prop_map(move |d| Tensor::new(vec![n, c], d).unwrap())),
        lambda in 0.0..4.0f64,
        seed in any::<u64>(),
    ) {
        let n = s.rows();
        let conf = |k: u64| (0..n).map(|i| ((seed.rotate_left(k as u32 + i as u32) % 1000) as f64 + 1.0) / 1001.0).collect::<Vec<_>>();
        let (hc, oc) = (conf(3), conf(17));
        let f = eval::fuse_scores(&s, &hc, &oc, lambda).unwrap();
        let same = eval::fuse_scores(&s, &hc, &oc, 0.0).unwrap();
        prop_assert_eq!(&same, &s);
        for i in 0..n {
            for a in 0..s.cols() {
                prop_assert!(f.get(&[i, a]) <= s.get(&[i, a]));
                for b in 0..s.cols() {
                    if s.get(&[i, a]) < s.get(&[i, b]) {
                        prop_assert!(f.get(&[i, a]) <= f.get(&[i, b]));
                    }
                }
            }
        }
        prop_assert!(eval::fuse_scores(&s, &hc, &oc, -0.1).is_err());
    }

    #[test]
    fn ap_is_bounded_and_rank_based(seed in any::<u64>(), shift in -2.0..2.0f64, scale in 0.1..5.0f64) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (preds, gt) = lain_core::runner::random_instance_set(&mut rng);
        let moved: Vec<Prediction> = preds.iter().map(|p| Prediction { score: p.score * scale + shift, ..p.clone() }).collect();
        for c in 0..3 {
            let pick = |v: &[Prediction]| v.iter().filter(|p| p.category == c).cloned().collect::<Vec<_>>();
            let g: Vec<GroundTruth> = gt.iter().filter(|x| x.category == c).cloned().collect();
            let a = eval::match_and_ap(&pick(&preds), &g, 0.5);
            prop_assert_eq!(a, eval::match_and_ap(&pick(&moved), &g, 0.5));
            if let Some(a) = a {
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn exact_copies_of_ground_truth_score_full_ap(boxes in prop::collection::vec((bbox(), bbox(), 0.0..1.0f64), 1..6)) {
        let gt: Vec<GroundTruth> = boxes.iter().map(|(h, o, _)| GroundTruth { scene: 0, category: 0, human_box: *h, object_box: *o }).collect();
        let preds: Vec<Prediction> = boxes.iter().enumerate().map(|(i, (h, o, s))| Prediction { scene: 0, pair: i, category: 0, score: *s, human_box: *h, object_box: *o }).collect();
        let ap = eval::match_and_ap(&preds, &gt, 0.5).unwrap();
        // Duplicated boxes can be claimed in either order; AP stays 1 either way.
        prop_assert!((ap - 1.0).abs() < 1e-12, "{}", ap);
    }

    #[test]
    fn softmax_rows_sum_to_one_under_masks(x in tensor(3, 5), mask in prop::collection::vec(any::<bool>(), 15)) {
        let mut mask = mask;
        for r in 0..3 {
            mask[r * 5] = true;
        }
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax_rows_masked(v, Some(&mask));
        let s = g.value(s);
        for r in 0..3 {
            let row = s.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..5 {
                if !mask[r * 5 + c] {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn roi_align_of_a_constant_map_is_constant(b in bbox(), v in -5.0..5.0f64, h in 1usize..7, w in 1usize..7) {
        let mut g = Graph::new();
        let m = g.constant(Tensor::filled(&[h, w, 2], v));
        let y = g.roi_align(m, b, 3, 2).unwrap();
        for x in g.value(y).data() {
            prop_assert!((x - v).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_is_linear_in_its_input(seed in any::<u64>(), a in -2.0..2.0f64) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[4, 5, 2], 1.0, &mut rng);
        let z = Tensor::randn(&[4, 5, 2], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 3, 2, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let kv = g.constant(k);
        let mix: Vec<f64> = x.data().iter().zip(z.data()).map(|(p, q)| a * p + q).collect();
        let [cx, cz, cm] = [x, z, Tensor::new(vec![4, 5, 2], mix).unwrap()].map(|t| {
            let v = g.constant(t);
            let y = g.conv2d(v, kv).unwrap();
            g.value(y).clone()
        });
        for i in 0..cm.numel() {
            prop_assert!((cm.data()[i] - (a * cx.data()[i] + cz.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn layout_cells_take_the_most_confident_cover(dets in prop::collection::vec((bbox(), 0.0..1.0f64), 0..5), grid in 1usize..9) {
        let dets: Vec<Detection> = dets.into_iter().map(|(bbox, confidence)| Detection { bbox, class: 1, confidence, feature: vec![] }).collect();
        let a = layout_assignment(&dets, grid);
        prop_assert_eq!(a.len(), grid * grid);
        for (cell, got) in a.iter().enumerate() {
            let (x, y) = (((cell % grid) as f64 + 0.5) / grid as f64, ((cell / grid) as f64 + 0.5) / grid as f64);
            let covers: Vec<usize> = (0..dets.len()).filter(|&i| lain_core::geometry::contains_point(&dets[i].bbox, x, y)).collect();
            match got {
                None => prop_assert!(covers.is_empty()),
                Some(i) => {
                    prop_assert!(covers.contains(i));
                    prop_assert!(covers.iter().all(|&j| dets[j].confidence < dets[*i].confidence || (dets[j].confidence == dets[*i].confidence && j >= *i)));
                }
            }
        }
    }

    #[test]
    fn config_digest_ignores_key_order(lr in 1e-5..1e-1f64, eps in 1usize..9, seed in any::<u64>()) {
        let lines = [format!("lr={lr}"), format!("epochs={eps}"), format!("data_seed={seed}")];
        let a = RunConfig::resolve(&lines.join("\n"), &[]).unwrap();
        let b = RunConfig::resolve(&[lines[2].clone(), lines[0].clone(), lines[1].clone()].join("\n"), &[]).unwrap();
        prop_assert_eq!(a.digest(), b.digest());
        let c = RunConfig::resolve("", &[format!("lr={}", lr * 2.0), lines[0].clone(), lines[1].clone(), lines[2].clone()]).unwrap();
        prop_assert_eq!(c.digest(), a.digest());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn dataset_bytes_round_trip(seed in any::<u64>(), hex in any::<bool>()) {
        let cfg = common::small_config();
        let ds = Dataset { digest: "abc".into(), records: common::records(&cfg, 3, seed) };
        let enc = if hex { PixelEncoding::Hex } else { PixelEncoding::Raw };
        prop_assert_eq!(Dataset::from_bytes(&ds.to_bytes(enc)).unwrap(), ds);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>()) {
        let cfg = common::small_config();
        let m = lain_core::runner::perturbed_model(&cfg, seed).unwrap();
        let bytes = checkpoint::to_bytes(&m.params, &m.cfg.digest());
        let back = checkpoint::from_bytes(&bytes).unwrap();
        let mut fresh = common::model(&cfg);
        checkpoint::restore(&mut fresh, back, false).unwrap();
        prop_assert_eq!(fresh.params, m.params);
    }
}
