mod common;

use lain_core::category::{Setting, ZeroShotSplit};
use lain_core::eval::{self, evaluate, GroundTruth, Prediction};
use lain_core::runner;
use lain_core::Exec;

#[test]
fn evaluator_matches_brute_force_on_random_sets() {
    for c in runner::evaluator_checks(50, 31) {
        assert!(c.passed(), "{} {:e}", c.name, c.max_error);
    }
}

#[test]
fn random_sets_exercise_partial_precision() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
    let mut partial = 0;
    for _ in 0..50 {
        let (p, g) = runner::random_instance_set(&mut rng);
        for c in 0..3 {
            let pc: Vec<_> = p.iter().filter(|x| x.category == c).cloned().collect();
            let gc: Vec<_> = g.iter().filter(|x| x.category == c).cloned().collect();
            if let Some(ap) = eval::match_and_ap(&pc, &gc, 0.5) {
                partial += usize::from(ap > 0.0 && ap < 1.0);
            }
        }
    }
    assert!(partial >= 5, "only {partial} non-trivial APs");
}

fn pred(score: f64, b: [f64; 4]) -> Prediction {
    Prediction {
        scene: 0,
        pair: 0,
        category: 0,
        score,
        human_box: b,
        object_box: b,
    }
}

#[test]
fn hand_computed_ap() {
    let a = [0.0, 0.0, 0.5, 0.5];
    let b = [0.5, 0.5, 1.0, 1.0];
    let gt = vec![
        GroundTruth {
            scene: 0,
            category: 0,
            human_box: a,
            object_box: a,
        },
        GroundTruth {
            scene: 0,
            category: 0,
            human_box: b,
            object_box: b,
        },
    ];
    // TP, FP, TP: precision 1 at recall 0.5, 2/3 at recall 1.
    let preds = vec![pred(0.9, a), pred(0.8, [0.0, 0.5, 0.4, 1.0]), pred(0.7, b)];
    let ap = eval::match_and_ap(&preds, &gt, 0.5).unwrap();
    assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    // A duplicate of a claimed gt is a false positive.
    let preds = vec![pred(0.9, a), pred(0.8, a)];
    assert!((eval::match_and_ap(&preds, &gt, 0.5).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn report_is_identical_across_exec_modes() {
    let cfg = common::small_config();
    let model = runner::perturbed_model(&cfg, 2).unwrap();
    let recs = common::records(&cfg, 8, 12);
    let split = ZeroShotSplit::from_unseen(Setting::Uc, 0, [1usize, 5].into_iter().collect(), model.space.num_categories()).unwrap();
    let a = evaluate(&model, &recs, &split, &cfg.eval(), "x", Exec::Sequential).unwrap();
    let b = evaluate(&model, &recs, &split, &cfg.eval(), "x", Exec::Parallel).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.to_json(), b.to_json());
    assert!(a.to_csv().starts_with("category_name,set,AP,n_gt\n"));
}

#[test]
fn lambda_zero_keeps_raw_scores() {
    let cfg = common::small_config();
    let model = runner::perturbed_model(&cfg, 2).unwrap();
    let rec = common::interacting_record(&cfg, 3);
    let mut g = lain_core::tensor::Graph::new();
    let (_, s) = model.score(&mut g, &rec.scene.pixels, &rec.detections).unwrap();
    let raw = g.value(s.unwrap());
    let preds = eval::infer_scene(&model, &rec, 0, 0.0).unwrap();
    assert!(!preds.is_empty());
    for p in preds {
        assert_eq!(p.score, raw.get(&[p.pair, p.category]));
    }
}
