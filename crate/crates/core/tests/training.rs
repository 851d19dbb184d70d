mod common;

use lain_core::category::ZeroShotSplit;
use lain_core::model::checkpoint;
use lain_core::tensor::Graph;
use lain_core::train::{train, train_step, OptimConfig, OptimState};
use lain_core::eval::evaluate;
use lain_core::Exec;

fn pair_score(model: &lain_core::model::Lain, record: &lain_core::dataset::Record) -> f64 {
    let inst = &record.scene.instances[0];
    let mut g = Graph::new();
    let (out, scores) = model.score(&mut g, &record.scene.pixels, &record.detections).unwrap();
    let i = out.pairs.pairs.iter().position(|&(u, v)| {
        record.detections[u].bbox == inst.human_box && record.detections[v].bbox == inst.object_box
    });
    // Detections are jittered, so fall back to the best-overlapping pair.
    let i = i.unwrap_or_else(|| {
        let q = |p: &(usize, usize)| {
            lain_core::geometry::iou(&record.detections[p.0].bbox, &inst.human_box)
                .min(lain_core::geometry::iou(&record.detections[p.1].bbox, &inst.object_box))
        };
        (0..out.pairs.len()).max_by(|&a, &b| q(&out.pairs.pairs[a]).total_cmp(&q(&out.pairs.pairs[b]))).unwrap()
    });
    g.value(scores.unwrap()).get(&[i, inst.category])
}

#[test]
fn single_scene_overfit() {
    let cfg = common::small_config();
    let mut model = common::model(&cfg);
    let record = common::interacting_record(&cfg, 3);
    let split = ZeroShotSplit::full(model.space.num_categories());
    let t = cfg.train();
    let mut optim = OptimState::new(&model.params, t.optim);
    let losses: Vec<f64> = (0..200)
        .map(|_| train_step(&mut model, &record, &split, &mut optim, &t.focal).unwrap().unwrap().loss)
        .collect();
    let score = pair_score(&model, &record);
    assert!(losses[199] < losses[0]);
    assert!(score > 0.9, "matched score {score}");
}

#[test]
fn training_leaves_frozen_weights_alone() {
    let cfg = common::small_config();
    let mut model = common::model(&cfg);
    let frozen = model.params.checksum(false);
    let trainable = model.params.checksum(true);
    let recs = common::records(&cfg, 6, 1);
    let split = ZeroShotSplit::full(model.space.num_categories());
    let mut t = cfg.train();
    t.epochs = 1;
    let out = train(&mut model, &recs, &[], &split, &t, Exec::Sequential, |_| {}).unwrap();
    assert_eq!(model.params.checksum(false), frozen);
    assert_eq!(out.best.checksum(false), frozen);
    assert_ne!(model.params.checksum(true), trainable);
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let cfg = common::small_config();
    let mut model = common::model(&cfg);
    let before = model.params.clone();
    let record = common::interacting_record(&cfg, 2);
    let split = ZeroShotSplit::full(model.space.num_categories());
    let mut optim = OptimState::new(
        &model.params,
        OptimConfig {
            lr: 0.0,
            ..cfg.train().optim
        },
    );
    for _ in 0..3 {
        train_step(&mut model, &record, &split, &mut optim, &cfg.train().focal).unwrap();
    }
    assert_eq!(model.params, before);
}

#[test]
fn training_is_deterministic_across_exec_modes() {
    let cfg = common::small_config();
    let recs = common::records(&cfg, 5, 4);
    let val = common::records(&cfg, 3, 5);
    let split = ZeroShotSplit::full(cfg.space().unwrap().num_categories());
    let mut t = cfg.train();
    t.epochs = 2;
    let run = |exec| {
        let mut m = common::model(&cfg);
        let out = train(&mut m, &recs, &val, &split, &t, exec, |_| {}).unwrap();
        (out.best, out.log.iter().map(|e| e.mean_loss).collect::<Vec<_>>())
    };
    let (a, la) = run(Exec::Sequential);
    let (b, lb) = run(Exec::Parallel);
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let cfg = common::small_config();
    let mut model = common::model(&cfg);
    let recs = common::records(&cfg, 4, 6);
    let split = ZeroShotSplit::full(model.space.num_categories());
    let mut t = cfg.train();
    t.epochs = 1;
    train(&mut model, &recs, &[], &split, &t, Exec::Sequential, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let mut fresh = common::model(&cfg);
    checkpoint::load(&mut fresh, &path, false).unwrap();
    assert_eq!(fresh.params, model.params);
    let e = cfg.eval();
    let a = evaluate(&model, &recs, &split, &e, "d", Exec::Sequential).unwrap();
    let b = evaluate(&fresh, &recs, &split, &e, "d", Exec::Sequential).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
}

#[test]
fn checkpoint_from_another_config_needs_force() {
    let cfg = common::small_config();
    let model = common::model(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let other = common::config(&["layers=2", "init_seed=9"]);
    let mut m = common::model(&other);
    assert!(matches!(
        checkpoint::load(&mut m, &path, false),
        Err(lain_core::Error::DigestMismatch { .. })
    ));
    checkpoint::load(&mut m, &path, true).unwrap();
    assert_eq!(m.params, model.params);
}
