//! Label assignment, focal loss training and best-by-validation selection.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::category::ZeroShotSplit;
use crate::dataset::Record;
use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::exec::Exec;
use crate::geometry::iou;
use crate::model::{HoPairIndex, Lain};
use crate::scene::HoiInstance;
use crate::tensor::{Graph, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub iou_threshold: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            iou_threshold: 0.5,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("focal alpha {} outside [0, 1]", self.alpha)));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::invalid(format!("focal gamma {} is not a non-negative number", self.gamma)));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::invalid(format!("iou threshold {} outside (0, 1)", self.iou_threshold)));
        }
        Ok(())
    }
}

/// `N_pair × N_categories` binary targets.
pub fn assign_labels(
    pairs: &HoPairIndex,
    detections: &[Detection],
    gt: &[HoiInstance],
    split: &ZeroShotSplit,
    iou_threshold: f64,
) -> Tensor {
    let n_cat = split.num_categories();
    let mut y = Tensor::zeros(&[pairs.len(), n_cat]);
    for (i, &(u, v)) in pairs.pairs.iter().enumerate() {
        let (h, o) = (&detections[u], &detections[v]);
        for inst in gt {
            if split.is_unseen(inst.category) || o.class != inst.object_class {
                continue;
            }
            if iou(&h.bbox, &inst.human_box) > iou_threshold && iou(&o.bbox, &inst.object_box) > iou_threshold {
                y.data_mut()[i * n_cat + inst.category] = 1.0;
            }
        }
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW moments for the trainable parameters only.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub cfg: OptimConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(params: &ParamStore, cfg: OptimConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(n, p)| (n.to_string(), Tensor::zeros(p.value.shape())))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One decoupled-weight-decay update from `grads` (name → gradient).
    pub fn update<'a>(&mut self, params: &mut ParamStore, grads: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let (Some(m), Some(v)) = (self.m.get_mut(name), self.v.get_mut(name)) else {
                return Err(Error::InvalidState(format!("no optimizer state for `{name}`")));
            };
            let p = params.value_mut(name)?.data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let step = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= c.lr * (step + c.weight_decay * *p);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub positives: usize,
}

/// Forward, focal loss, backward and one optimizer update. `Ok(None)` when
/// the scene has no candidate pairs.
pub fn train_step(
    model: &mut Lain,
    record: &Record,
    split: &ZeroShotSplit,
    optim: &mut OptimState,
    focal: &FocalConfig,
) -> Result<Option<StepOutcome>> {
    let mut g = Graph::new();
    let (out, scores) = model.score(&mut g, &record.scene.pixels, &record.detections)?;
    let Some(scores) = scores else {
        return Ok(None);
    };
    let y = assign_labels(&out.pairs, &record.detections, &record.scene.instances, split, focal.iou_threshold);
    let loss_var = g.focal_bce(scores, &y, focal.alpha, focal.gamma)?;
    let loss = g.value(loss_var).data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite(first_non_finite(model, &g, scores)));
    }
    let grads = g.backward(loss_var)?;
    if let Some((name, _)) = grads.params().find(|(_, t)| !t.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{name}`")));
    }
    optim.update(&mut model.params, grads.params())?;
    Ok(Some(StepOutcome {
        loss,
        positives: y.data().iter().filter(|&&v| v > 0.0).count(),
    }))
}

fn first_non_finite(model: &Lain, g: &Graph, scores: crate::tensor::Var) -> String {
    if let Some((name, _)) = model.params.iter().find(|(_, p)| !p.value.all_finite()) {
        return format!("parameter `{name}`");
    }
    if !g.value(scores).all_finite() {
        return "score matrix".into();
    }
    "loss".into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    pub focal: FocalConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            seed: 0,
            optim: OptimConfig::default(),
            focal: FocalConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_map_seen: Option<f64>,
    pub val_map_unseen: Option<f64>,
    pub wall_seconds: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation seen mAP (the
    /// initialization when `epochs == 0`).
    pub best: ParamStore,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochLog>,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let f = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v:.6}"));
    let mut s = String::from("epoch,mean_loss,val_mAP_seen,val_mAP_unseen,wall_seconds\n");
    for e in log {
        s.push_str(&format!(
            "{},{:.6},{},{},{:.3}\n",
            e.epoch,
            e.mean_loss,
            f(e.val_map_seen),
            f(e.val_map_unseen),
            e.wall_seconds
        ));
    }
    s
}

/// Epoch loop with a seeded shuffle per epoch. Validation runs after every
/// epoch when `val` is non-empty; otherwise the last epoch is kept.
pub fn train(
    model: &mut Lain,
    train_set: &[Record],
    val: &[Record],
    split: &ZeroShotSplit,
    cfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    cfg.focal.validate()?;
    let mut optim = OptimState::new(&model.params, cfg.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = model.params.clone();
    let mut best_epoch = None;
    let mut best_score = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut total, mut steps, mut skipped) = (0.0, 0usize, 0usize);
        for &i in &order {
            match train_step(model, &train_set[i], split, &mut optim, &cfg.focal)? {
                Some(s) => {
                    total += s.loss;
                    steps += 1;
                }
                None => skipped += 1,
            }
        }
        let (seen, unseen) = if val.is_empty() {
            (None, None)
        } else {
            let r = evaluate(model, val, split, &cfg.eval, "", exec)?;
            (r.map_seen, r.map_unseen)
        };
        let score = seen.unwrap_or(0.0);
        if val.is_empty() || score > best_score {
            best_score = score;
            best = model.params.clone();
            best_epoch = Some(epoch);
        }
        let entry = EpochLog {
            epoch,
            mean_loss: if steps > 0 { total / steps as f64 } else { f64::NAN },
            val_map_seen: seen,
            val_map_unseen: unseen,
            wall_seconds: start.elapsed().as_secs_f64(),
            skipped,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { best, best_epoch, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::category::ZeroShotSplit;
    use std::collections::BTreeSet;

    fn det(bbox: [f64; 4], class: usize) -> Detection {
        Detection {
            bbox,
            class,
            confidence: 1.0,
            feature: vec![],
        }
    }

    fn inst(h: [f64; 4], o: [f64; 4], class: usize, category: usize) -> HoiInstance {
        HoiInstance {
            human: 0,
            object: 1,
            human_box: h,
            object_box: o,
            object_class: class,
            verb: 0,
            category,
        }
    }

    const H: [f64; 4] = [0.1, 0.1, 0.3, 0.5];
    const O: [f64; 4] = [0.3, 0.2, 0.6, 0.5];

    #[test]
    fn exact_boxes_label_the_category() {
        let dets = [det(H, 0), det(O, 2)];
        let pairs = HoPairIndex::enumerate(&dets, 0);
        let split = ZeroShotSplit::full(4);
        let y = assign_labels(&pairs, &dets, &[inst(H, O, 2, 3)], &split, 0.5);
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 1.0]);
        let y = assign_labels(&pairs, &dets, &[inst(H, O, 1, 3)], &split, 0.5);
        assert!(y.data().iter().all(|&v| v == 0.0), "class mismatch must not label");
    }

    #[test]
    fn low_object_iou_blocks_label() {
        let dets = [det(H, 0), det([0.45, 0.2, 0.75, 0.5], 2)];
        assert!(iou(&dets[1].bbox, &O) < 0.5);
        let pairs = HoPairIndex::enumerate(&dets, 0);
        let y = assign_labels(&pairs, &dets, &[inst(H, O, 2, 0)], &ZeroShotSplit::full(2), 0.5);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_verbs_same_boxes_set_two_columns() {
        let dets = [det(H, 0), det(O, 2)];
        let pairs = HoPairIndex::enumerate(&dets, 0);
        let gt = [inst(H, O, 2, 1), inst(H, O, 2, 2)];
        let y = assign_labels(&pairs, &dets, &gt, &ZeroShotSplit::full(3), 0.5);
        assert_eq!(y.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn unseen_columns_stay_zero() {
        let dets = [det(H, 0), det(O, 2)];
        let pairs = HoPairIndex::enumerate(&dets, 0);
        let split = ZeroShotSplit::from_unseen(crate::category::Setting::Uc, 0, BTreeSet::from([1]), 3).unwrap();
        let gt = [inst(H, O, 2, 1), inst(H, O, 2, 2)];
        let y = assign_labels(&pairs, &dets, &gt, &split, 0.5);
        assert_eq!(y.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), true).unwrap();
        store.insert("frozen", Tensor::scalar(3.0), false).unwrap();
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = OptimState::new(&store, cfg);
        assert!(!opt.m.contains_key("frozen"));
        let g = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        opt.update(&mut store, std::iter::once(("w", &g))).unwrap();
        let w = store.value("w").unwrap().data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9 && (w[1] - (-1.0 + 1e-3)).abs() < 1e-9, "{w:?}");
    }
}
