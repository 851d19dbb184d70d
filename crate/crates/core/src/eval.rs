//! Confidence-fused inference, greedy HOI matching and average precision.

use std::fmt::Write as _;

use serde::Serialize;

use crate::category::ZeroShotSplit;
use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{area, iou, BBox};
use crate::model::Lain;
use crate::tensor::{Graph, Tensor};

/// `S · S_H^λ · S_O^λ`, with one confidence pair per row of `s`.
pub fn fuse_scores(s: &Tensor, human_conf: &[f64], object_conf: &[f64], lambda: f64) -> Result<Tensor> {
    if lambda < 0.0 {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let (n, c) = (s.rows(), s.cols());
    if human_conf.len() != n || object_conf.len() != n {
        return Err(Error::invalid(format!(
            "{n} score rows but {} human and {} object confidences",
            human_conf.len(),
            object_conf.len()
        )));
    }
    let mut out = s.clone();
    for i in 0..n {
        let w = human_conf[i].powf(lambda) * object_conf[i].powf(lambda);
        out.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|x| *x *= w);
    }
    Ok(out)
}

/// One scored (human box, object box, category) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scene: usize,
    pub pair: usize,
    pub category: usize,
    pub score: f64,
    pub human_box: BBox,
    pub object_box: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub scene: usize,
    pub category: usize,
    pub human_box: BBox,
    pub object_box: BBox,
}

/// Descending score; ties by scene, pair, then category.
pub fn rank(preds: &mut [Prediction]) {
    preds.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.scene.cmp(&b.scene))
            .then(a.pair.cmp(&b.pair))
            .then(a.category.cmp(&b.category))
    });
}

/// Outcome of greedy matching for one category: for each ranked prediction,
/// the index of the gt it claimed, if any.
pub fn greedy_match(ranked: &[Prediction], gt: &[GroundTruth], threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gt.len()];
    ranked
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt.iter().enumerate() {
                if taken[j] || g.scene != p.scene || g.category != p.category {
                    continue;
                }
                let (ih, io) = (iou(&p.human_box, &g.human_box), iou(&p.object_box, &g.object_box));
                if ih > threshold && io > threshold {
                    let q = ih.min(io);
                    if best.is_none_or(|(_, bq)| q > bq) {
                        best = Some((j, q));
                    }
                }
            }
            best.map(|(j, _)| {
                taken[j] = true;
                j
            })
        })
        .collect()
}

/// All-points interpolated AP from a ranked true/false-positive sequence.
/// `None` entries are ignored. Returns `None` when `n_gt == 0`.
pub fn average_precision(hits: &[Option<bool>], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(hits.len());
    for h in hits.iter().flatten() {
        if *h {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in curve {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Some(ap)
}

/// Per-category AP given predictions and gt of that category only.
pub fn match_and_ap(preds: &[Prediction], gt: &[GroundTruth], threshold: f64) -> Option<f64> {
    let mut ranked = preds.to_vec();
    rank(&mut ranked);
    let hits: Vec<Option<bool>> = greedy_match(&ranked, gt, threshold)
        .into_iter()
        .map(|m| Some(m.is_some()))
        .collect();
    average_precision(&hits, gt.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Role {
    Human,
    Object,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Band {
    Small,
    Medium,
    Large,
}

/// Box-area cut points as fractions of the image area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeBands {
    pub small_below: f64,
    pub large_from: f64,
}

impl Default for SizeBands {
    fn default() -> Self {
        Self {
            small_below: 0.01,
            large_from: 0.09,
        }
    }
}

impl SizeBands {
    pub fn band(&self, b: &BBox) -> Band {
        let a = area(b);
        if a < self.small_below {
            Band::Small
        } else if a < self.large_from {
            Band::Medium
        } else {
            Band::Large
        }
    }
}

fn role_box(role: Role, h: &BBox, o: &BBox) -> BBox {
    match role {
        Role::Human => *h,
        Role::Object => *o,
    }
}

/// AP of one category restricted to gt whose `role` box falls in `band`.
/// Matching runs against all gt; a prediction that claims an out-of-band gt
/// is ignored, and an unmatched one counts against the band only if its own
/// box lies in it.
pub fn band_ap(
    preds: &[Prediction],
    gt: &[GroundTruth],
    threshold: f64,
    bands: &SizeBands,
    role: Role,
    band: Band,
) -> Option<f64> {
    let mut ranked = preds.to_vec();
    rank(&mut ranked);
    let in_band = |h: &BBox, o: &BBox| bands.band(&role_box(role, h, o)) == band;
    let n_gt = gt.iter().filter(|g| in_band(&g.human_box, &g.object_box)).count();
    let hits: Vec<Option<bool>> = greedy_match(&ranked, gt, threshold)
        .into_iter()
        .zip(&ranked)
        .map(|(m, p)| match m {
            Some(j) => in_band(&gt[j].human_box, &gt[j].object_box).then_some(true),
            None => in_band(&p.human_box, &p.object_box).then_some(false),
        })
        .collect();
    average_precision(&hits, n_gt)
}

/// Fused predictions of one scene. Only categories whose object matches the
/// detected class of the pair's second box are emitted.
pub fn infer_scene(model: &Lain, record: &Record, scene: usize, lambda: f64) -> Result<Vec<Prediction>> {
    let mut g = Graph::new();
    let (out, scores) = model.score(&mut g, &record.scene.pixels, &record.detections)?;
    let Some(scores) = scores else {
        return Ok(Vec::new());
    };
    let dets = &record.detections;
    let hc: Vec<f64> = out.pairs.pairs.iter().map(|&(u, _)| dets[u].confidence).collect();
    let oc: Vec<f64> = out.pairs.pairs.iter().map(|&(_, v)| dets[v].confidence).collect();
    let fused = fuse_scores(g.value(scores), &hc, &oc, lambda)?;
    let cats = model.space.categories();
    let mut preds = Vec::new();
    for (i, &(u, v)) in out.pairs.pairs.iter().enumerate() {
        for (c, &(obj, _)) in cats.iter().enumerate() {
            if obj != dets[v].class {
                continue;
            }
            preds.push(Prediction {
                scene,
                pair: i,
                category: c,
                score: fused.get(&[i, c]),
                human_box: dets[u].bbox,
                object_box: dets[v].bbox,
            });
        }
    }
    Ok(preds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub lambda: f64,
    pub iou_threshold: f64,
    pub bands: SizeBands,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            iou_threshold: 0.5,
            bands: SizeBands::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryAp {
    pub category: usize,
    pub name: String,
    pub unseen: bool,
    pub ap: Option<f64>,
    pub n_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandAp {
    pub role: Role,
    pub band: Band,
    pub ap: Option<f64>,
    pub n_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    pub digest: String,
    pub categories: Vec<CategoryAp>,
    pub map_unseen: Option<f64>,
    pub map_seen: Option<f64>,
    pub map_full: Option<f64>,
    pub bands: Vec<BandAp>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Builds the report from flat predictions and gt.
pub fn report(
    model: &Lain,
    split: &ZeroShotSplit,
    preds: &[Prediction],
    gt: &[GroundTruth],
    cfg: &EvalConfig,
    digest: &str,
) -> ApReport {
    let n = model.space.num_categories();
    let mut by_cat_p: Vec<Vec<Prediction>> = vec![Vec::new(); n];
    let mut by_cat_g: Vec<Vec<GroundTruth>> = vec![Vec::new(); n];
    for p in preds {
        by_cat_p[p.category].push(p.clone());
    }
    for g in gt {
        by_cat_g[g.category].push(g.clone());
    }
    let categories: Vec<CategoryAp> = (0..n)
        .map(|c| CategoryAp {
            category: c,
            name: model.space.category_name(c),
            unseen: split.is_unseen(c),
            ap: match_and_ap(&by_cat_p[c], &by_cat_g[c], cfg.iou_threshold),
            n_gt: by_cat_g[c].len(),
        })
        .collect();
    let map_over = |f: &dyn Fn(&CategoryAp) -> bool| mean(categories.iter().filter(|c| f(c)).filter_map(|c| c.ap));

    let mut bands = Vec::new();
    for role in [Role::Human, Role::Object] {
        for band in [Band::Small, Band::Medium, Band::Large] {
            let per_cat: Vec<f64> = (0..n)
                .filter_map(|c| band_ap(&by_cat_p[c], &by_cat_g[c], cfg.iou_threshold, &cfg.bands, role, band))
                .collect();
            let n_gt = gt
                .iter()
                .filter(|g| cfg.bands.band(&role_box(role, &g.human_box, &g.object_box)) == band)
                .count();
            bands.push(BandAp {
                role,
                band,
                ap: mean(per_cat.into_iter()),
                n_gt,
            });
        }
    }
    ApReport {
        digest: digest.to_string(),
        map_unseen: map_over(&|c| c.unseen),
        map_seen: map_over(&|c| !c.unseen),
        map_full: map_over(&|_| true),
        categories,
        bands,
    }
}

pub fn ground_truth(records: &[Record]) -> Vec<GroundTruth> {
    records
        .iter()
        .enumerate()
        .flat_map(|(s, r)| {
            r.scene.instances.iter().map(move |i| GroundTruth {
                scene: s,
                category: i.category,
                human_box: i.human_box,
                object_box: i.object_box,
            })
        })
        .collect()
}

/// Inference over every record (in parallel per `exec`), then matching and AP.
pub fn evaluate(
    model: &Lain,
    records: &[Record],
    split: &ZeroShotSplit,
    cfg: &EvalConfig,
    digest: &str,
    exec: Exec,
) -> Result<ApReport> {
    if !(cfg.iou_threshold > 0.0 && cfg.iou_threshold < 1.0) {
        return Err(Error::invalid(format!("iou threshold {} outside (0, 1)", cfg.iou_threshold)));
    }
    let per_scene = exec.map_range(records.len(), |s| infer_scene(model, &records[s], s, cfg.lambda));
    let mut preds = Vec::new();
    for p in per_scene {
        preds.extend(p?);
    }
    Ok(report(model, split, &preds, &ground_truth(records), cfg, digest))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl ApReport {
    /// Per-category rows, then a `metric,value` summary block. Absent values
    /// are empty fields.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("category_name,set,AP,n_gt\n");
        for c in &self.categories {
            let set = if c.unseen { "unseen" } else { "seen" };
            let _ = writeln!(s, "{},{set},{},{}", c.name, fmt_opt(c.ap), c.n_gt);
        }
        s.push_str("\nmetric,value\n");
        let _ = writeln!(s, "digest,{}", self.digest);
        let _ = writeln!(s, "mAP_unseen,{}", fmt_opt(self.map_unseen));
        let _ = writeln!(s, "mAP_seen,{}", fmt_opt(self.map_seen));
        let _ = writeln!(s, "mAP_full,{}", fmt_opt(self.map_full));
        for b in &self.bands {
            let band = match b.band {
                Band::Small => "S",
                Band::Medium => "M",
                Band::Large => "L",
            };
            let role = match b.role {
                Role::Human => "human",
                Role::Object => "object",
            };
            let _ = writeln!(s, "AP_{band}_{role},{}", fmt_opt(b.ap));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Full mAP in points (×100), 0 when absent.
    pub fn full_points(&self) -> f64 {
        100.0 * self.map_full.unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(pair: usize, score: f64, h: BBox, o: BBox) -> Prediction {
        Prediction {
            scene: 0,
            pair,
            category: 0,
            score,
            human_box: h,
            object_box: o,
        }
    }

    fn gt(h: BBox, o: BBox) -> GroundTruth {
        GroundTruth {
            scene: 0,
            category: 0,
            human_box: h,
            object_box: o,
        }
    }

    const H: BBox = [0.1, 0.1, 0.3, 0.5];
    const O: BBox = [0.3, 0.2, 0.6, 0.5];
    const FAR: BBox = [0.7, 0.7, 0.9, 0.9];

    #[test]
    fn fuse_examples() {
        let s = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert_eq!(fuse_scores(&s, &[0.5], &[0.5], 1.0).unwrap().data()[0], 0.25);
        let s = Tensor::new(vec![1, 1], vec![0.8]).unwrap();
        let v = fuse_scores(&s, &[0.9], &[0.7], 2.8).unwrap().data()[0];
        assert!((v - 0.8 * 0.9f64.powf(2.8) * 0.7f64.powf(2.8)).abs() < 1e-15);
        // 0.8·0.9^2.8·0.7^2.8 = 0.219403...
        assert!((v - 0.2194).abs() < 5e-5, "{v}");
        let s = Tensor::new(vec![1, 2], vec![0.3, 0.6]).unwrap();
        assert_eq!(fuse_scores(&s, &[0.2], &[0.9], 0.0).unwrap(), s);
        assert!(fuse_scores(&s, &[0.2], &[0.9], -1.0).is_err());
    }

    #[test]
    fn exact_prediction_gives_ap_one() {
        assert_eq!(match_and_ap(&[pred(0, 0.9, H, O)], &[gt(H, O)], 0.5), Some(1.0));
    }

    #[test]
    fn false_positive_above_true_positive_halves_ap() {
        let preds = [pred(0, 0.9, H, FAR), pred(1, 0.4, H, O)];
        assert_eq!(match_and_ap(&preds, &[gt(H, O)], 0.5), Some(0.5));
    }

    #[test]
    fn no_predictions_or_no_gt() {
        assert_eq!(match_and_ap(&[], &[gt(H, O)], 0.5), Some(0.0));
        assert_eq!(match_and_ap(&[pred(0, 0.9, H, O)], &[], 0.5), None);
    }

    #[test]
    fn each_gt_matched_once() {
        let preds = [pred(0, 0.9, H, O), pred(1, 0.8, H, O)];
        assert_eq!(match_and_ap(&preds, &[gt(H, O)], 0.5), Some(1.0));
        let mut ranked = preds.to_vec();
        rank(&mut ranked);
        assert_eq!(greedy_match(&ranked, &[gt(H, O)], 0.5), vec![Some(0), None]);
    }

    #[test]
    fn single_band_equals_overall() {
        let bands = SizeBands {
            small_below: 0.0,
            large_from: 0.0,
        };
        let preds = [pred(0, 0.9, H, FAR), pred(1, 0.4, H, O), pred(2, 0.3, FAR, O)];
        let g = [gt(H, O), gt(FAR, FAR)];
        let all = match_and_ap(&preds, &g, 0.5);
        for role in [Role::Human, Role::Object] {
            assert_eq!(band_ap(&preds, &g, 0.5, &bands, role, Band::Large), all);
            assert_eq!(band_ap(&preds, &g, 0.5, &bands, role, Band::Small), None);
        }
    }

    #[test]
    fn rank_is_input_order_invariant() {
        let mut a = vec![pred(2, 0.5, H, O), pred(0, 0.5, H, O), pred(1, 0.7, H, O)];
        let mut b = a.clone();
        b.reverse();
        rank(&mut a);
        rank(&mut b);
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|p| p.pair).collect::<Vec<_>>(), vec![1, 0, 2]);
    }
}
