//! Slow, loop-by-loop reference implementations.
//!
//! Nothing here shares code with the tape, the fused kernels or the
//! evaluator: matrices are `Vec<Vec<f64>>`, convolution and region pooling are
//! explicit loops over output cells, and AP is read off an explicit
//! precision/recall table. Tests and the `oracle` command compare the fast
//! paths against these.

#![allow(clippy::needless_range_loop)]

use crate::detect::Detection;
use crate::eval::{Band, GroundTruth, Prediction, Role, SizeBands};
use crate::geometry::{area, ensure_min_extent, iou, BBox};
use crate::model::{HoPairIndex, Lain};
use crate::tensor::{ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let cols = t.shape().last().copied().unwrap_or(1);
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    Tensor::new(vec![rows, cols], m.concat()).expect("rectangular")
}

fn param(store: &ParamStore, name: &str) -> Mat {
    let t = store.value(name).unwrap_or_else(|_| panic!("oracle: missing `{name}`"));
    if t.shape().len() == 1 {
        vec![t.data().to_vec()]
    } else {
        to_mat(t)
    }
}

fn vector(store: &ParamStore, name: &str) -> Vec<f64> {
    store.value(name).unwrap_or_else(|_| panic!("oracle: missing `{name}`")).data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn transpose(a: &Mat) -> Mat {
    let n = a.first().map_or(0, Vec::len);
    (0..n).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn add_row(a: &Mat, r: &[f64]) -> Mat {
    a.iter().map(|x| x.iter().zip(r).map(|(p, q)| p + q).collect()).collect()
}

fn mul_row(a: &Mat, r: &[f64]) -> Mat {
    a.iter().map(|x| x.iter().zip(r).map(|(p, q)| p * q).collect()).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn linear(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let w = param(store, &format!("{prefix}.weight"));
    add_row(&matmul(x, &w), &vector(store, &format!("{prefix}.bias")))
}

pub fn ffn(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let h = linear(store, &format!("{prefix}.fc1"), x);
    let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    linear(store, &format!("{prefix}.fc2"), &h)
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(d, v)| (v - mean) / (var + eps).sqrt() * gain[d] + bias[d])
                .collect()
        })
        .collect()
}

fn store_layer_norm(store: &ParamStore, prefix: &str, x: &Mat, eps: f64) -> Mat {
    layer_norm(x, &vector(store, &format!("{prefix}.gain")), &vector(store, &format!("{prefix}.bias")), eps)
}

pub fn softmax(row: &[f64], allowed: &[bool]) -> Vec<f64> {
    let max = row
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row
        .iter()
        .zip(allowed)
        .map(|(&v, &a)| if a { (v - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Single-head scaled dot-product attention on already-projected inputs.
pub fn attend(q: &Mat, k: &Mat, v: &Mat, mask: Option<&dyn Fn(usize, usize) -> bool>) -> Mat {
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let logits: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
            let allowed: Vec<bool> = (0..k.len()).map(|j| mask.is_none_or(|m| m(i, j))).collect();
            let w = softmax(&logits, &allowed);
            (0..v[0].len()).map(|c| w.iter().zip(v).map(|(a, vj)| a * vj[c]).sum()).collect()
        })
        .collect()
}

/// Multi-head attention with the `{prefix}.{q,k,v,o}` projections of `store`.
pub fn attention(
    store: &ParamStore,
    prefix: &str,
    queries: &Mat,
    keys: &Mat,
    values: &Mat,
    heads: usize,
    mask: Option<&dyn Fn(usize, usize) -> bool>,
) -> Mat {
    let q = linear(store, &format!("{prefix}.q"), queries);
    let k = linear(store, &format!("{prefix}.k"), keys);
    let v = linear(store, &format!("{prefix}.v"), values);
    let d = q[0].len();
    let dh = d / heads;
    let cols = |m: &Mat, h: usize| -> Mat { m.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect() };
    let mut merged: Mat = vec![Vec::with_capacity(d); q.len()];
    for h in 0..heads {
        let out = attend(&cols(&q, h), &cols(&k, h), &cols(&v, h), mask);
        for (m, o) in merged.iter_mut().zip(out) {
            m.extend(o);
        }
    }
    linear(store, &format!("{prefix}.o"), &merged)
}

/// Same-padded convolution of `map[y][x][c]` with `kernel[ky][kx][ci][co]`.
pub fn conv2d(map: &[Vec<Vec<f64>>], kernel: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let (h, w) = (map.len(), map[0].len());
    let [k, _, c_in, c_out] = kernel.shape() else {
        panic!("oracle conv2d: kernel must be rank 4");
    };
    let (k, c_in, c_out) = (*k, *c_in, *c_out);
    let r = (k / 2) as isize;
    let mut out = vec![vec![vec![0.0; c_out]; w]; h];
    for y in 0..h {
        for x in 0..w {
            for co in 0..c_out {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let (sy, sx) = (y as isize + ky as isize - r, x as isize + kx as isize - r);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        for ci in 0..c_in {
                            acc += map[sy as usize][sx as usize][ci] * kernel.get(&[ky, kx, ci, co]);
                        }
                    }
                }
                out[y][x][co] = acc;
            }
        }
    }
    out
}

fn to_map(m: &Mat, h: usize, w: usize) -> Vec<Mat> {
    (0..h).map(|y| m[y * w..(y + 1) * w].to_vec()).collect()
}

fn from_map(map: &[Mat]) -> Mat {
    map.iter().flatten().cloned().collect()
}

/// Bilinear read of `map[y][x][·]` at continuous pixel coordinates, where
/// pixel centres sit at integer coordinates; clamped to the outer centres.
pub fn bilinear(map: &[Mat], y: f64, x: f64) -> Vec<f64> {
    let (h, w) = (map.len(), map[0].len());
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    (0..map[0][0].len())
        .map(|c| {
            map[y0][x0][c] * (1.0 - fy) * (1.0 - fx)
                + map[y0][x1][c] * (1.0 - fy) * fx
                + map[y1][x0][c] * fy * (1.0 - fx)
                + map[y1][x1][c] * fy * fx
        })
        .collect()
}

/// `s×s` bins over a normalized box, each the mean of `samples²` bilinear
/// reads at the sub-bin centres. Row-major over bins.
pub fn roi_align(map: &[Mat], bbox: &BBox, s: usize, samples: usize) -> Mat {
    let (h, w) = (map.len() as f64, map[0].len() as f64);
    let b = [bbox[0].clamp(0.0, 1.0), bbox[1].clamp(0.0, 1.0), bbox[2].clamp(0.0, 1.0), bbox[3].clamp(0.0, 1.0)];
    let (bw, bh) = ((b[2] - b[0]) / s as f64, (b[3] - b[1]) / s as f64);
    let mut out = Vec::with_capacity(s * s);
    for by in 0..s {
        for bx in 0..s {
            let mut acc = vec![0.0; map[0][0].len()];
            for sy in 0..samples {
                for sx in 0..samples {
                    let ny = b[1] + bh * (by as f64 + (sy as f64 + 0.5) / samples as f64);
                    let nx = b[0] + bw * (bx as f64 + (sx as f64 + 0.5) / samples as f64);
                    let v = bilinear(map, ny * h - 0.5, nx * w - 0.5);
                    acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
                }
            }
            let n = (samples * samples) as f64;
            out.push(acc.into_iter().map(|a| a / n).collect());
        }
    }
    out
}

/// Covering detection per grid cell by direct scan.
pub fn layout_assignment(detections: &[Detection], grid: usize) -> Vec<Option<usize>> {
    let mut out = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let (x, y) = ((gx as f64 + 0.5) / grid as f64, (gy as f64 + 0.5) / grid as f64);
            let covering: Vec<usize> = (0..detections.len())
                .filter(|&i| {
                    let b = detections[i].bbox;
                    b[0] <= x && x <= b[2] && b[1] <= y && y <= b[3]
                })
                .collect();
            let best_conf = covering.iter().map(|&i| detections[i].confidence).fold(f64::NEG_INFINITY, f64::max);
            out.push(covering.into_iter().find(|&i| detections[i].confidence == best_conf));
        }
    }
    out
}

pub fn locality_adapter(model: &Lain, l: usize, patches: &Mat, detections: &[Detection]) -> Mat {
    let s = &model.params;
    let cfg = &model.cfg;
    let p = format!("la.{l}");
    let n = cfg.grid;
    let down = ffn(s, &format!("{p}.down"), patches);
    let objects = to_mat(s.value("text.object_table").expect("object table"));
    let null = vector(s, &format!("{p}.layout_null"));
    let layout: Mat = layout_assignment(detections, n)
        .into_iter()
        .map(|a| match a {
            None => null.clone(),
            Some(i) => {
                let d = &detections[i];
                let mut row = d.bbox.to_vec();
                row.push(d.confidence);
                row.extend(&objects[d.class]);
                ffn(s, &format!("{p}.layout"), &vec![row]).remove(0)
            }
        })
        .collect();
    let fused = ffn(s, &format!("{p}.fuse"), &add(&down, &layout));
    let normed = store_layer_norm(s, &format!("{p}.fuse_ln"), &fused, cfg.ln_eps);
    let map = to_map(&normed, n, n);
    let mut sum: Mat = vec![vec![0.0; cfg.adapter_dim]; n * n];
    for &k in &cfg.kernels {
        let kernel = s.value(&format!("{p}.conv{k}.kernel")).expect("kernel");
        let conv = add_row(&from_map(&conv2d(&map, kernel)), &vector(s, &format!("{p}.conv{k}.bias")));
        sum = add(&sum, &conv);
    }
    let merged = ffn(s, &format!("{p}.merge"), &sum);
    let up = ffn(s, &format!("{p}.up"), &merged);
    add(patches, &mul_row(&up, &vector(s, &format!("{p}.gamma"))))
}

/// Context extraction followed by the two counterpart attentions.
pub fn iprm(model: &Lain, l: usize, rh: &Mat, ro: &Mat) -> (Mat, Mat) {
    let s = &model.params;
    let p = format!("ia.{l}");
    let heads = model.cfg.adapter_heads;
    let q = param(s, &format!("{p}.queries"));
    let ch = attention(s, &format!("{p}.context"), &q, rh, rh, heads, None);
    let co = attention(s, &format!("{p}.context"), &q, ro, ro, heads, None);
    let h = attention(s, &format!("{p}.pattern_h"), &ch, &co, &co, heads, None);
    let o = attention(s, &format!("{p}.pattern_o"), &co, &ch, &ch, heads, None);
    (h, o)
}

pub fn interaction_adapter(model: &Lain, l: usize, tokens: &Mat, patches: &Mat, boxes: &[(BBox, BBox)]) -> Mat {
    let s = &model.params;
    let cfg = &model.cfg;
    let p = format!("ia.{l}");
    let map = to_map(patches, cfg.grid, cfg.grid);
    let region = |b: &BBox| {
        let b = ensure_min_extent(b, 1.0 / cfg.grid as f64);
        ffn(s, &format!("{p}.region"), &roi_align(&map, &b, cfg.roi_size, cfg.roi_samples))
    };
    let gamma = vector(s, &format!("{p}.gamma"));
    tokens
        .iter()
        .zip(boxes)
        .map(|(t, (hb, ob))| {
            let (rh, ro) = iprm(model, l, &region(hb), &region(ob));
            let q = ffn(s, &format!("{p}.token"), &vec![t.clone()]);
            let mut cat = attention(s, &format!("{p}.readout"), &q, &rh, &rh, cfg.adapter_heads, None).remove(0);
            cat.extend(attention(s, &format!("{p}.readout"), &q, &ro, &ro, cfg.adapter_heads, None).remove(0));
            let fused = ffn(s, &format!("{p}.fuse"), &vec![cat]).remove(0);
            t.iter().zip(fused).zip(&gamma).map(|((a, f), g)| a + g * f).collect()
        })
        .collect()
}

pub fn patch_embed(model: &Lain, pixels: &[f32]) -> Mat {
    let cfg = &model.cfg;
    let (p, n, size) = (cfg.patch_size, cfg.grid, cfg.image_size());
    let mut rows = Vec::new();
    for gy in 0..n {
        for gx in 0..n {
            let mut row = Vec::new();
            for y in 0..p {
                for x in 0..p {
                    for c in 0..3 {
                        row.push(f64::from(pixels[((gy * p + y) * size + gx * p + x) * 3 + c]));
                    }
                }
            }
            rows.push(row);
        }
    }
    let x = linear(&model.params, "backbone.patch_embed", &rows);
    add(&x, &param(&model.params, "backbone.pos_embed"))
}

/// Pre-LN block over `[ho; cls; patches]`; returns the three segments.
pub fn backbone_layer(model: &Lain, l: usize, ho: &Mat, cls: &Mat, patches: &Mat) -> (Mat, Mat, Mat) {
    let s = &model.params;
    let cfg = &model.cfg;
    let p = format!("backbone.layers.{l}");
    let x: Mat = ho.iter().chain(cls).chain(patches).cloned().collect();
    let n_ho = ho.len();
    let blind = |i: usize, j: usize| i < n_ho || j >= n_ho;
    let mask: Option<&dyn Fn(usize, usize) -> bool> = if !cfg.patches_see_ho && n_ho > 0 { Some(&blind) } else { None };
    let h = store_layer_norm(s, &format!("{p}.ln1"), &x, cfg.ln_eps);
    let x = add(&x, &attention(s, &format!("{p}.attn"), &h, &h, &h, cfg.heads, mask));
    let h = store_layer_norm(s, &format!("{p}.ln2"), &x, cfg.ln_eps);
    let x = add(&x, &ffn(s, &format!("{p}.mlp"), &h));
    (x[..n_ho].to_vec(), x[n_ho..n_ho + 1].to_vec(), x[n_ho + 1..].to_vec())
}

pub fn ho_tokens(model: &Lain, detections: &[Detection]) -> (HoPairIndex, Mat) {
    let human = model.space.human();
    let mut pairs = Vec::new();
    for u in 0..detections.len() {
        for v in 0..detections.len() {
            if u != v && detections[u].class == human {
                pairs.push((u, v));
            }
        }
    }
    let s = &model.params;
    let tokens = pairs
        .iter()
        .map(|&(u, v)| {
            let feat: Vec<f64> = detections[u].feature.iter().chain(&detections[v].feature).copied().collect();
            let (h, o) = (detections[u].bbox, detections[v].bbox);
            let mut geo = h.to_vec();
            geo.extend(o);
            geo.push((o[0] + o[2]) / 2.0 - (h[0] + h[2]) / 2.0);
            geo.push((o[1] + o[3]) / 2.0 - (h[1] + h[3]) / 2.0);
            let a = ffn(s, "ho.feature", &vec![feat]).remove(0);
            let b = ffn(s, "ho.geometry", &vec![geo]).remove(0);
            a.iter().zip(b).map(|(x, y)| x + y).collect()
        })
        .collect();
    (HoPairIndex { pairs }, tokens)
}

/// Final HO tokens, CLS and patch tokens.
pub fn lain_forward(model: &Lain, pixels: &[f32], detections: &[Detection]) -> (HoPairIndex, Mat, Mat, Mat) {
    let cfg = &model.cfg;
    let (pairs, mut ho) = ho_tokens(model, detections);
    let boxes: Vec<(BBox, BBox)> = pairs.pairs.iter().map(|&(u, v)| (detections[u].bbox, detections[v].bbox)).collect();
    let mut patches = patch_embed(model, pixels);
    let mut cls = param(&model.params, "backbone.cls");
    for l in 0..cfg.layers {
        if cfg.use_la {
            patches = locality_adapter(model, l, &patches, detections);
        }
        if cfg.use_ia && !ho.is_empty() {
            ho = interaction_adapter(model, l, &ho, &patches, &boxes);
        }
        (ho, cls, patches) = backbone_layer(model, l, &ho, &cls, &patches);
    }
    (pairs, ho, cls, patches)
}

/// Category text embeddings, one unit row per category.
pub fn text_embeddings(model: &Lain) -> Mat {
    let s = &model.params;
    let objects = to_mat(s.value("text.object_table").expect("object table"));
    let verbs = to_mat(s.value("text.verb_table").expect("verb table"));
    let offset = vector(s, "text.prompt_offset");
    model
        .space
        .categories()
        .iter()
        .map(|&(o, v)| {
            let x: Vec<f64> = objects[o].iter().chain(&verbs[v]).zip(&offset).map(|(a, b)| a + b).collect();
            let e = ffn(s, "text.mixer", &vec![x]).remove(0);
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            e.into_iter().map(|v| v / norm).collect()
        })
        .collect()
}

pub fn scores(model: &Lain, tokens: &Mat) -> Mat {
    let tau = model.params.value("text.log_tau").expect("log_tau").data()[0].exp();
    let logits = matmul(tokens, &transpose(&text_embeddings(model)));
    logits.iter().map(|r| r.iter().map(|z| 1.0 / (1.0 + (-z / tau).exp())).collect()).collect()
}

pub fn focal_bce(p: &Mat, y: &Mat, alpha: f64, gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (pr, yr) in p.iter().zip(y) {
        for (&p, &y) in pr.iter().zip(yr) {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            total += if y > 0.5 {
                -alpha * (1.0 - p).powf(gamma) * p.ln()
            } else {
                -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
            };
            n += 1;
        }
    }
    total / n as f64
}

/// Whether prediction `k` of `sorted` is a true positive, by scanning every
/// earlier prediction's claims from scratch.
fn claims(sorted: &[&Prediction], gt: &[&GroundTruth], threshold: f64) -> Vec<Option<usize>> {
    let mut result: Vec<Option<usize>> = Vec::new();
    for p in sorted {
        let mut pick: Option<usize> = None;
        let mut pick_q = f64::NEG_INFINITY;
        for (j, g) in gt.iter().enumerate() {
            let already = result.contains(&Some(j));
            let same = g.scene == p.scene && g.category == p.category;
            let (ih, io) = (iou(&p.human_box, &g.human_box), iou(&p.object_box, &g.object_box));
            if !already && same && ih > threshold && io > threshold && ih.min(io) > pick_q {
                pick = Some(j);
                pick_q = ih.min(io);
            }
        }
        result.push(pick);
    }
    result
}

fn sorted_preds(preds: &[Prediction]) -> Vec<&Prediction> {
    let mut v: Vec<&Prediction> = preds.iter().collect();
    v.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then((a.scene, a.pair, a.category).cmp(&(b.scene, b.pair, b.category)))
    });
    v
}

/// AP as the sum over true positives of `1/n_gt` times the best precision at
/// that rank or any later one. `None` outcomes are skipped.
fn ap_from_outcomes(outcomes: &[Option<bool>], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let kept: Vec<bool> = outcomes.iter().flatten().copied().collect();
    let precision: Vec<f64> = (0..kept.len())
        .map(|k| kept[..=k].iter().filter(|&&t| t).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..kept.len() {
        if kept[k] {
            let best = precision[k..].iter().copied().fold(0.0, f64::max);
            ap += best / n_gt as f64;
        }
    }
    Some(ap)
}

pub fn category_ap(preds: &[Prediction], gt: &[GroundTruth], threshold: f64) -> Option<f64> {
    let sorted = sorted_preds(preds);
    let gts: Vec<&GroundTruth> = gt.iter().collect();
    let outcomes: Vec<Option<bool>> = claims(&sorted, &gts, threshold).into_iter().map(|c| Some(c.is_some())).collect();
    ap_from_outcomes(&outcomes, gt.len())
}

pub fn band_ap(
    preds: &[Prediction],
    gt: &[GroundTruth],
    threshold: f64,
    bands: &SizeBands,
    role: Role,
    band: Band,
) -> Option<f64> {
    let which = |h: &BBox, o: &BBox| {
        let a = area(match role {
            Role::Human => h,
            Role::Object => o,
        });
        let b = if a < bands.small_below {
            Band::Small
        } else if a < bands.large_from {
            Band::Medium
        } else {
            Band::Large
        };
        b == band
    };
    let sorted = sorted_preds(preds);
    let gts: Vec<&GroundTruth> = gt.iter().collect();
    let outcomes: Vec<Option<bool>> = claims(&sorted, &gts, threshold)
        .into_iter()
        .zip(&sorted)
        .map(|(c, p)| match c {
            Some(j) if which(&gt[j].human_box, &gt[j].object_box) => Some(true),
            Some(_) => None,
            None if which(&p.human_box, &p.object_box) => Some(false),
            None => None,
        })
        .collect();
    let n = gt.iter().filter(|g| which(&g.human_box, &g.object_box)).count();
    ap_from_outcomes(&outcomes, n)
}

/// Mean over categories with gt of the per-category AP.
pub fn mean_ap(preds: &[Prediction], gt: &[GroundTruth], categories: &[usize], threshold: f64) -> Option<f64> {
    let aps: Vec<f64> = categories
        .iter()
        .filter_map(|&c| {
            let p: Vec<Prediction> = preds.iter().filter(|p| p.category == c).cloned().collect();
            let g: Vec<GroundTruth> = gt.iter().filter(|g| g.category == c).cloned().collect();
            category_ap(&p, &g, threshold)
        })
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}
