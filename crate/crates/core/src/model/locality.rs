use rand::Rng;

use super::{layer_prefix, Lain, ModelConfig};
use crate::detect::Detection;
use crate::error::Result;
use crate::geometry::contains_point;
use crate::nn::{self, Init};
use crate::tensor::{Graph, Tensor, Var};

pub(super) fn init<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig, p: &str) -> Result<()> {
    let (d, da) = (cfg.width, cfg.adapter_dim);
    init.ffn(&format!("{p}.down"), d, da, da, 1.0)?;
    init.ffn(&format!("{p}.layout"), 5 + cfg.text_dim, da, da, 1.0)?;
    init.randn(&format!("{p}.layout_null"), &[1, da], 0.1)?;
    init.ffn(&format!("{p}.fuse"), da, da, da, 1.0)?;
    init.layer_norm(&format!("{p}.fuse_ln"), da)?;
    for &k in &cfg.kernels {
        let std = 1.0 / ((k * k * da) as f64).sqrt();
        init.randn(&format!("{p}.conv{k}.kernel"), &[k, k, da, da], std)?;
        init.tensor(&format!("{p}.conv{k}.bias"), Tensor::zeros(&[da]))?;
    }
    init.ffn(&format!("{p}.merge"), da, da, da, 1.0)?;
    init.ffn(&format!("{p}.up"), da, da, d, 1.0)?;
    init.tensor(&format!("{p}.gamma"), Tensor::zeros(&[d]))
}

/// Covering detection of each grid cell in row-major order: the most confident
/// detection whose box contains the cell centre, lowest index on ties.
pub fn layout_assignment(detections: &[Detection], grid: usize) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let (x, y) = ((gx as f64 + 0.5) / grid as f64, (gy as f64 + 0.5) / grid as f64);
            let mut best: Option<usize> = None;
            for (i, d) in detections.iter().enumerate() {
                if contains_point(&d.bbox, x, y) && best.is_none_or(|b| d.confidence > detections[b].confidence) {
                    best = Some(i);
                }
            }
            out.push(best);
        }
    }
    out
}

/// `L`: one `D_a` row per grid cell (`grid²×D_a`, row-major).
pub fn build_layout_embedding(g: &mut Graph, model: &Lain, l: usize, detections: &[Detection]) -> Result<Var> {
    let p = layer_prefix("la", l);
    let null = g.param(&model.params, &format!("{p}.layout_null"))?;
    let assign = layout_assignment(detections, model.cfg.grid);
    if detections.is_empty() {
        return g.gather_rows(null, &vec![0; assign.len()]);
    }
    let dt = model.cfg.text_dim;
    let objects = model.params.value("text.object_table")?;
    let mut rows = Vec::with_capacity(detections.len() * (5 + dt));
    for d in detections {
        rows.extend_from_slice(&d.bbox);
        rows.push(d.confidence);
        rows.extend_from_slice(objects.row(d.class));
    }
    let x = g.constant(Tensor::from_parts(vec![detections.len(), 5 + dt], rows));
    let emb = nn::ffn(g, &model.params, &format!("{p}.layout"), x)?;
    let table = g.concat_rows(&[emb, null])?;
    let index: Vec<usize> = assign.iter().map(|a| a.unwrap_or(detections.len())).collect();
    g.gather_rows(table, &index)
}

/// Neighbourhood aggregation of patch tokens, gated back into the residual
/// stream: `F + γ ⊙ FFN(FFN(Σ_k Conv_k(LN(FFN(FFN(F) + L)))))`.
pub fn locality_adapter(
    g: &mut Graph,
    model: &Lain,
    l: usize,
    patches: Var,
    detections: &[Detection],
) -> Result<Var> {
    let cfg = &model.cfg;
    let s = &model.params;
    let p = layer_prefix("la", l);
    let (n, da) = (cfg.grid, cfg.adapter_dim);

    let f = nn::ffn(g, s, &format!("{p}.down"), patches)?;
    let layout = build_layout_embedding(g, model, l, detections)?;
    let x = g.add(f, layout)?;
    let x = nn::ffn(g, s, &format!("{p}.fuse"), x)?;
    let x = nn::layer_norm(g, s, &format!("{p}.fuse_ln"), x, cfg.ln_eps)?;
    let map = g.reshape(x, &[n, n, da])?;

    let mut sum: Option<Var> = None;
    for &k in &cfg.kernels {
        let kernel = g.param(s, &format!("{p}.conv{k}.kernel"))?;
        let bias = g.param(s, &format!("{p}.conv{k}.bias"))?;
        let y = g.conv2d(map, kernel)?;
        let y = g.reshape(y, &[n * n, da])?;
        let y = g.add_row(y, bias)?;
        sum = Some(match sum {
            Some(acc) => g.add(acc, y)?,
            None => y,
        });
    }
    let sum = sum.expect("kernel set validated non-empty");
    let merged = nn::ffn(g, s, &format!("{p}.merge"), sum)?;
    let up = nn::ffn(g, s, &format!("{p}.up"), merged)?;
    let gamma = g.param(s, &format!("{p}.gamma"))?;
    let gated = g.mul_row(up, gamma)?;
    g.add(patches, gated)
}
