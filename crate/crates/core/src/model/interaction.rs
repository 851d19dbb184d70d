use std::collections::HashMap;

use rand::Rng;

use super::{layer_prefix, Lain, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{ensure_min_extent, BBox};
use crate::nn::{self, AttentionVars, Init};
use crate::tensor::{Graph, Tensor, Var};

pub(super) fn init<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig, p: &str) -> Result<()> {
    let (d, da) = (cfg.width, cfg.adapter_dim);
    init.ffn(&format!("{p}.region"), d, da, da, 1.0)?;
    init.randn(&format!("{p}.queries"), &[cfg.num_queries, da], 1.0)?;
    init.attention(&format!("{p}.context"), da, 1.0)?;
    init.attention(&format!("{p}.pattern_h"), da, 1.0)?;
    init.attention(&format!("{p}.pattern_o"), da, 1.0)?;
    init.ffn(&format!("{p}.token"), d, da, da, 1.0)?;
    init.attention(&format!("{p}.readout"), da, 1.0)?;
    init.ffn(&format!("{p}.fuse"), 2 * da, da, d, 1.0)?;
    init.tensor(&format!("{p}.gamma"), Tensor::zeros(&[d]))
}

#[derive(Debug, Clone, Copy)]
pub struct IprmOutput {
    pub human: Var,
    pub object: Var,
}

struct Weights {
    queries: Var,
    context: AttentionVars,
    pattern_h: AttentionVars,
    pattern_o: AttentionVars,
}

impl Weights {
    fn load(g: &mut Graph, model: &Lain, l: usize) -> Result<Self> {
        let p = layer_prefix("ia", l);
        let s = &model.params;
        Ok(Self {
            queries: g.param(s, &format!("{p}.queries"))?,
            context: AttentionVars::load(g, s, &format!("{p}.context"))?,
            pattern_h: AttentionVars::load(g, s, &format!("{p}.pattern_h"))?,
            pattern_o: AttentionVars::load(g, s, &format!("{p}.pattern_o"))?,
        })
    }
}

fn context(g: &mut Graph, model: &Lain, w: &Weights, region: Var) -> Result<Var> {
    nn::multi_head_attention(g, w.queries, region, region, model.cfg.adapter_heads, &w.context, None)
}

fn pattern(g: &mut Graph, model: &Lain, w: &Weights, ch: Var, co: Var) -> Result<IprmOutput> {
    let heads = model.cfg.adapter_heads;
    let human = nn::multi_head_attention(g, ch, co, co, heads, &w.pattern_h, None)?;
    let object = nn::multi_head_attention(g, co, ch, ch, heads, &w.pattern_o, None)?;
    Ok(IprmOutput { human, object })
}

/// Query-based context extraction from each region, then each context
/// attends to its counterpart. Inputs are `s²×D_a` region features.
pub fn iprm(g: &mut Graph, model: &Lain, l: usize, human: Var, object: Var) -> Result<IprmOutput> {
    let w = Weights::load(g, model, l)?;
    let ch = context(g, model, &w, human)?;
    let co = context(g, model, &w, object)?;
    pattern(g, model, &w, ch, co)
}

/// `s²×D_a` region features of one box on the patch map.
fn region_features(g: &mut Graph, model: &Lain, l: usize, map: Var, bbox: &BBox) -> Result<Var> {
    let cfg = &model.cfg;
    let bbox = ensure_min_extent(bbox, 1.0 / cfg.grid as f64);
    let r = g.roi_align(map, bbox, cfg.roi_size, cfg.roi_samples)?;
    let r = g.reshape(r, &[cfg.roi_size * cfg.roi_size, cfg.width])?;
    nn::ffn(g, &model.params, &format!("{}.region", layer_prefix("ia", l)), r)
}

fn box_key(b: &BBox) -> [u64; 4] {
    b.map(f64::to_bits)
}

/// Updates every HO token from its pair's human and object regions of the
/// patch map. Row `i` of the output depends only on row `i` of `tokens` and
/// on `boxes[i]`.
pub fn interaction_adapter(
    g: &mut Graph,
    model: &Lain,
    l: usize,
    tokens: Var,
    patches: Var,
    boxes: &[(BBox, BBox)],
) -> Result<Var> {
    let cfg = &model.cfg;
    let s = &model.params;
    let p = layer_prefix("ia", l);
    let n = g.value(tokens).rows();
    if n != boxes.len() {
        return Err(Error::invalid(format!("{n} HO tokens but {} box pairs", boxes.len())));
    }
    if n == 0 {
        return Ok(tokens);
    }
    let map = g.reshape(patches, &[cfg.grid, cfg.grid, cfg.width])?;
    let w = Weights::load(g, model, l)?;

    // A box is shared by every pair its detection takes part in.
    let mut contexts: HashMap<[u64; 4], Var> = HashMap::new();
    let mut context_of = |g: &mut Graph, b: &BBox| -> Result<Var> {
        if let Some(&v) = contexts.get(&box_key(b)) {
            return Ok(v);
        }
        let r = region_features(g, model, l, map, b)?;
        let c = context(g, model, &w, r)?;
        contexts.insert(box_key(b), c);
        Ok(c)
    };

    let queries = nn::ffn(g, s, &format!("{p}.token"), tokens)?;
    let readout = AttentionVars::load(g, s, &format!("{p}.readout"))?;
    let mut pooled = Vec::with_capacity(n);
    for (i, (hb, ob)) in boxes.iter().enumerate() {
        let ch = context_of(g, hb)?;
        let co = context_of(g, ob)?;
        let out = pattern(g, model, &w, ch, co)?;
        let q = g.slice_rows(queries, i, 1)?;
        let rh = nn::multi_head_attention(g, q, out.human, out.human, cfg.adapter_heads, &readout, None)?;
        let ro = nn::multi_head_attention(g, q, out.object, out.object, cfg.adapter_heads, &readout, None)?;
        pooled.push(g.concat_cols(&[rh, ro])?);
    }
    let pooled = g.concat_rows(&pooled)?;
    let fused = nn::ffn(g, s, &format!("{p}.fuse"), pooled)?;
    let gamma = g.param(s, &format!("{p}.gamma"))?;
    let gated = g.mul_row(fused, gamma)?;
    g.add(tokens, gated)
}
