use rand::Rng;

use super::{layer_prefix, Lain, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{self, AttentionVars, Init};
use crate::tensor::{Graph, Tensor, Var};

/// Transformer state between layers: `[HO tokens; CLS; patches]`.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    pub ho_tokens: Option<Var>,
    pub cls: Var,
    pub patches: Var,
    pub layer: usize,
}

pub(super) fn init<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig) -> Result<()> {
    let d = cfg.width;
    let patch_dim = cfg.patch_size * cfg.patch_size * 3;
    init.linear("backbone.patch_embed", patch_dim, d, 1.0)?;
    init.randn("backbone.pos_embed", &[cfg.num_patches(), d], 0.1)?;
    init.randn("backbone.cls", &[1, d], 0.5)?;
    for l in 0..cfg.layers {
        let p = layer_prefix("backbone.layers", l);
        init.layer_norm(&format!("{p}.ln1"), d)?;
        init.attention(&format!("{p}.attn"), d, 0.5)?;
        init.layer_norm(&format!("{p}.ln2"), d)?;
        init.ffn(&format!("{p}.mlp"), d, cfg.mlp_ratio * d, d, 0.5)?;
    }
    Ok(())
}

/// Flattens the image into `grid²` rows of `patch²·3` pixel values.
pub(crate) fn patchify(cfg: &ModelConfig, pixels: &[f32]) -> Result<Tensor> {
    let size = cfg.image_size();
    if pixels.len() != size * size * 3 {
        return Err(Error::invalid(format!(
            "image has {} values, model expects {size}×{size}×3",
            pixels.len()
        )));
    }
    let (p, n) = (cfg.patch_size, cfg.grid);
    let mut out = Vec::with_capacity(pixels.len());
    for gy in 0..n {
        for gx in 0..n {
            for y in gy * p..(gy + 1) * p {
                let row = (y * size + gx * p) * 3;
                out.extend(pixels[row..row + p * 3].iter().map(|&v| f64::from(v)));
            }
        }
    }
    Ok(Tensor::from_parts(vec![n * n, p * p * 3], out))
}

/// Linear patch embedding plus learned positions; the CLS token is its own
/// parameter. HO tokens are attached separately.
pub fn embed_patches(g: &mut Graph, model: &Lain, pixels: &[f32]) -> Result<TokenSequence> {
    let patches = patchify(&model.cfg, pixels)?;
    let x = g.constant(patches);
    let x = nn::linear(g, &model.params, "backbone.patch_embed", x)?;
    let pos = g.param(&model.params, "backbone.pos_embed")?;
    let patches = g.add(x, pos)?;
    let cls = g.param(&model.params, "backbone.cls")?;
    Ok(TokenSequence {
        ho_tokens: None,
        cls,
        patches,
        layer: 0,
    })
}

/// Pre-LN transformer block over the concatenated sequence, re-split.
pub fn backbone_layer(g: &mut Graph, model: &Lain, l: usize, seq: TokenSequence) -> Result<TokenSequence> {
    let cfg = &model.cfg;
    let p = layer_prefix("backbone.layers", l);
    let n_ho = seq.ho_tokens.map_or(0, |t| g.value(t).rows());
    let n_patch = g.value(seq.patches).rows();
    let mut parts = Vec::with_capacity(3);
    parts.extend(seq.ho_tokens);
    parts.push(seq.cls);
    parts.push(seq.patches);
    let x = g.concat_rows(&parts)?;
    let total = n_ho + 1 + n_patch;

    let mask: Option<Vec<bool>> = (!cfg.patches_see_ho && n_ho > 0).then(|| {
        (0..total)
            .flat_map(|i| (0..total).map(move |j| i < n_ho || j >= n_ho))
            .collect()
    });

    let h = nn::layer_norm(g, &model.params, &format!("{p}.ln1"), x, cfg.ln_eps)?;
    let w = AttentionVars::load(g, &model.params, &format!("{p}.attn"))?;
    let a = nn::multi_head_attention(g, h, h, h, cfg.heads, &w, mask.as_deref())?;
    let x = g.add(x, a)?;
    let h = nn::layer_norm(g, &model.params, &format!("{p}.ln2"), x, cfg.ln_eps)?;
    let m = nn::ffn(g, &model.params, &format!("{p}.mlp"), h)?;
    let x = g.add(x, m)?;

    let ho_tokens = if n_ho > 0 { Some(g.slice_rows(x, 0, n_ho)?) } else { None };
    let cls = g.slice_rows(x, n_ho, 1)?;
    let patches = g.slice_rows(x, n_ho + 1, n_patch)?;
    Ok(TokenSequence {
        ho_tokens,
        cls,
        patches,
        layer: seq.layer + 1,
    })
}
