//! Compositional text-embedding stand-in and the sigmoid score head.
//!
//! Each HOI category embeds as `normalize(mixer([object; verb] + offset))`,
//! where the object and verb tables and the mixer are frozen and only the
//! shared offset and the logit temperature train. Unseen categories get rows
//! through the same composition.

use rand::Rng;

use super::{Lain, ModelConfig};
use crate::category::CategorySpace;
use crate::error::{Error, Result};
use crate::nn::{self, Init};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub(super) fn init_frozen<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig, space: &CategorySpace) -> Result<()> {
    let dt = cfg.text_dim;
    for (name, n) in [("text.object_table", space.num_objects()), ("text.verb_table", space.num_verbs())] {
        let mut t = Tensor::randn(&[n, dt], 1.0, init.rng);
        for r in 0..n {
            let row = &mut t.data_mut()[r * dt..(r + 1) * dt];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= norm);
        }
        init.tensor(name, t)?;
    }
    init.ffn("text.mixer", 2 * dt, cfg.width, cfg.width, 1.0)
}

/// `E`: one unit-norm row per HOI category.
pub fn text_embeddings(g: &mut Graph, model: &Lain) -> Result<Var> {
    let dt = model.cfg.text_dim;
    let objects = model.params.value("text.object_table")?;
    let verbs = model.params.value("text.verb_table")?;
    let cats = model.space.categories();
    let mut rows = Vec::with_capacity(cats.len() * 2 * dt);
    for &(o, v) in cats {
        rows.extend_from_slice(objects.row(o));
        rows.extend_from_slice(verbs.row(v));
    }
    let x = g.constant(Tensor::from_parts(vec![cats.len(), 2 * dt], rows));
    let offset = g.param(&model.params, "text.prompt_offset")?;
    let x = g.add_row(x, offset)?;
    let e = nn::ffn(g, &model.params, "text.mixer", x)?;
    g.l2_normalize_rows(e)
}

/// `S = sigmoid(T Eᵀ / tau)` for a fixed temperature.
pub fn compute_scores(g: &mut Graph, tokens: Var, embeddings: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidState(format!("logit temperature must be positive, got {tau}")));
    }
    let logits = g.matmul_nt(tokens, embeddings)?;
    let logits = g.scale(logits, 1.0 / tau);
    Ok(g.sigmoid(logits))
}

/// Score head with the learned temperature `exp(text.log_tau)`.
pub(super) fn scores_learned_tau(g: &mut Graph, params: &ParamStore, tokens: Var, embeddings: Var) -> Result<Var> {
    let log_tau = g.param(params, "text.log_tau")?;
    let tau = g.value(log_tau).data()[0].exp();
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidState(format!("logit temperature must be positive, got {tau}")));
    }
    let inv = g.scale(log_tau, -1.0);
    let inv = g.exp(inv);
    let logits = g.matmul_nt(tokens, embeddings)?;
    let logits = g.mul_scalar(logits, inv)?;
    Ok(g.sigmoid(logits))
}
