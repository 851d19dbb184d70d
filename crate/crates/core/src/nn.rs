//! Layers composed from graph primitives: affine maps, two-layer FFNs, and
//! multi-head attention. Parameters are looked up by dotted prefix.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Registers freshly initialized parameters under a common prefix.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub trainable: bool,
}

impl<R: Rng> Init<'_, R> {
    pub fn tensor(&mut self, name: &str, t: Tensor) -> Result<()> {
        self.store.insert(name, t, self.trainable)
    }

    pub fn randn(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let t = Tensor::randn(shape, std, self.rng);
        self.tensor(name, t)
    }

    /// `{prefix}.weight` (`d_in×d_out`, fan-in scaled) and `{prefix}.bias`.
    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, gain: f64) -> Result<()> {
        self.randn(&format!("{prefix}.weight"), &[d_in, d_out], gain / (d_in as f64).sqrt())?;
        self.tensor(&format!("{prefix}.bias"), Tensor::zeros(&[d_out]))
    }

    /// Two affine maps with a GELU between (`fc1`, `fc2`).
    pub fn ffn(&mut self, prefix: &str, d_in: usize, hidden: usize, d_out: usize, gain: f64) -> Result<()> {
        self.linear(&format!("{prefix}.fc1"), d_in, hidden, 1.0)?;
        self.linear(&format!("{prefix}.fc2"), hidden, d_out, gain)
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.tensor(&format!("{prefix}.gain"), Tensor::filled(&[dim], 1.0))?;
        self.tensor(&format!("{prefix}.bias"), Tensor::zeros(&[dim]))
    }

    /// Query/key/value/output projections, each `dim×dim` with bias.
    pub fn attention(&mut self, prefix: &str, dim: usize, gain: f64) -> Result<()> {
        for p in ["q", "k", "v"] {
            self.linear(&format!("{prefix}.{p}"), dim, dim, 1.0)?;
        }
        self.linear(&format!("{prefix}.o"), dim, dim, gain)
    }
}

pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn ffn(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, store, &format!("{prefix}.fc2"), h)
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, eps)
}

/// Projection weights of one attention block, already placed on a graph.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionVars {
    pub fn load(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut get = |s: &str| g.param(store, &format!("{prefix}.{s}"));
        Ok(Self {
            wq: get("q.weight")?,
            bq: get("q.bias")?,
            wk: get("k.weight")?,
            bk: get("k.bias")?,
            wv: get("v.weight")?,
            bv: get("v.bias")?,
            wo: get("o.weight")?,
            bo: get("o.bias")?,
        })
    }

    /// Identity projections with zero biases.
    pub fn identity(g: &mut Graph, dim: usize) -> Self {
        let mut eye = || g.constant(Tensor::identity(dim));
        let (wq, wk, wv, wo) = (eye(), eye(), eye(), eye());
        let mut zero = || g.constant(Tensor::zeros(&[dim]));
        let (bq, bk, bv, bo) = (zero(), zero(), zero(), zero());
        Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }
}

/// Scaled dot-product attention over `heads` column groups with learned
/// projections. `mask[i * n_k + j] == false` hides key `j` from query `i`.
pub fn multi_head_attention(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
    w: &AttentionVars,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let d = g.value(queries).cols();
    let n_k = g.value(keys).rows();
    if n_k == 0 {
        return Err(Error::EmptyKeys);
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::invalid(format!(
            "attention: width {d} not divisible by {heads} heads"
        )));
    }
    if g.value(values).rows() != n_k {
        return Err(Error::invalid(format!(
            "attention: {} value rows for {n_k} keys",
            g.value(values).rows()
        )));
    }
    let q = g.matmul(queries, w.wq)?;
    let q = g.add_row(q, w.bq)?;
    let k = g.matmul(keys, w.wk)?;
    let k = g.add_row(k, w.bk)?;
    let v = g.matmul(values, w.wv)?;
    let v = g.add_row(v, w.bv)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, scale);
        let attn = g.softmax_rows_masked(logits, mask);
        outs.push(g.matmul(attn, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let o = g.matmul(merged, w.wo)?;
    g.add_row(o, w.bo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attention_store(dim: usize) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Init {
            store: &mut store,
            rng: &mut rng,
            trainable: true,
        }
        .attention("attn", dim, 1.0)
        .unwrap();
        store
    }

    #[test]
    fn single_key_returns_projected_value() {
        let store = attention_store(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let w = AttentionVars::load(&mut g, &store, "attn").unwrap();
        let q = g.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
        let kv = g.constant(Tensor::randn(&[1, 8], 1.0, &mut rng));
        let out = multi_head_attention(&mut g, q, kv, kv, 4, &w, None).unwrap();
        // softmax over one logit is 1: out = (kv Wv + bv) Wo + bo for every query
        let v = linear(&mut g, &store, "attn.v", kv).unwrap();
        let expect = linear(&mut g, &store, "attn.o", v).unwrap();
        for r in 0..3 {
            for (a, b) in g.value(out).row(r).iter().zip(g.value(expect).row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_keys_give_projected_common_value() {
        let store = attention_store(8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let w = AttentionVars::load(&mut g, &store, "attn").unwrap();
        let row = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let keys = Tensor::from_rows(&vec![row.data().to_vec(); 5]).unwrap();
        let q = g.constant(Tensor::randn(&[2, 8], 1.0, &mut rng));
        let k = g.constant(keys);
        let single = g.constant(row);
        let out = multi_head_attention(&mut g, q, k, k, 2, &w, None).unwrap();
        let v = linear(&mut g, &store, "attn.v", single).unwrap();
        let expect = linear(&mut g, &store, "attn.o", v).unwrap();
        for r in 0..2 {
            for (a, b) in g.value(out).row(r).iter().zip(g.value(expect).row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_keys_is_an_error() {
        let mut g = Graph::new();
        let w = AttentionVars::identity(&mut g, 4);
        let q = g.constant(Tensor::zeros(&[1, 4]));
        let k = g.constant(Tensor::new(vec![0, 4], vec![]).unwrap());
        assert!(matches!(
            multi_head_attention(&mut g, q, k, k, 1, &w, None),
            Err(Error::EmptyKeys)
        ));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut g = Graph::new();
        let w = AttentionVars::identity(&mut g, 6);
        let q = g.constant(Tensor::zeros(&[1, 6]));
        assert!(multi_head_attention(&mut g, q, q, q, 4, &w, None).is_err());
    }
}
