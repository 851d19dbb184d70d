//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Probe at most this many entries per parameter (sampled by `seed`).
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries_per_param: None,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn entries_checked(&self) -> usize {
        self.params.iter().map(|p| p.entries).sum()
    }
}

/// `|analytic - numeric| / max(1, |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares analytic gradients of `f` against central differences for every
/// named parameter. Non-scalar outputs are reduced with a fixed random linear
/// functional drawn from `opts.seed`.
pub fn grad_check<F>(
    store: &ParamStore,
    names: &[String],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var> + Sync,
{
    if !(1e-7..=1e-4).contains(&opts.eps) {
        return Err(Error::invalid(format!(
            "grad_check: eps {} outside [1e-7, 1e-4]",
            opts.eps
        )));
    }
    // power-of-two step: perturbing dyadic values stays exact
    let step = opts.eps.log2().round().exp2();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let probe = probe_weights(g.value(out), opts.seed);
    let root = reduce(&mut g, out, &probe)?;
    let grads = g.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut probes: Vec<(usize, usize)> = Vec::new();
    for (pi, name) in names.iter().enumerate() {
        let p = store.get(name)?;
        if !p.trainable {
            return Err(Error::invalid(format!("grad_check: `{name}` is frozen")));
        }
        let n = p.value.numel();
        let picks: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        probes.extend(picks.into_iter().map(|i| (pi, i)));
    }

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        let root = reduce(&mut g, out, &probe)?;
        Ok(g.value(root).data()[0])
    };
    let results: Vec<Result<f64>> = opts.exec.map(&probes, |&(pi, idx)| {
        let name = &names[pi];
        let mut plus = store.clone();
        plus.value_mut(name)?.data_mut()[idx] += step;
        let mut minus = store.clone();
        minus.value_mut(name)?.data_mut()[idx] -= step;
        let (fp, fm) = (eval(&plus)?, eval(&minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("{name}[{idx}]")));
        }
        Ok((fp - fm) / (2.0 * step))
    });

    let mut params: Vec<ParamCheck> = names
        .iter()
        .map(|n| ParamCheck {
            name: n.clone(),
            entries: 0,
            max_rel_error: 0.0,
        })
        .collect();
    let mut worst: Option<(String, usize)> = None;
    let mut max_rel = 0.0;
    for (&(pi, idx), numeric) in probes.iter().zip(results) {
        let numeric = numeric?;
        let name = &names[pi];
        let analytic = grads.param(name).map_or(0.0, |t| t.data()[idx]);
        if !analytic.is_finite() {
            return Err(Error::NonFinite(format!("{name}[{idx}] (analytic)")));
        }
        let err = relative_error(analytic, numeric);
        let pc = &mut params[pi];
        pc.entries += 1;
        pc.max_rel_error = pc.max_rel_error.max(err);
        if err > max_rel || worst.is_none() {
            max_rel = err.max(max_rel);
            worst = Some((name.clone(), idx));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        params,
    })
}

fn probe_weights(out: &Tensor, seed: u64) -> Option<Tensor> {
    if out.numel() == 1 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Some(Tensor::randn(out.shape(), 1.0, &mut rng))
}

fn reduce(g: &mut Graph, out: Var, probe: &Option<Tensor>) -> Result<Var> {
    match probe {
        None => Ok(out),
        Some(w) => {
            let w = g.constant(w.clone());
            let prod = g.mul(out, w)?;
            Ok(g.sum(prod))
        }
    }
}
