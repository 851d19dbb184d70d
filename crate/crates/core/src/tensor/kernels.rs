//! Raw numeric kernels shared by the graph's forward and backward passes.
//!
//! Matrices are row-major slices with explicit extents; nothing here allocates
//! graph state.

use crate::error::{Error, Result};

/// `a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-row normalization statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    dim: usize,
    eps: f64,
) -> (Vec<f64>, NormCache) {
    let rows = x.len() / dim;
    let mut out = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xs = &x[r * dim..(r + 1) * dim];
        let mean = xs.iter().sum::<f64>() / dim as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let denom = (var + eps).sqrt();
        // zero variance with eps = 0: the centred vector is all zeros anyway
        let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        inv_std[r] = inv;
        for d in 0..dim {
            let n = (xs[d] - mean) * inv;
            normalized[r * dim + d] = n;
            out[r * dim + d] = n * gain[d] + bias[d];
        }
    }
    (
        out,
        NormCache {
            normalized,
            inv_std,
        },
    )
}

/// Returns `(d_input, d_gain, d_bias)`.
pub fn layer_norm_backward(
    grad: &[f64],
    gain: &[f64],
    cache: &NormCache,
    dim: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = grad.len() / dim;
    let mut dx = vec![0.0; grad.len()];
    let mut dgain = vec![0.0; dim];
    let mut dbias = vec![0.0; dim];
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let g = &grad[r * dim..(r + 1) * dim];
        let xhat = &cache.normalized[r * dim..(r + 1) * dim];
        for d in 0..dim {
            dgain[d] += g[d] * xhat[d];
            dbias[d] += g[d];
            dxhat[d] = g[d] * gain[d];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / dim as f64;
        let mean_dxhat_xhat =
            dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
        let inv = cache.inv_std[r];
        for d in 0..dim {
            dx[r * dim + d] = inv * (dxhat[d] - mean_dxhat - xhat[d] * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

/// Row softmax; `mask[i*n + j] == false` excludes the entry.
pub fn softmax_rows(x: &[f64], n: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let rows = x.len() / n;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let allowed = |j: usize| mask.is_none_or(|m| m[r * n + j]);
        let row = &x[r * n..(r + 1) * n];
        let max = (0..n)
            .filter(|&j| allowed(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..n {
            if allowed(j) {
                let e = (row[j] - max).exp();
                out[r * n + j] = e;
                total += e;
            }
        }
        for v in &mut out[r * n..(r + 1) * n] {
            *v /= total;
        }
    }
    out
}

/// Shape of a `k×k×c_in×c_out` kernel applied to an `h×w×c_in` map.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvDims {
    fn taps(&self, i: usize, j: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let pad = (self.k / 2) as isize;
        let (h, w, k) = (self.h as isize, self.w as isize, self.k);
        (0..k * k).filter_map(move |t| {
            let (di, dj) = ((t / k) as isize, (t % k) as isize);
            let (y, x) = (i as isize + di - pad, j as isize + dj - pad);
            (y >= 0 && y < h && x >= 0 && x < w).then_some((t, (y * w + x) as usize))
        })
    }
}

/// Same-padded convolution (zero padding, stride 1).
pub fn conv2d(input: &[f64], kernel: &[f64], d: ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.h * d.w * d.c_out];
    for i in 0..d.h {
        for j in 0..d.w {
            let o = &mut out[(i * d.w + j) * d.c_out..(i * d.w + j + 1) * d.c_out];
            for (tap, cell) in d.taps(i, j) {
                let x = &input[cell * d.c_in..(cell + 1) * d.c_in];
                let kt = &kernel[tap * d.c_in * d.c_out..(tap + 1) * d.c_in * d.c_out];
                for (ci, &xv) in x.iter().enumerate() {
                    let krow = &kt[ci * d.c_out..(ci + 1) * d.c_out];
                    for (ov, &kv) in o.iter_mut().zip(krow) {
                        *ov += xv * kv;
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernel)`.
pub fn conv2d_backward(
    grad: &[f64],
    input: &[f64],
    kernel: &[f64],
    d: ConvDims,
) -> (Vec<f64>, Vec<f64>) {
    let mut din = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernel.len()];
    for i in 0..d.h {
        for j in 0..d.w {
            let g = &grad[(i * d.w + j) * d.c_out..(i * d.w + j + 1) * d.c_out];
            for (tap, cell) in d.taps(i, j) {
                let kt = &kernel[tap * d.c_in * d.c_out..(tap + 1) * d.c_in * d.c_out];
                let dkt = &mut dk[tap * d.c_in * d.c_out..(tap + 1) * d.c_in * d.c_out];
                for ci in 0..d.c_in {
                    let xv = input[cell * d.c_in + ci];
                    let krow = &kt[ci * d.c_out..(ci + 1) * d.c_out];
                    let dkrow = &mut dkt[ci * d.c_out..(ci + 1) * d.c_out];
                    let mut acc = 0.0;
                    for co in 0..d.c_out {
                        acc += g[co] * krow[co];
                        dkrow[co] += g[co] * xv;
                    }
                    din[cell * d.c_in + ci] += acc;
                }
            }
        }
    }
    (din, dk)
}

/// Precomputed bilinear taps for one box: for each of the `s×s` output bins,
/// the `(cell index, weight)` pairs whose weighted sum is that bin's value.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiPlan {
    pub out_size: usize,
    pub bins: Vec<Vec<(usize, f64)>>,
}

/// Clamps a normalized box to the unit square, failing if it collapses.
pub fn clamp_box(b: [f64; 4]) -> Result<[f64; 4]> {
    let c = [
        b[0].clamp(0.0, 1.0),
        b[1].clamp(0.0, 1.0),
        b[2].clamp(0.0, 1.0),
        b[3].clamp(0.0, 1.0),
    ];
    if !(c[2] > c[0] && c[3] > c[1]) {
        return Err(Error::DegenerateBox {
            x1: c[0],
            y1: c[1],
            x2: c[2],
            y2: c[3],
        });
    }
    Ok(c)
}

/// Sample geometry: pixel `(r, c)` has its centre at normalized
/// `((c + 0.5) / w, (r + 0.5) / h)`. Each bin averages `samples²` bilinear
/// reads taken at the centres of a regular sub-grid of the bin; reads are
/// clamped to the outermost pixel centres.
pub fn roi_align_plan(
    h: usize,
    w: usize,
    bbox: [f64; 4],
    out_size: usize,
    samples: usize,
) -> Result<RoiPlan> {
    if out_size == 0 || samples == 0 {
        return Err(Error::invalid("roi_align needs positive out_size and samples"));
    }
    let [x1, y1, x2, y2] = clamp_box(bbox)?;
    let bin_w = (x2 - x1) * w as f64 / out_size as f64;
    let bin_h = (y2 - y1) * h as f64 / out_size as f64;
    let norm = 1.0 / (samples * samples) as f64;
    let mut bins = Vec::with_capacity(out_size * out_size);
    for by in 0..out_size {
        for bx in 0..out_size {
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for sy in 0..samples {
                let y = y1 * h as f64 + bin_h * (by as f64 + (sy as f64 + 0.5) / samples as f64);
                let (r0, r1, ly) = axis_taps(y - 0.5, h);
                for sx in 0..samples {
                    let x =
                        x1 * w as f64 + bin_w * (bx as f64 + (sx as f64 + 0.5) / samples as f64);
                    let (c0, c1, lx) = axis_taps(x - 0.5, w);
                    for (cell, wt) in [
                        (r0 * w + c0, (1.0 - ly) * (1.0 - lx)),
                        (r0 * w + c1, (1.0 - ly) * lx),
                        (r1 * w + c0, ly * (1.0 - lx)),
                        (r1 * w + c1, ly * lx),
                    ] {
                        if wt == 0.0 {
                            continue;
                        }
                        match taps.iter_mut().find(|(c, _)| *c == cell) {
                            Some(t) => t.1 += wt * norm,
                            None => taps.push((cell, wt * norm)),
                        }
                    }
                }
            }
            bins.push(taps);
        }
    }
    Ok(RoiPlan { out_size, bins })
}

fn axis_taps(u: f64, extent: usize) -> (usize, usize, f64) {
    let max = (extent - 1) as f64;
    let u = u.clamp(0.0, max);
    let lo = u.floor() as usize;
    let hi = (lo + 1).min(extent - 1);
    (lo, hi, u - lo as f64)
}

pub fn roi_align_apply(plan: &RoiPlan, input: &[f64], channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; plan.bins.len() * channels];
    for (b, taps) in plan.bins.iter().enumerate() {
        let o = &mut out[b * channels..(b + 1) * channels];
        for &(cell, wt) in taps {
            let x = &input[cell * channels..(cell + 1) * channels];
            for (ov, &xv) in o.iter_mut().zip(x) {
                *ov += wt * xv;
            }
        }
    }
    out
}

pub fn roi_align_backward(plan: &RoiPlan, grad: &[f64], input_len: usize, channels: usize) -> Vec<f64> {
    let mut din = vec![0.0; input_len];
    for (b, taps) in plan.bins.iter().enumerate() {
        let g = &grad[b * channels..(b + 1) * channels];
        for &(cell, wt) in taps {
            let d = &mut din[cell * channels..(cell + 1) * channels];
            for (dv, &gv) in d.iter_mut().zip(g) {
                *dv += wt * gv;
            }
        }
    }
    din
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3×2
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![0.5, 7.0, 2.0, 16.0]);
        let bt = [1.0, -1.0, 0.5, 0.0, 2.0, 1.0]; // bᵀ, 2×3
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), vec![0.5, 7.0, 2.0, 16.0]);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // aᵀ, 3×2
        assert_eq!(matmul_tn(&at, &b, 3, 2, 2), vec![0.5, 7.0, 2.0, 16.0]);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn masked_softmax_ignores_masked_entries() {
        let y = softmax_rows(&[1.0, 100.0, 1.0], 3, Some(&[true, false, true]));
        assert_eq!(y, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(matches!(
            roi_align_plan(4, 4, [0.5, 0.1, 0.5, 0.9], 2, 2),
            Err(Error::DegenerateBox { .. })
        ));
        assert!(roi_align_plan(4, 4, [1.2, 0.0, 1.5, 1.0], 2, 2).is_err());
    }

    #[test]
    fn roi_weights_sum_to_one_per_bin() {
        let plan = roi_align_plan(8, 8, [0.13, 0.2, 0.77, 0.61], 3, 2).unwrap();
        for bin in &plan.bins {
            let total: f64 = bin.iter().map(|t| t.1).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
