//! Raw f64 kernels shared by the inference forward pass and the autodiff
//! tape. Keeping one implementation of each primitive means the traced and
//! untraced paths cannot drift apart numerically.
//!
//! All matrices are row-major. Inner loops run over contiguous rows so the
//! compiler can vectorize them.

/// out = a @ b, a: [m x k], b: [k x n], out: [m x n] (overwritten).
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * bv;
            }
        }
    }
}

/// d_a += d_out @ b^T, accumulating. d_out: [m x n], b: [k x n], d_a: [m x k].
pub fn matmul_grad_a(d_out: &[f64], b: &[f64], d_a: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let d_row = &d_out[i * n..(i + 1) * n];
        let da_row = &mut d_a[i * k..(i + 1) * k];
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let dot: f64 = d_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            da_row[kk] += dot;
        }
    }
}

/// d_b += a^T @ d_out, accumulating. a: [m x k], d_out: [m x n], d_b: [k x n].
pub fn matmul_grad_b(a: &[f64], d_out: &[f64], d_b: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let d_row = &d_out[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let db_row = &mut d_b[kk * n..(kk + 1) * n];
            for (o, &dv) in db_row.iter_mut().zip(d_row) {
                *o += a_ik * dv;
            }
        }
    }
}

/// Numerically stable softmax over a slice, in place. Uses max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// log(sum(exp(row))) with max subtraction.
pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalization with learned gain and bias.
/// Returns per-row (mean, inv_std) for the backward pass.
pub fn layer_norm_rows(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    out: &mut [f64],
    rows: usize,
    cols: usize,
) -> Vec<(f64, f64)> {
    let mut saved = Vec::with_capacity(rows);
    for i in 0..rows {
        let x_row = &x[i * cols..(i + 1) * cols];
        let out_row = &mut out[i * cols..(i + 1) * cols];
        let mean = x_row.iter().sum::<f64>() / cols as f64;
        let var = x_row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..cols {
            out_row[j] = (x_row[j] - mean) * inv_std * gain[j] + bias[j];
        }
        saved.push((mean, inv_std));
    }
    saved
}

/// Backward for `layer_norm_rows`. Accumulates into d_x, d_gain, d_bias.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    d_out: &[f64],
    x: &[f64],
    gain: &[f64],
    saved: &[(f64, f64)],
    d_x: &mut [f64],
    d_gain: &mut [f64],
    d_bias: &mut [f64],
    rows: usize,
    cols: usize,
) {
    let nf = cols as f64;
    for i in 0..rows {
        let (mean, inv_std) = saved[i];
        let x_row = &x[i * cols..(i + 1) * cols];
        let d_row = &d_out[i * cols..(i + 1) * cols];
        let dx_row = &mut d_x[i * cols..(i + 1) * cols];
        // dxh = d_out * gain; reductions over the row drive the mean terms.
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for j in 0..cols {
            let xh = (x_row[j] - mean) * inv_std;
            let dxh = d_row[j] * gain[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
            d_gain[j] += d_row[j] * xh;
            d_bias[j] += d_row[j];
        }
        for j in 0..cols {
            let xh = (x_row[j] - mean) * inv_std;
            let dxh = d_row[j] * gain[j];
            dx_row[j] += inv_std * (dxh - sum_dxh / nf - xh * sum_dxh_xh / nf);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU activation, tanh form. Smooth, which keeps finite-difference
/// gradient checks clean everywhere.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Multi-head causal self-attention over one [t x d] block.
///
/// Row i attends to rows 0..=i. Returns the attention weights
/// ([heads x t x t], zero above the diagonal) for the backward pass.
pub fn causal_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    out: &mut [f64],
    t: usize,
    d: usize,
    heads: usize,
) -> Vec<f64> {
    let mut weights = vec![0.0; heads * t * t];
    attention_core(q, k, v, out, t, d, heads, Some(&mut weights));
    weights
}

/// Forward-only variant that skips the weights buffer; the inference path
/// never replays backward.
pub fn causal_attention_inference(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    out: &mut [f64],
    t: usize,
    d: usize,
    heads: usize,
) {
    attention_core(q, k, v, out, t, d, heads, None);
}

#[allow(clippy::too_many_arguments)]
fn attention_core(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    out: &mut [f64],
    t: usize,
    d: usize,
    heads: usize,
    mut weights: Option<&mut Vec<f64>>,
) {
    debug_assert_eq!(d % heads, 0);
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    out.fill(0.0);
    let mut scores = vec![0.0; t];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..t {
            let q_i = &q[i * d + off..i * d + off + hd];
            let row = &mut scores[..=i];
            for (j, s) in row.iter_mut().enumerate() {
                let k_j = &k[j * d + off..j * d + off + hd];
                *s = q_i.iter().zip(k_j).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(row);
            if let Some(w) = weights.as_deref_mut() {
                w[(h * t + i) * t..(h * t + i) * t + i + 1].copy_from_slice(row);
            }
            let out_i = &mut out[i * d + off..i * d + off + hd];
            for (j, &w) in row.iter().enumerate() {
                let v_j = &v[j * d + off..j * d + off + hd];
                for (o, &vv) in out_i.iter_mut().zip(v_j) {
                    *o += w * vv;
                }
            }
        }
    }
}

/// Backward for `causal_attention`. Accumulates into d_q, d_k, d_v.
#[allow(clippy::too_many_arguments)]
pub fn causal_attention_backward(
    d_out: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    weights: &[f64],
    d_q: &mut [f64],
    d_k: &mut [f64],
    d_v: &mut [f64],
    t: usize,
    d: usize,
    heads: usize,
) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut d_scores = vec![0.0; t];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..t {
            let w_row = &weights[(h * t + i) * t..(h * t + i) * t + i + 1];
            let d_out_i = &d_out[i * d + off..i * d + off + hd];
            // d_w[j] = d_out_i . v_j, then softmax backward to scores.
            let mut dot_w_dw = 0.0;
            for (j, &w) in w_row.iter().enumerate() {
                let v_j = &v[j * d + off..j * d + off + hd];
                let dw: f64 = d_out_i.iter().zip(v_j).map(|(a, b)| a * b).sum();
                d_scores[j] = dw;
                dot_w_dw += w * dw;
                // d_v accumulation uses the weight directly.
                let dv_j = &mut d_v[j * d + off..j * d + off + hd];
                for (o, &g) in dv_j.iter_mut().zip(d_out_i) {
                    *o += w * g;
                }
            }
            let q_i = &q[i * d + off..i * d + off + hd];
            let dq_i_base = i * d + off;
            for j in 0..=i {
                let ds = w_row[j] * (d_scores[j] - dot_w_dw) * scale;
                if ds == 0.0 {
                    continue;
                }
                let k_j = &k[j * d + off..j * d + off + hd];
                let dq_i = &mut d_q[dq_i_base..dq_i_base + hd];
                for (o, &kv) in dq_i.iter_mut().zip(k_j) {
                    *o += ds * kv;
                }
                let dk_j = &mut d_k[j * d + off..j * d + off + hd];
                for (o, &qv) in dk_j.iter_mut().zip(q_i) {
                    *o += ds * qv;
                }
            }
        }
    }
}
