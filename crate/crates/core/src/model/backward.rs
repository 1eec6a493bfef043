use rayon::prelude::*;

use super::forward::{forward, gelu_grad, ActivationTrace};
use super::{Parameters, Scalar};
use crate::error::{Error, Result};

/// Gradient buffer congruent to [`Parameters::data`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub data: Vec<T>,
}

/// Cross-entropy of the label logits against `gold`, and its logit gradient.
pub fn cross_entropy<T: Scalar>(logits: &[T], gold: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let loss = total.ln() + max - logits[gold];
    let mut grad: Vec<T> = exps.iter().map(|&e| e / total).collect();
    grad[gold] = grad[gold] - T::one();
    (loss, grad)
}

/// Loss and gradient for a single labelled sequence.
pub fn example_gradient<T: Scalar>(params: &Parameters<T>, tokens: &[u32], gold: usize) -> Result<(T, Vec<T>)> {
    if gold >= params.config.n_labels() {
        return Err(Error::Input(format!("gold label {gold} out of range")));
    }
    let (logits, trace) = forward(params, tokens)?;
    let (loss, dlogits) = cross_entropy(&logits, gold);
    let mut grad = vec![T::zero(); params.data.len()];
    backprop(params, &trace, &dlogits, &mut grad);
    Ok((loss, grad))
}

/// Mean cross-entropy over the batch and its gradient.
///
/// Per-example gradients are computed in parallel and summed in batch order,
/// so the result does not depend on thread scheduling.
pub fn backward<T: Scalar>(params: &Parameters<T>, batch: &[(Vec<u32>, usize)]) -> Result<(T, Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let per_example: Vec<Result<(T, Vec<T>)>> = batch
        .par_iter()
        .map(|(tokens, gold)| example_gradient(params, tokens, *gold))
        .collect();
    let mut total = vec![T::zero(); params.data.len()];
    let mut loss = T::zero();
    for (index, r) in per_example.into_iter().enumerate() {
        let (l, g) = r?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { index });
        }
        loss = loss + l;
        for (t, x) in total.iter_mut().zip(&g) {
            *t = *t + *x;
        }
    }
    let n = T::of(batch.len() as f64);
    total.iter_mut().for_each(|x| *x = *x / n);
    Ok((loss / n, Gradients { data: total }))
}

/// Accumulates `d = W^T dy` for row-major `(rows, cols)` `W`.
#[inline]
fn matvec_t_acc<T: Scalar>(w: &[T], rows: usize, cols: usize, dy: &[T], dx: &mut [T]) {
    for r in 0..rows {
        let g = dy[r];
        if g == T::zero() {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (x, a) in dx.iter_mut().zip(row) {
            *x = *x + *a * g;
        }
    }
}

/// Accumulates the outer product `dy x^T` into a row-major `(rows, cols)` gradient.
#[inline]
fn outer_acc<T: Scalar>(gw: &mut [T], rows: usize, cols: usize, dy: &[T], x: &[T]) {
    for r in 0..rows {
        let g = dy[r];
        if g == T::zero() {
            continue;
        }
        let row = &mut gw[r * cols..(r + 1) * cols];
        for (w, a) in row.iter_mut().zip(x) {
            *w = *w + g * *a;
        }
    }
}

/// LayerNorm backward for all rows. Returns `dx`; accumulates gain/bias grads.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Scalar>(
    linear: bool,
    x: &[T],
    mean: &[T],
    rstd: &[T],
    gain: &[T],
    dy: &[T],
    g_gain: &mut [T],
    g_bias: &mut [T],
) -> Vec<T> {
    if linear {
        return dy.to_vec();
    }
    let d = gain.len();
    let rows = mean.len();
    let n = T::of(d as f64);
    let mut dx = vec![T::zero(); rows * d];
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        if dyr.iter().all(|&v| v == T::zero()) {
            continue;
        }
        for j in 0..d {
            xhat[j] = (x[r * d + j] - mean[r]) * rstd[r];
            dxhat[j] = dyr[j] * gain[j];
            g_gain[j] = g_gain[j] + dyr[j] * xhat[j];
            g_bias[j] = g_bias[j] + dyr[j];
        }
        let m1 = dxhat.iter().copied().sum::<T>() / n;
        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| *a * *b).sum::<T>() / n;
        for j in 0..d {
            dx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
        }
    }
    dx
}

fn split_two<T>(g: &mut [T], a: usize, b: usize, len: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}

/// Reverse-mode pass from label-logit gradients into the flat gradient buffer.
pub(crate) fn backprop<T: Scalar>(params: &Parameters<T>, trace: &ActivationTrace<T>, dlogits: &[T], grad: &mut [T]) {
    let cfg = &params.config;
    let lay = &params.layout;
    let w = &params.data;
    let linear = cfg.linear_mode;
    let seq = trace.seq_len;
    let d = cfg.d_model;
    let dm = cfg.d_mlp;
    let dh = cfg.d_head();
    let scale = T::one() / T::of(dh as f64).sqrt();

    // readout
    let last = &trace.lnf_out[(seq - 1) * d..seq * d];
    let mut dy = vec![T::zero(); seq * d];
    for (c, &t) in cfg.label_tokens.iter().enumerate() {
        let g = dlogits[c];
        let off = lay.w_u + t as usize * d;
        for j in 0..d {
            grad[off + j] = grad[off + j] + g * last[j];
            dy[(seq - 1) * d + j] = dy[(seq - 1) * d + j] + g * w[off + j];
        }
    }

    let final_in = &trace.layers.last().expect("at least one layer").resid_out;
    let mut dx = {
        let (gg, gb) = split_two(grad, lay.lnf_g, lay.lnf_b, d);
        layer_norm_backward(
            linear,
            final_in,
            &trace.lnf_mean,
            &trace.lnf_rstd,
            &w[lay.lnf_g..lay.lnf_g + d],
            &dy,
            gg,
            gb,
        )
    };

    for (l, lt) in trace.layers.iter().enumerate().rev() {
        let b = &lay.blocks[l];

        // MLP sublayer
        let mut dln2 = vec![T::zero(); seq * d];
        let mut dact = vec![T::zero(); dm];
        let mut dpre = vec![T::zero(); dm];
        for p in 0..seq {
            let dout = &dx[p * d..(p + 1) * d];
            for j in 0..d {
                grad[b.b2 + j] = grad[b.b2 + j] + dout[j];
            }
            outer_acc(&mut grad[b.w2..b.w2 + d * dm], d, dm, dout, &lt.mlp_act[p * dm..(p + 1) * dm]);
            dact.iter_mut().for_each(|x| *x = T::zero());
            matvec_t_acc(&w[b.w2..b.w2 + d * dm], d, dm, dout, &mut dact);
            for i in 0..dm {
                let fp = if linear { T::one() } else { gelu_grad(lt.mlp_pre[p * dm + i]) };
                dpre[i] = dact[i] * fp;
                grad[b.b1 + i] = grad[b.b1 + i] + dpre[i];
            }
            outer_acc(&mut grad[b.w1..b.w1 + dm * d], dm, d, &dpre, &lt.ln2_out[p * d..(p + 1) * d]);
            matvec_t_acc(&w[b.w1..b.w1 + dm * d], dm, d, &dpre, &mut dln2[p * d..(p + 1) * d]);
        }
        let dmid_ln = {
            let (gg, gb) = split_two(grad, b.ln2_g, b.ln2_b, d);
            layer_norm_backward(
                linear,
                &lt.resid_mid,
                &lt.ln2_mean,
                &lt.ln2_rstd,
                &w[b.ln2_g..b.ln2_g + d],
                &dln2,
                gg,
                gb,
            )
        };
        let dmid: Vec<T> = dx.iter().zip(&dmid_ln).map(|(a, c)| *a + *c).collect();

        // attention sublayer
        let wo = &w[b.wo..b.wo + d * d];
        let mut dz = vec![T::zero(); seq * d];
        for p in 0..seq {
            let da = &dmid[p * d..(p + 1) * d];
            outer_acc(&mut grad[b.wo..b.wo + d * d], d, d, da, &lt.z[p * d..(p + 1) * d]);
            matvec_t_acc(wo, d, d, da, &mut dz[p * d..(p + 1) * d]);
        }
        let mut dq = vec![T::zero(); seq * d];
        let mut dk = vec![T::zero(); seq * d];
        let mut dv = vec![T::zero(); seq * d];
        let mut dp = vec![T::zero(); seq];
        for h in 0..cfg.n_heads {
            let off = h * dh;
            let probs = &lt.probs[h * seq * seq..(h + 1) * seq * seq];
            for i in 0..seq {
                let dzi = &dz[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let pij = probs[i * seq + j];
                    let vj = &lt.v[j * d + off..j * d + off + dh];
                    dp[j] = dzi.iter().zip(vj).map(|(a, c)| *a * *c).sum();
                    for c in 0..dh {
                        dv[j * d + off + c] = dv[j * d + off + c] + pij * dzi[c];
                    }
                }
                if linear {
                    continue;
                }
                let inner: T = (0..=i).map(|j| probs[i * seq + j] * dp[j]).sum();
                for j in 0..=i {
                    let ds = probs[i * seq + j] * (dp[j] - inner) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        dq[i * d + off + c] = dq[i * d + off + c] + ds * lt.k[j * d + off + c];
                        dk[j * d + off + c] = dk[j * d + off + c] + ds * lt.q[i * d + off + c];
                    }
                }
            }
        }
        let mut dln1 = vec![T::zero(); seq * d];
        for p in 0..seq {
            let a = &lt.ln1_out[p * d..(p + 1) * d];
            let out = &mut dln1[p * d..(p + 1) * d];
            for (wt, dvec) in [(b.wq, &dq), (b.wk, &dk), (b.wv, &dv)] {
                let dyp = &dvec[p * d..(p + 1) * d];
                outer_acc(&mut grad[wt..wt + d * d], d, d, dyp, a);
                matvec_t_acc(&w[wt..wt + d * d], d, d, dyp, out);
            }
        }
        let din_ln = {
            let (gg, gb) = split_two(grad, b.ln1_g, b.ln1_b, d);
            layer_norm_backward(
                linear,
                &lt.resid_in,
                &lt.ln1_mean,
                &lt.ln1_rstd,
                &w[b.ln1_g..b.ln1_g + d],
                &dln1,
                gg,
                gb,
            )
        };
        dx = dmid.iter().zip(&din_ln).map(|(a, c)| *a + *c).collect();
    }

    for (p, &t) in trace.tokens.iter().enumerate() {
        let te = lay.tok_emb + t as usize * d;
        let pe = lay.pos_emb + p * d;
        for j in 0..d {
            grad[te + j] = grad[te + j] + dx[p * d + j];
            grad[pe + j] = grad[pe + j] + dx[p * d + j];
        }
    }
}
