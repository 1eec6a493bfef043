use super::{HeadId, ModelConfig, Parameters, Scalar};
use crate::error::Result;
use crate::tolerances::LAYER_NORM_EPS;

/// Everything recorded for one transformer block. Position-major buffers are
/// `seq_len x width`; `probs` is `n_heads x seq_len x seq_len` with zeros above
/// the causal diagonal.
#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    pub resid_in: Vec<T>,
    pub ln1_mean: Vec<T>,
    pub ln1_rstd: Vec<T>,
    pub ln1_out: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub probs: Vec<T>,
    pub z: Vec<T>,
    /// Per-head residual writes `W_O[:, head] z_head`, one `seq_len x d_model` buffer per head.
    pub head_out: Vec<Vec<T>>,
    pub resid_mid: Vec<T>,
    pub ln2_mean: Vec<T>,
    pub ln2_rstd: Vec<T>,
    pub ln2_out: Vec<T>,
    pub mlp_pre: Vec<T>,
    pub mlp_act: Vec<T>,
    pub resid_out: Vec<T>,
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTrace<T> {
    pub seq_len: usize,
    pub tokens: Vec<u32>,
    pub embed: Vec<T>,
    pub layers: Vec<LayerTrace<T>>,
    pub lnf_mean: Vec<T>,
    pub lnf_rstd: Vec<T>,
    pub lnf_out: Vec<T>,
    /// Logits of the label tokens at the final position.
    pub logits: Vec<T>,
}

impl<T: Scalar> ActivationTrace<T> {
    /// Output of head `s` over all positions.
    pub fn head_output(&self, s: HeadId) -> &[T] {
        &self.layers[s.layer].head_out[s.head]
    }
}

/// `y = W x` for a row-major `(rows, cols)` matrix.
#[inline]
pub(crate) fn matvec<T: Scalar>(w: &[T], rows: usize, cols: usize, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), cols);
    for (i, yi) in y.iter_mut().enumerate().take(rows) {
        let row = &w[i * cols..(i + 1) * cols];
        let mut acc = T::zero();
        for (a, b) in row.iter().zip(x) {
            acc = acc + *a * *b;
        }
        *yi = acc;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// Pointwise MLP nonlinearity; identity in linear mode.
#[inline]
pub(crate) fn activation<T: Scalar>(cfg: &ModelConfig, x: T) -> T {
    if cfg.linear_mode {
        x
    } else {
        gelu(x)
    }
}

/// Row-wise LayerNorm. Returns `(out, mean, rstd)`; in linear mode the map is
/// the identity and the statistics are recorded as `(0, 1)`.
pub(crate) fn layer_norm<T: Scalar>(
    cfg: &ModelConfig,
    x: &[T],
    gain: &[T],
    bias: &[T],
    rows: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gain.len();
    if cfg.linear_mode {
        return (x.to_vec(), vec![T::zero(); rows], vec![T::one(); rows]);
    }
    let mut out = vec![T::zero(); rows * d];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let n = T::of(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
        for j in 0..d {
            out[r * d + j] = gain[j] * (row[j] - mean) * rstd + bias[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

/// Attention weights for one head: causal softmax of scaled dot products, or
/// uniform causal mixing in linear mode.
fn attention_probs<T: Scalar>(cfg: &ModelConfig, q: &[T], k: &[T], head: usize, seq: usize) -> Vec<T> {
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let off = head * dh;
    let mut probs = vec![T::zero(); seq * seq];
    if cfg.linear_mode {
        for i in 0..seq {
            let w = T::one() / T::of((i + 1) as f64);
            for j in 0..=i {
                probs[i * seq + j] = w;
            }
        }
        return probs;
    }
    let scale = T::one() / T::of(dh as f64).sqrt();
    for i in 0..seq {
        let qi = &q[i * d + off..i * d + off + dh];
        let row = &mut probs[i * seq..(i + 1) * seq];
        let mut max = T::neg_infinity();
        for j in 0..=i {
            let kj = &k[j * d + off..j * d + off + dh];
            let s = qi.iter().zip(kj).map(|(a, b)| *a * *b).sum::<T>() * scale;
            row[j] = s;
            if s > max {
                max = s;
            }
        }
        let mut total = T::zero();
        for r in row.iter_mut().take(i + 1) {
            *r = (*r - max).exp();
            total = total + *r;
        }
        for r in row.iter_mut().take(i + 1) {
            *r = *r / total;
        }
    }
    probs
}

/// Runs the network and records the full trace.
pub fn forward<T: Scalar>(params: &Parameters<T>, tokens: &[u32]) -> Result<(Vec<T>, ActivationTrace<T>)> {
    forward_patched(params, tokens, |_| None)
}

/// Forward pass in which `patch(head)` may replace a head's output over all
/// positions. Patched heads still have their attention pattern recorded but
/// contribute only the supplied buffer to the residual stream.
pub fn forward_patched<'p, T, F>(
    params: &Parameters<T>,
    tokens: &[u32],
    patch: F,
) -> Result<(Vec<T>, ActivationTrace<T>)>
where
    T: Scalar,
    F: Fn(HeadId) -> Option<&'p [T]>,
{
    let cfg = &params.config;
    cfg.check_tokens(tokens)?;
    let w = &params.data;
    let lay = &params.layout;
    let seq = tokens.len();
    let d = cfg.d_model;
    let dm = cfg.d_mlp;
    let dh = cfg.d_head();

    let mut x = vec![T::zero(); seq * d];
    for (p, &t) in tokens.iter().enumerate() {
        let te = &w[lay.tok_emb + t as usize * d..lay.tok_emb + (t as usize + 1) * d];
        let pe = &w[lay.pos_emb + p * d..lay.pos_emb + (p + 1) * d];
        for j in 0..d {
            x[p * d + j] = te[j] + pe[j];
        }
    }
    let embed = x.clone();

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, b) in lay.blocks.iter().enumerate() {
        let resid_in = x;
        let (ln1_out, ln1_mean, ln1_rstd) = layer_norm(
            cfg,
            &resid_in,
            &w[b.ln1_g..b.ln1_g + d],
            &w[b.ln1_b..b.ln1_b + d],
            seq,
        );
        let mut q = vec![T::zero(); seq * d];
        let mut k = vec![T::zero(); seq * d];
        let mut v = vec![T::zero(); seq * d];
        for p in 0..seq {
            let a = &ln1_out[p * d..(p + 1) * d];
            matvec(&w[b.wq..b.wq + d * d], d, d, a, &mut q[p * d..(p + 1) * d]);
            matvec(&w[b.wk..b.wk + d * d], d, d, a, &mut k[p * d..(p + 1) * d]);
            matvec(&w[b.wv..b.wv + d * d], d, d, a, &mut v[p * d..(p + 1) * d]);
        }
        let mut probs = Vec::with_capacity(cfg.n_heads * seq * seq);
        let mut z = vec![T::zero(); seq * d];
        let mut head_out = Vec::with_capacity(cfg.n_heads);
        let wo = &w[b.wo..b.wo + d * d];
        let mut resid_mid = resid_in.clone();
        for h in 0..cfg.n_heads {
            let ph = attention_probs(cfg, &q, &k, h, seq);
            let off = h * dh;
            for i in 0..seq {
                for j in 0..=i {
                    let pij = ph[i * seq + j];
                    for c in 0..dh {
                        z[i * d + off + c] = z[i * d + off + c] + pij * v[j * d + off + c];
                    }
                }
            }
            let out = match patch(HeadId::new(l, h)) {
                Some(buf) => {
                    assert_eq!(buf.len(), seq * d, "patch for head ({l},{h}) has wrong length");
                    buf.to_vec()
                }
                None => {
                    let mut out = vec![T::zero(); seq * d];
                    for p in 0..seq {
                        let zh = &z[p * d + off..p * d + off + dh];
                        for r in 0..d {
                            let row = &wo[r * d + off..r * d + off + dh];
                            out[p * d + r] = row.iter().zip(zh).map(|(a, b)| *a * *b).sum();
                        }
                    }
                    out
                }
            };
            for (m, o) in resid_mid.iter_mut().zip(&out) {
                *m = *m + *o;
            }
            probs.extend_from_slice(&ph);
            head_out.push(out);
        }

        let (ln2_out, ln2_mean, ln2_rstd) = layer_norm(
            cfg,
            &resid_mid,
            &w[b.ln2_g..b.ln2_g + d],
            &w[b.ln2_b..b.ln2_b + d],
            seq,
        );
        let mut mlp_pre = vec![T::zero(); seq * dm];
        let mut mlp_act = vec![T::zero(); seq * dm];
        let mut resid_out = resid_mid.clone();
        let mut tmp = vec![T::zero(); d];
        for p in 0..seq {
            let pre = &mut mlp_pre[p * dm..(p + 1) * dm];
            matvec(&w[b.w1..b.w1 + dm * d], dm, d, &ln2_out[p * d..(p + 1) * d], pre);
            for (i, h) in pre.iter_mut().enumerate() {
                *h = *h + w[b.b1 + i];
            }
            let act = &mut mlp_act[p * dm..(p + 1) * dm];
            for (a, &h) in act.iter_mut().zip(pre.iter()) {
                *a = activation(cfg, h);
            }
            matvec(&w[b.w2..b.w2 + d * dm], d, dm, act, &mut tmp);
            for j in 0..d {
                resid_out[p * d + j] = resid_out[p * d + j] + tmp[j] + w[b.b2 + j];
            }
        }
        x = resid_out.clone();
        layers.push(LayerTrace {
            resid_in,
            ln1_mean,
            ln1_rstd,
            ln1_out,
            q,
            k,
            v,
            probs,
            z,
            head_out,
            resid_mid,
            ln2_mean,
            ln2_rstd,
            ln2_out,
            mlp_pre,
            mlp_act,
            resid_out,
        });
    }

    let (lnf_out, lnf_mean, lnf_rstd) = layer_norm(
        cfg,
        &x,
        &w[lay.lnf_g..lay.lnf_g + d],
        &w[lay.lnf_b..lay.lnf_b + d],
        seq,
    );
    let last = &lnf_out[(seq - 1) * d..seq * d];
    let logits = readout(params, last);
    Ok((
        logits.clone(),
        ActivationTrace {
            seq_len: seq,
            tokens: tokens.to_vec(),
            embed,
            layers,
            lnf_mean,
            lnf_rstd,
            lnf_out,
            logits,
        },
    ))
}

/// Label logits for a final-position residual vector (after the final norm).
pub(crate) fn readout<T: Scalar>(params: &Parameters<T>, last: &[T]) -> Vec<T> {
    let d = params.config.d_model;
    let w_u = params.layout.w_u;
    params
        .config
        .label_tokens
        .iter()
        .map(|&t| {
            let row = &params.data[w_u + t as usize * d..w_u + (t as usize + 1) * d];
            row.iter().zip(last).map(|(a, b)| *a * *b).sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;

    #[test]
    fn zero_params_give_equal_logits() {
        let p = Parameters::<f32>::zeros(tiny_config()).unwrap();
        let (logits, trace) = forward(&p, &[5, 6, 7, 1]).unwrap();
        assert!(logits.iter().all(|&l| l == logits[0]));
        assert_eq!(trace.layers.len(), 2);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let p = Parameters::<f32>::init(tiny_config(), 11).unwrap();
        let (a, _) = forward(&p, &[5, 6, 7, 1]).unwrap();
        let (b, _) = forward(&p, &[5, 6, 7, 1]).unwrap();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_bad_input() {
        let p = Parameters::<f32>::init(tiny_config(), 1).unwrap();
        assert!(forward(&p, &[]).is_err());
        assert!(forward(&p, &[42]).is_err());
    }

    #[test]
    fn trace_covers_every_head_once() {
        let cfg = tiny_config();
        let p = Parameters::<f32>::init(cfg.clone(), 2).unwrap();
        let (_, trace) = forward(&p, &[5, 6, 1]).unwrap();
        let mut n = 0;
        for l in &trace.layers {
            assert_eq!(l.head_out.len(), cfg.n_heads);
            n += l.head_out.len();
            for h in &l.head_out {
                assert_eq!(h.len(), 3 * cfg.d_model);
            }
        }
        assert_eq!(n, cfg.total_heads());
    }

    #[test]
    fn head_outputs_sum_to_attention_write() {
        let cfg = tiny_config();
        let p = Parameters::<f64>::init(cfg.clone(), 5).unwrap();
        let (_, trace) = forward(&p, &[5, 6, 9, 1]).unwrap();
        for l in &trace.layers {
            for i in 0..l.resid_in.len() {
                let s: f64 = l.head_out.iter().map(|h| h[i]).sum();
                assert!((l.resid_in[i] + s - l.resid_mid[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
