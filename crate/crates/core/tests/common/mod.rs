//! Shared helpers for the integration tests: random model configs, random
//! inputs and a deliberately naive f64 reference forward pass written
//! straight from the architecture description, sharing no code with the
//! library's forward.

#![allow(dead_code)]

use ctsft::corpus::{Example, SEP};
use ctsft::model::{HeadId, ModelConfig, Parameters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 20;
pub const SEQ: usize = 8;

pub fn config(n_layers: usize, n_heads: usize, d_model: usize, linear: bool) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        d_model,
        d_mlp: 2 * d_model,
        vocab_size: VOCAB,
        max_seq_len: SEQ,
        linear_mode: linear,
        label_tokens: vec![2, 3, 4],
    }
}

/// Random config with layers in {2, 4} and heads in {2, 4}.
pub fn random_config(rng: &mut ChaCha8Rng, d_model: usize, linear: bool) -> ModelConfig {
    let layers = if rng.gen_bool(0.5) { 2 } else { 4 };
    let heads = if rng.gen_bool(0.5) { 2 } else { 4 };
    config(layers, heads, d_model, linear)
}

/// Random full-length input ending in the separator.
pub fn random_example(rng: &mut ChaCha8Rng, id: u64, n_classes: usize) -> Example {
    let mut tokens: Vec<u32> = (0..SEQ - 1).map(|_| rng.gen_range(5..VOCAB as u32)).collect();
    tokens.push(SEP);
    Example {
        id,
        language: "rand".into(),
        label: rng.gen_range(0..n_classes),
        tokens,
    }
}

pub fn random_examples(seed: u64, n: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| random_example(&mut rng, i as u64, 3)).collect()
}

fn t(p: &Parameters<f32>, name: &str) -> Vec<f64> {
    p.tensor(name)
        .unwrap_or_else(|| panic!("no tensor {name}"))
        .iter()
        .map(|&x| x as f64)
        .collect()
}

fn norm(x: &[f64], g: &[f64], b: &[f64], linear: bool) -> Vec<f64> {
    if linear {
        return x.to_vec();
    }
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let s = (var + 1e-5).sqrt();
    x.iter().zip(g.iter().zip(b)).map(|(v, (g, b))| g * (v - mu) / s + b).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// `W x` with `W` stored as `(out, in)` rows.
fn apply(w: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks(x.len()).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Label logits at the final position. Heads for which `replace` returns a
/// buffer (`seq x d_model`) write that buffer instead of their own output.
pub fn reference_logits(p: &Parameters<f32>, tokens: &[u32], replace: &dyn Fn(HeadId) -> Option<Vec<f64>>) -> Vec<f64> {
    let c = &p.config;
    let (d, dh, n) = (c.d_model, c.d_model / c.n_heads, tokens.len());
    let lin = c.linear_mode;
    let tok = t(p, "tok_emb");
    let pos = t(p, "pos_emb");
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &k)| (0..d).map(|j| tok[k as usize * d + j] + pos[i * d + j]).collect())
        .collect();
    for l in 0..c.n_layers {
        let pre = |s: &str| format!("blocks.{l}.{s}");
        let a: Vec<Vec<f64>> = x
            .iter()
            .map(|r| norm(r, &t(p, &pre("ln1.gain")), &t(p, &pre("ln1.bias")), lin))
            .collect();
        let (wq, wk, wv, wo) = (t(p, &pre("attn.w_q")), t(p, &pre("attn.w_k")), t(p, &pre("attn.w_v")), t(p, &pre("attn.w_o")));
        let q: Vec<Vec<f64>> = a.iter().map(|r| apply(&wq, r)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|r| apply(&wk, r)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|r| apply(&wv, r)).collect();
        let mut mid = x.clone();
        for h in 0..c.n_heads {
            let rows = h * dh..(h + 1) * dh;
            let out: Vec<f64> = match replace(HeadId::new(l, h)) {
                Some(buf) => buf,
                None => {
                    let mut out = vec![0.0; n * d];
                    for i in 0..n {
                        let weights: Vec<f64> = if lin {
                            vec![1.0 / (i + 1) as f64; i + 1]
                        } else {
                            let s: Vec<f64> = (0..=i)
                                .map(|j| {
                                    rows.clone().map(|r| q[i][r] * k[j][r]).sum::<f64>() / (dh as f64).sqrt()
                                })
                                .collect();
                            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                            let z: f64 = e.iter().sum();
                            e.into_iter().map(|v| v / z).collect()
                        };
                        let zh: Vec<f64> = rows
                            .clone()
                            .map(|r| (0..=i).map(|j| weights[j] * v[j][r]).sum())
                            .collect();
                        for o in 0..d {
                            out[i * d + o] = (0..dh).map(|c| wo[o * d + h * dh + c] * zh[c]).sum();
                        }
                    }
                    out
                }
            };
            for i in 0..n {
                for j in 0..d {
                    mid[i][j] += out[i * d + j];
                }
            }
        }
        let (w1, b1, w2, b2) = (t(p, &pre("mlp.w_in")), t(p, &pre("mlp.b_in")), t(p, &pre("mlp.w_out")), t(p, &pre("mlp.b_out")));
        x = mid
            .iter()
            .map(|r| {
                let a = norm(r, &t(p, &pre("ln2.gain")), &t(p, &pre("ln2.bias")), lin);
                let hdn: Vec<f64> = apply(&w1, &a)
                    .iter()
                    .zip(&b1)
                    .map(|(h, b)| if lin { h + b } else { gelu(h + b) })
                    .collect();
                let y = apply(&w2, &hdn);
                r.iter().zip(y.iter().zip(&b2)).map(|(r, (y, b))| r + y + b).collect()
            })
            .collect();
    }
    let last = norm(&x[n - 1], &t(p, "ln_final.gain"), &t(p, "ln_final.bias"), lin);
    let wu = t(p, "w_u");
    c.label_tokens
        .iter()
        .map(|&k| (0..d).map(|j| wu[k as usize * d + j] * last[j]).sum())
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
