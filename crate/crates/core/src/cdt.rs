//! Contextual decomposition of head contributions.
//!
//! For a source head `s` the activation `a_x(s)` is split into a baseline
//! stream `gamma = mu(s)` and a relevant stream `beta = a_x(s) - mu(s)`; every
//! other head, embedding and bias feeds `gamma`. Both streams are then pushed
//! through the rest of the network:
//!
//! * linear maps and residual additions act on each stream, biases go to `gamma`;
//! * LayerNorm uses mean and variance of the full activation, centres each
//!   stream by its own mean and scales both by the shared inverse std;
//! * the MLP nonlinearity `f` gives `gamma' = f(gamma)` and
//!   `beta' = f(gamma + beta) - f(gamma)`;
//! * attention weights come from the full forward pass and mix both streams.
//!
//! With these rules `gamma + beta` reproduces the full activation at every
//! site. Head activations and means cover every position of the fixed-length
//! (left-padded) sequence; scores are read at the final position.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::corpus::{set_hash, Example};
use crate::error::{Error, Result};
use crate::model::{forward, read_bundle, write_bundle, ActivationTrace, BundleTensor, HeadId, Manifest, Parameters};

/// Mean head outputs over a (label-balanced) mean-estimation set.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineMeans {
    pub seq_len: usize,
    pub d_model: usize,
    /// `seq_len x d_model` mean per head.
    pub means: BTreeMap<HeadId, Vec<f32>>,
    pub set_size: usize,
    pub class_counts: Vec<usize>,
    pub set_hash: String,
}

impl BaselineMeans {
    pub fn get(&self, head: HeadId) -> Result<&[f32]> {
        self.means
            .get(&head)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("no baseline mean for head {head}")))
    }

    /// Every class appears equally often in the mean set.
    pub fn is_balanced(&self) -> bool {
        self.class_counts.windows(2).all(|w| w[0] == w[1])
    }
}

/// Arithmetic mean of every head's traced output over `mean_set`.
pub fn compute_baseline_means(params: &Parameters<f32>, mean_set: &[Example], n_classes: usize) -> Result<BaselineMeans> {
    let first = mean_set
        .first()
        .ok_or_else(|| Error::Input("empty mean-estimation set".into()))?;
    let seq_len = first.tokens.len();
    let cfg = &params.config;
    let d = cfg.d_model;
    let mut sums: BTreeMap<HeadId, Vec<f64>> = cfg.heads().into_iter().map(|h| (h, vec![0.0; seq_len * d])).collect();
    let mut class_counts = vec![0usize; n_classes];
    for e in mean_set {
        if e.tokens.len() != seq_len {
            return Err(Error::Input(format!(
                "mean set mixes sequence lengths {seq_len} and {}",
                e.tokens.len()
            )));
        }
        if let Some(c) = class_counts.get_mut(e.label) {
            *c += 1;
        }
        let (_, trace) = forward(params, &e.tokens)?;
        for (head, acc) in sums.iter_mut() {
            for (a, &x) in acc.iter_mut().zip(trace.head_output(*head)) {
                *a += x as f64;
            }
        }
    }
    let n = mean_set.len() as f64;
    let means = sums
        .into_iter()
        .map(|(h, s)| (h, s.into_iter().map(|x| (x / n) as f32).collect()))
        .collect();
    Ok(BaselineMeans {
        seq_len,
        d_model: d,
        means,
        set_size: mean_set.len(),
        class_counts,
        set_hash: set_hash(mean_set),
    })
}

/// Downstream site a contribution is measured at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    Head(HeadId),
    Logits,
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Target::Head(h) => write!(f, "{h}"),
            Target::Logits => write!(f, "logits"),
        }
    }
}

/// Baseline and relevant parts of one activation buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DualStream {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl DualStream {
    fn baseline(full: &[f32]) -> Self {
        DualStream {
            gamma: full.to_vec(),
            beta: vec![0.0; full.len()],
        }
    }

    fn zeros(n: usize) -> Self {
        DualStream {
            gamma: vec![0.0; n],
            beta: vec![0.0; n],
        }
    }

    pub fn sum(&self) -> Vec<f32> {
        self.gamma.iter().zip(&self.beta).map(|(g, b)| g + b).collect()
    }

    fn add_assign(&mut self, other: &DualStream) {
        for (a, b) in self.gamma.iter_mut().zip(&other.gamma) {
            *a += b;
        }
        for (a, b) in self.beta.iter_mut().zip(&other.beta) {
            *a += b;
        }
    }

    fn is_finite(&self) -> bool {
        self.gamma.iter().chain(&self.beta).all(|x| x.is_finite())
    }

    /// Rows `[row * width, (row + 1) * width)` of both streams.
    pub fn row(&self, row: usize, width: usize) -> DualStream {
        DualStream {
            gamma: self.gamma[row * width..(row + 1) * width].to_vec(),
            beta: self.beta[row * width..(row + 1) * width].to_vec(),
        }
    }
}

/// Relevant contribution of `source` at `target` for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub source: HeadId,
    pub target: Target,
    pub input_id: u64,
    /// Label-logit vector for [`Target::Logits`], final-position head output otherwise.
    pub beta: Vec<f32>,
    pub gamma: Vec<f32>,
}

/// Decomposed streams of one block downstream of (or at) the source layer.
#[derive(Debug, Clone)]
pub struct LayerSites {
    pub layer: usize,
    pub head_out: Vec<DualStream>,
    pub resid_mid: DualStream,
    pub mlp_out: DualStream,
    pub resid_out: DualStream,
}

/// All decomposed sites for one `(input, source)` pair.
#[derive(Debug, Clone)]
pub struct PropagatedSites {
    pub source: HeadId,
    pub layers: Vec<LayerSites>,
    pub final_norm: DualStream,
    pub logits: DualStream,
}

impl PropagatedSites {
    fn head(&self, h: HeadId) -> &DualStream {
        let first = self.layers[0].layer;
        &self.layers[h.layer - first].head_out[h.head]
    }
}

fn linear_rows(w: &[f32], out_dim: usize, in_dim: usize, x: &[f32], rows: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; rows * out_dim];
    for r in 0..rows {
        crate::model::matvec(w, out_dim, in_dim, &x[r * in_dim..(r + 1) * in_dim], &mut y[r * out_dim..(r + 1) * out_dim]);
    }
    y
}

/// LayerNorm split with statistics of the full activation.
fn norm_split(linear: bool, s: &DualStream, mean: &[f32], rstd: &[f32], gain: &[f32], bias: &[f32]) -> DualStream {
    if linear {
        return s.clone();
    }
    let d = gain.len();
    let rows = mean.len();
    let mut out = DualStream::zeros(rows * d);
    for r in 0..rows {
        let g = &s.gamma[r * d..(r + 1) * d];
        let b = &s.beta[r * d..(r + 1) * d];
        let mg = g.iter().sum::<f32>() / d as f32;
        // the full mean fixes the split of the centring term
        let mb = mean[r] - mg;
        for j in 0..d {
            out.gamma[r * d + j] = gain[j] * (g[j] - mg) * rstd[r] + bias[j];
            out.beta[r * d + j] = gain[j] * (b[j] - mb) * rstd[r];
        }
    }
    out
}

fn check_finite(s: &DualStream, layer: usize, site: &str) -> Result<()> {
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite decomposition stream at layer {layer} ({site})")))
    }
}

/// Propagates `(gamma, beta)` from `source` to every downstream site.
pub fn propagate(params: &Parameters<f32>, means: &BaselineMeans, trace: &ActivationTrace<f32>, source: HeadId) -> Result<PropagatedSites> {
    let cfg = &params.config;
    cfg.check_head(source)?;
    let seq = trace.seq_len;
    if seq != means.seq_len {
        return Err(Error::Input(format!(
            "input length {seq} differs from the baseline length {}",
            means.seq_len
        )));
    }
    let w = &params.data;
    let lay = &params.layout;
    let d = cfg.d_model;
    let dm = cfg.d_mlp;
    let dh = cfg.d_head();
    let linear = cfg.linear_mode;
    let mu = means.get(source)?;

    let mut layers = Vec::with_capacity(cfg.n_layers - source.layer);
    let mut resid = DualStream::baseline(&trace.layers[source.layer].resid_in);
    for l in source.layer..cfg.n_layers {
        let lt = &trace.layers[l];
        let b = &lay.blocks[l];

        let head_out: Vec<DualStream> = if l == source.layer {
            (0..cfg.n_heads)
                .map(|h| {
                    if h == source.head {
                        let a = &lt.head_out[h];
                        DualStream {
                            gamma: mu.to_vec(),
                            beta: a.iter().zip(mu).map(|(x, m)| x - m).collect(),
                        }
                    } else {
                        DualStream::baseline(&lt.head_out[h])
                    }
                })
                .collect()
        } else {
            let ln = norm_split(
                linear,
                &resid,
                &lt.ln1_mean,
                &lt.ln1_rstd,
                &w[b.ln1_g..b.ln1_g + d],
                &w[b.ln1_b..b.ln1_b + d],
            );
            let wv = &w[b.wv..b.wv + d * d];
            let v = DualStream {
                gamma: linear_rows(wv, d, d, &ln.gamma, seq),
                beta: linear_rows(wv, d, d, &ln.beta, seq),
            };
            let wo = &w[b.wo..b.wo + d * d];
            (0..cfg.n_heads)
                .map(|h| {
                    let off = h * dh;
                    let probs = &lt.probs[h * seq * seq..(h + 1) * seq * seq];
                    let mut out = DualStream::zeros(seq * d);
                    for (src, dst) in [(&v.gamma, &mut out.gamma), (&v.beta, &mut out.beta)] {
                        let mut z = vec![0.0f32; dh];
                        for i in 0..seq {
                            z.iter_mut().for_each(|x| *x = 0.0);
                            for j in 0..=i {
                                let p = probs[i * seq + j];
                                for c in 0..dh {
                                    z[c] += p * src[j * d + off + c];
                                }
                            }
                            for r in 0..d {
                                let row = &wo[r * d + off..r * d + off + dh];
                                dst[i * d + r] = row.iter().zip(&z).map(|(a, b)| a * b).sum();
                            }
                        }
                    }
                    out
                })
                .collect()
        };
        for (h, s) in head_out.iter().enumerate() {
            check_finite(s, l, &format!("head {h}"))?;
        }

        let mut resid_mid = resid;
        for s in &head_out {
            resid_mid.add_assign(s);
        }

        let ln2 = norm_split(
            linear,
            &resid_mid,
            &lt.ln2_mean,
            &lt.ln2_rstd,
            &w[b.ln2_g..b.ln2_g + d],
            &w[b.ln2_b..b.ln2_b + d],
        );
        let w1 = &w[b.w1..b.w1 + dm * d];
        let mut pre_g = linear_rows(w1, dm, d, &ln2.gamma, seq);
        let pre_b = linear_rows(w1, dm, d, &ln2.beta, seq);
        for r in 0..seq {
            for i in 0..dm {
                pre_g[r * dm + i] += w[b.b1 + i];
            }
        }
        let act_g: Vec<f32> = pre_g.iter().map(|&x| crate::model::activation(cfg, x)).collect();
        let act_b: Vec<f32> = pre_g
            .iter()
            .zip(&pre_b)
            .zip(&act_g)
            .map(|((&g, &b), &fg)| crate::model::activation(cfg, g + b) - fg)
            .collect();
        let w2 = &w[b.w2..b.w2 + d * dm];
        let mut mlp_out = DualStream {
            gamma: linear_rows(w2, d, dm, &act_g, seq),
            beta: linear_rows(w2, d, dm, &act_b, seq),
        };
        for r in 0..seq {
            for j in 0..d {
                mlp_out.gamma[r * d + j] += w[b.b2 + j];
            }
        }
        check_finite(&mlp_out, l, "mlp")?;
        let mut resid_out = resid_mid.clone();
        resid_out.add_assign(&mlp_out);
        resid = resid_out.clone();
        layers.push(LayerSites {
            layer: l,
            head_out,
            resid_mid,
            mlp_out,
            resid_out,
        });
    }

    let final_norm = norm_split(
        linear,
        &resid,
        &trace.lnf_mean,
        &trace.lnf_rstd,
        &w[lay.lnf_g..lay.lnf_g + d],
        &w[lay.lnf_b..lay.lnf_b + d],
    );
    let last = final_norm.row(seq - 1, d);
    let logits = DualStream {
        gamma: crate::model::readout(params, &last.gamma),
        beta: crate::model::readout(params, &last.beta),
    };
    check_finite(&logits, cfg.n_layers, "logits")?;
    Ok(PropagatedSites {
        source,
        layers,
        final_norm,
        logits,
    })
}

fn check_targets(source: HeadId, targets: &[Target], n_layers: usize) -> Result<()> {
    for t in targets {
        if let Target::Head(h) = t {
            if h.layer <= source.layer || h.layer >= n_layers {
                return Err(Error::Topology {
                    source_head: source,
                    target: t.to_string(),
                });
            }
        }
    }
    Ok(())
}

/// Contributions of `source` to each target, given a precomputed full trace.
pub fn decompose_traced(
    params: &Parameters<f32>,
    means: &BaselineMeans,
    trace: &ActivationTrace<f32>,
    input_id: u64,
    source: HeadId,
    targets: &[Target],
) -> Result<Vec<Contribution>> {
    check_targets(source, targets, params.config.n_layers)?;
    let sites = propagate(params, means, trace, source)?;
    let d = params.config.d_model;
    let last = trace.seq_len - 1;
    Ok(targets
        .iter()
        .map(|&target| {
            let s = match target {
                Target::Logits => sites.logits.clone(),
                Target::Head(h) => sites.head(h).row(last, d),
            };
            Contribution {
                source,
                target,
                input_id,
                beta: s.beta,
                gamma: s.gamma,
            }
        })
        .collect())
}

/// Contributions of `source` to each target for one input.
pub fn decompose(
    params: &Parameters<f32>,
    means: &BaselineMeans,
    input: &Example,
    source: HeadId,
    targets: &[Target],
) -> Result<Vec<Contribution>> {
    check_targets(source, targets, params.config.n_layers)?;
    let (_, trace) = forward(params, &input.tokens)?;
    decompose_traced(params, means, &trace, input.id, source, targets)
}

/// Cache location for means of a given checkpoint and mean set.
pub fn means_cache_path(dir: &Path, checkpoint_hash: &str, set_hash: &str) -> PathBuf {
    let short = |h: &str| h.chars().take(16).collect::<String>();
    dir.join(format!("means-{}-{}.manifest", short(checkpoint_hash), short(set_hash)))
}

pub fn save_means(path: &Path, means: &BaselineMeans, checkpoint_hash: &str) -> Result<()> {
    let mut header = Manifest::new();
    header
        .push("format", "ctsft-means-v1")
        .push("checkpoint_hash", checkpoint_hash)
        .push("mean_set_hash", &means.set_hash)
        .push("set_size", means.set_size)
        .push(
            "class_counts",
            means.class_counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        )
        .push("seq_len", means.seq_len)
        .push("d_model", means.d_model);
    let tensors: Vec<BundleTensor<'_>> = means
        .means
        .iter()
        .map(|(h, m)| BundleTensor {
            name: format!("mean.{}.{}", h.layer, h.head),
            shape: vec![means.seq_len, means.d_model],
            data: m,
        })
        .collect();
    write_bundle(path, header, &tensors)
}

/// Loads cached means and returns them with the checkpoint hash they belong to.
pub fn load_means(path: &Path) -> Result<(BaselineMeans, String)> {
    let (m, tensors) = read_bundle(path)?;
    if m.get("format") != Some("ctsft-means-v1") {
        return Err(Error::format(path, "not a means manifest"));
    }
    let mut means = BTreeMap::new();
    for t in tensors {
        let parts: Vec<&str> = t.name.split('.').collect();
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad tensor name {}", t.name)));
        if parts.len() != 3 || parts[0] != "mean" {
            return Err(Error::format(path, format!("bad tensor name {}", t.name)));
        }
        means.insert(HeadId::new(parse(parts[1])?, parse(parts[2])?), t.data);
    }
    let class_counts = m
        .require("class_counts", path)?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse())
        .collect::<std::result::Result<Vec<usize>, _>>()
        .map_err(|_| Error::format(path, "bad class counts"))?;
    Ok((
        BaselineMeans {
            seq_len: m.parse_value("seq_len", path)?,
            d_model: m.parse_value("d_model", path)?,
            means,
            set_size: m.parse_value("set_size", path)?,
            class_counts,
            set_hash: m.require("mean_set_hash", path)?.to_string(),
        },
        m.require("checkpoint_hash", path)?.to_string(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SEP;
    use crate::model::{forward_patched, ModelConfig};

    fn config(linear: bool) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_mlp: 12,
            vocab_size: 12,
            max_seq_len: 5,
            linear_mode: linear,
            label_tokens: vec![2, 3, 4],
        }
    }

    fn ex(id: u64, tokens: &[u32], label: usize) -> Example {
        Example {
            id,
            language: "t".into(),
            label,
            tokens: tokens.to_vec(),
        }
    }

    fn mean_set() -> Vec<Example> {
        vec![
            ex(0, &[5, 6, 7, 8, SEP], 0),
            ex(1, &[9, 6, 5, 10, SEP], 1),
            ex(2, &[11, 11, 7, 5, SEP], 2),
            ex(3, &[8, 9, 10, 11, SEP], 0),
        ]
    }

    #[test]
    fn single_example_mean_is_its_activation() {
        let p = Parameters::<f32>::init(config(false), 1).unwrap();
        let set = vec![ex(0, &[5, 6, 7, 8, SEP], 0)];
        let m = compute_baseline_means(&p, &set, 3).unwrap();
        let (_, trace) = forward(&p, &set[0].tokens).unwrap();
        for h in p.config.heads() {
            assert_eq!(m.get(h).unwrap(), trace.head_output(h));
        }
        assert!(!m.is_balanced());
    }

    #[test]
    fn empty_mean_set_is_an_error() {
        let p = Parameters::<f32>::init(config(false), 1).unwrap();
        assert!(matches!(compute_baseline_means(&p, &[], 3), Err(Error::Input(_))));
    }

    #[test]
    fn input_at_the_mean_has_zero_relevance() {
        let p = Parameters::<f32>::init(config(false), 2).unwrap();
        let set = vec![ex(0, &[5, 6, 7, 8, SEP], 0)];
        let m = compute_baseline_means(&p, &set, 3).unwrap();
        for s in p.config.heads() {
            let mut targets = vec![Target::Logits];
            if s.layer == 0 {
                targets.push(Target::Head(HeadId::new(1, 0)));
            }
            for c in decompose(&p, &m, &set[0], s, &targets).unwrap() {
                assert!(c.beta.iter().all(|&b| b == 0.0), "{s} -> {}", c.target);
            }
        }
    }

    #[test]
    fn upstream_target_is_a_topology_error() {
        let p = Parameters::<f32>::init(config(false), 2).unwrap();
        let m = compute_baseline_means(&p, &mean_set(), 3).unwrap();
        let r = decompose(&p, &m, &mean_set()[0], HeadId::new(1, 0), &[Target::Head(HeadId::new(1, 1))]);
        assert!(matches!(r, Err(Error::Topology { .. })));
    }

    #[test]
    fn streams_sum_to_full_activation() {
        let p = Parameters::<f32>::init(config(false), 3).unwrap();
        let m = compute_baseline_means(&p, &mean_set(), 3).unwrap();
        let (_, trace) = forward(&p, &mean_set()[1].tokens).unwrap();
        for s in p.config.heads() {
            let sites = propagate(&p, &m, &trace, s).unwrap();
            for ls in &sites.layers {
                let full = &trace.layers[ls.layer];
                for (stream, reference) in [(&ls.resid_mid, &full.resid_mid), (&ls.resid_out, &full.resid_out)] {
                    for (a, b) in stream.sum().iter().zip(reference) {
                        assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0));
                    }
                }
            }
            for (a, b) in sites.logits.sum().iter().zip(&trace.logits) {
                assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn linear_mode_matches_single_head_ablation() {
        let p = Parameters::<f32>::init(config(true), 4).unwrap();
        let m = compute_baseline_means(&p, &mean_set(), 3).unwrap();
        let x = ex(9, &[10, 5, 9, 6, SEP], 1);
        let (full, _) = forward(&p, &x.tokens).unwrap();
        for s in p.config.heads() {
            let c = &decompose(&p, &m, &x, s, &[Target::Logits]).unwrap()[0];
            let mu = m.get(s).unwrap();
            let (ablated, _) = forward_patched(&p, &x.tokens, |h| (h == s).then_some(mu)).unwrap();
            for i in 0..full.len() {
                assert!((c.beta[i] - (full[i] - ablated[i])).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn means_cache_round_trip() {
        let p = Parameters::<f32>::init(config(false), 5).unwrap();
        let m = compute_baseline_means(&p, &mean_set(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = means_cache_path(dir.path(), &p.hash(), &m.set_hash);
        save_means(&path, &m, &p.hash()).unwrap();
        let (back, h) = load_means(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(h, p.hash());
    }
}
