//! Full and head-masked fine-tuning.
//!
//! Surgical scopes train the coordinates of a chosen head set plus every
//! LayerNorm gain and bias; embeddings, MLPs and the unembedding stay frozen.
//! Optimizer state is kept only for trainable coordinates, so frozen
//! coordinates are never touched.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{ControlKind, Provenance};
use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::model::{argmax, backward, forward, head_param_slices, HeadId, Manifest, ParamKind, Parameters};

/// Which head set a run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Circuit,
    Random,
    LeastRelevant,
    NearZero,
    Full,
}

impl Scope {
    pub const ALL: [Scope; 5] = [Scope::Full, Scope::Circuit, Scope::Random, Scope::LeastRelevant, Scope::NearZero];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Circuit => "circuit",
            Scope::Random => "random",
            Scope::LeastRelevant => "least_relevant",
            Scope::NearZero => "near_zero",
            Scope::Full => "full",
        }
    }

    /// Control selection backing this scope, if any.
    pub fn control(self) -> Option<ControlKind> {
        match self {
            Scope::Random => Some(ControlKind::Random),
            Scope::LeastRelevant => Some(ControlKind::LeastRelevant),
            Scope::NearZero => Some(ControlKind::NearZero),
            Scope::Circuit | Scope::Full => None,
        }
    }
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scope `{s}`")))
    }
}

/// Trainable-coordinate set.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMask {
    pub scope: Scope,
    pub heads: BTreeSet<HeadId>,
    pub include_final_norm: bool,
    /// Sorted, non-overlapping coordinate ranges.
    ranges: Vec<Range<usize>>,
    total: usize,
}

fn merge(mut ranges: Vec<Range<usize>>) -> Vec<Range<usize>> {
    ranges.retain(|r| !r.is_empty());
    ranges.sort_by_key(|r| r.start);
    let mut out: Vec<Range<usize>> = Vec::new();
    for r in ranges {
        match out.last_mut() {
            Some(last) if r.start <= last.end => last.end = last.end.max(r.end),
            _ => out.push(r),
        }
    }
    out
}

impl HeadMask {
    /// Every coordinate.
    pub fn full(params: &Parameters<f32>) -> Self {
        HeadMask {
            scope: Scope::Full,
            heads: params.config.heads().into_iter().collect(),
            include_final_norm: true,
            ranges: vec![0..params.len()],
            total: params.len(),
        }
    }

    /// Heads of `heads` plus LayerNorm. An empty head set is refused.
    pub fn surgical(params: &Parameters<f32>, scope: Scope, heads: &BTreeSet<HeadId>, include_final_norm: bool) -> Result<Self> {
        if scope == Scope::Full {
            return Ok(Self::full(params));
        }
        if heads.is_empty() {
            return Err(Error::Config(format!(
                "{scope} scope has no heads; use a LayerNorm-only mask explicitly"
            )));
        }
        Self::build(params, scope, heads, include_final_norm)
    }

    /// LayerNorm parameters only.
    pub fn layer_norm_only(params: &Parameters<f32>, scope: Scope, include_final_norm: bool) -> Result<Self> {
        Self::build(params, scope, &BTreeSet::new(), include_final_norm)
    }

    fn build(params: &Parameters<f32>, scope: Scope, heads: &BTreeSet<HeadId>, include_final_norm: bool) -> Result<Self> {
        let mut ranges = params.layout.ranges_of(ParamKind::LayerNorm);
        if include_final_norm {
            ranges.extend(params.layout.ranges_of(ParamKind::FinalLayerNorm));
        }
        for &h in heads {
            ranges.extend(head_param_slices(&params.layout, &params.config, h)?);
        }
        Ok(HeadMask {
            scope,
            heads: heads.clone(),
            include_final_norm,
            ranges: merge(ranges),
            total: params.len(),
        })
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn trainable(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn fraction(&self) -> f64 {
        self.trainable() as f64 / self.total as f64
    }

    pub fn contains(&self, i: usize) -> bool {
        let k = self.ranges.partition_point(|r| r.end <= i);
        self.ranges.get(k).is_some_and(|r| r.contains(&i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of a single coordinate.
#[inline]
fn adam_update(x: &mut f32, g: f32, m: &mut f32, v: &mut f32, lr: f32, c: &AdamConfig, bc1: f32, bc2: f32) {
    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
    let mh = *m / bc1;
    let vh = *v / bc2;
    *x -= lr * mh / (vh.sqrt() + c.eps);
}

/// Plain Adam over every coordinate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Adam {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.config.beta1.powi(self.t);
        let bc2 = 1.0 - self.config.beta2.powi(self.t);
        for i in 0..params.len() {
            adam_update(&mut params[i], grad[i], &mut self.m[i], &mut self.v[i], lr, &self.config, bc1, bc2);
        }
    }
}

/// Adam whose moments exist only for the masked coordinates.
#[derive(Debug, Clone)]
pub struct MaskedAdam {
    pub config: AdamConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl MaskedAdam {
    pub fn new(mask: &HeadMask, config: AdamConfig) -> Self {
        MaskedAdam {
            config,
            m: vec![0.0; mask.trainable()],
            v: vec![0.0; mask.trainable()],
            t: 0,
        }
    }

    /// Number of coordinates carrying optimizer state.
    pub fn state_len(&self) -> usize {
        self.m.len()
    }
}

/// Applies one optimizer step to the masked coordinates only.
pub fn masked_step(params: &mut Parameters<f32>, grad: &[f32], mask: &HeadMask, opt: &mut MaskedAdam, lr: f32) -> Result<()> {
    if grad.len() != params.len() || mask.total != params.len() || opt.state_len() != mask.trainable() {
        return Err(Error::Input("mask, gradient and parameters disagree in size".into()));
    }
    opt.t += 1;
    let bc1 = 1.0 - opt.config.beta1.powi(opt.t);
    let bc2 = 1.0 - opt.config.beta2.powi(opt.t);
    let mut k = 0;
    for r in &mask.ranges {
        for i in r.clone() {
            adam_update(&mut params.data[i], grad[i], &mut opt.m[k], &mut opt.v[k], lr, &opt.config, bc1, bc2);
            k += 1;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Train the pre-readout LayerNorm under surgical scopes.
    pub include_final_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 16,
            lr: 5e-5,
            adam: AdamConfig::default(),
            seed: 0,
            max_steps: None,
            include_final_norm: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// What a training run did.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub kind: String,
    pub initial_hash: String,
    pub final_hash: String,
    pub scope: Scope,
    pub heads: BTreeSet<HeadId>,
    pub circuit: Option<Provenance>,
    pub n: usize,
    pub data_hash: String,
    pub config: TrainConfig,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub trainable: usize,
    pub total: usize,
}

impl RunRecord {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }

    pub fn to_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.push("format", "ctsft-run-v1")
            .push("kind", &self.kind)
            .push("initial_hash", &self.initial_hash)
            .push("final_hash", &self.final_hash)
            .push("scope", self.scope)
            .push(
                "heads",
                self.heads.iter().map(|h| format!("{}:{}", h.layer, h.head)).collect::<Vec<_>>().join(","),
            );
        if let Some(p) = &self.circuit {
            m.push("circuit.checkpoint_hash", &p.checkpoint_hash)
                .push("circuit.inputs_hash", &p.inputs_hash)
                .push("circuit.means_hash", &p.means_hash);
        }
        m.push("n", self.n)
            .push("data_hash", &self.data_hash)
            .push("seed", self.config.seed)
            .push("epochs", self.config.epochs)
            .push("batch_size", self.config.batch_size)
            .push("lr", self.config.lr)
            .push("include_final_norm", self.config.include_final_norm)
            .push("steps", self.steps)
            .push("trainable", self.trainable)
            .push("total", self.total)
            .push("trainable_fraction", self.trainable_fraction());
        for (e, l) in self.epoch_losses.iter().enumerate() {
            m.push("epoch_loss", format!("{e} {l}"));
        }
        m
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_manifest().write(path)
    }
}

/// Shared training loop over shuffled mini-batches.
fn train(
    params: &mut Parameters<f32>,
    data: &[Example],
    mask: &HeadMask,
    cfg: &TrainConfig,
) -> Result<(usize, Vec<f64>)> {
    cfg.validate()?;
    let mut opt = MaskedAdam::new(mask, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0;
    let mut losses = Vec::new();
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break 'epochs;
            }
            let batch: Vec<(Vec<u32>, usize)> = chunk.iter().map(|&i| (data[i].tokens.clone(), data[i].label)).collect();
            let (loss, grad) = backward(params, &batch).map_err(|e| match e {
                Error::NonFiniteLoss { index } => Error::Training {
                    step: steps,
                    reason: format!("non-finite loss on batch element {index}"),
                },
                other => other,
            })?;
            masked_step(params, &grad.data, mask, &mut opt, cfg.lr)?;
            if params.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Training {
                    step: steps,
                    reason: "parameters became non-finite".into(),
                });
            }
            total += loss as f64;
            batches += 1;
            steps += 1;
        }
        if batches > 0 {
            losses.push(total / batches as f64);
        }
    }
    Ok((steps, losses))
}

fn run(
    kind: &str,
    start: &Parameters<f32>,
    data: &[Example],
    mask: &HeadMask,
    circuit: Option<Provenance>,
    cfg: &TrainConfig,
) -> Result<(Parameters<f32>, RunRecord)> {
    let mut params = start.clone();
    let initial_hash = start.hash();
    let (steps, epoch_losses) = if data.is_empty() { (0, Vec::new()) } else { train(&mut params, data, mask, cfg)? };
    let record = RunRecord {
        kind: kind.to_string(),
        initial_hash,
        final_hash: params.hash(),
        scope: mask.scope,
        heads: if mask.scope == Scope::Full { BTreeSet::new() } else { mask.heads.clone() },
        circuit,
        n: data.len(),
        data_hash: crate::corpus::set_hash(data),
        config: cfg.clone(),
        steps,
        epoch_losses,
        trainable: mask.trainable(),
        total: mask.total,
    };
    Ok((params, record))
}

/// Full fine-tuning on the first `n_src` source examples.
pub fn competence_tune(
    base: &Parameters<f32>,
    source: &[Example],
    n_src: usize,
    cfg: &TrainConfig,
) -> Result<(Parameters<f32>, RunRecord)> {
    if n_src > source.len() {
        return Err(Error::Input(format!("n_src {n_src} exceeds the {} available examples", source.len())));
    }
    run("competence", base, &source[..n_src], &HeadMask::full(base), None, cfg)
}

/// Fine-tuning restricted to `mask` on a target tuning set.
pub fn ct_sft(
    start: &Parameters<f32>,
    mask: &HeadMask,
    data: &[Example],
    circuit: Option<Provenance>,
    cfg: &TrainConfig,
) -> Result<(Parameters<f32>, RunRecord)> {
    if mask.total != start.len() {
        return Err(Error::Input("mask was built for a different model".into()));
    }
    let kind = if mask.scope == Scope::Full { "full_ft" } else { "ct_sft" };
    run(kind, start, data, mask, circuit, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub support: usize,
    pub correct: usize,
    pub predicted: usize,
}

impl ClassMetrics {
    pub fn recall(&self) -> f64 {
        if self.support == 0 {
            0.0
        } else {
            self.correct as f64 / self.support as f64
        }
    }

    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.correct as f64 / self.predicted as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Mean of gold logit minus mean competitor logit.
    pub mean_margin: f64,
    pub predictions: Vec<usize>,
}

/// Gold logit minus the mean of the other label logits.
pub fn margin(logits: &[f32], gold: usize) -> f64 {
    let n = logits.len();
    let rest: f64 = logits.iter().enumerate().filter(|(i, _)| *i != gold).map(|(_, x)| *x as f64).sum();
    logits[gold] as f64 - rest / (n - 1) as f64
}

pub fn evaluate(params: &Parameters<f32>, data: &[Example]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty set".into()));
    }
    let c = params.config.n_labels();
    if let Some(e) = data.iter().find(|e| e.label >= c) {
        return Err(Error::Input(format!("example {} has label {} outside {c} classes", e.id, e.label)));
    }
    let outputs: Vec<Result<(usize, f64)>> = data
        .par_iter()
        .map(|e| {
            let (logits, _) = forward(params, &e.tokens)?;
            Ok((argmax(&logits), margin(&logits, e.label)))
        })
        .collect();
    let mut per_class = vec![
        ClassMetrics {
            support: 0,
            correct: 0,
            predicted: 0,
        };
        c
    ];
    let mut correct = 0;
    let mut margin_sum = 0.0;
    let mut predictions = Vec::with_capacity(data.len());
    for (e, r) in data.iter().zip(outputs) {
        let (pred, m) = r?;
        per_class[e.label].support += 1;
        per_class[pred].predicted += 1;
        if pred == e.label {
            correct += 1;
            per_class[e.label].correct += 1;
        }
        margin_sum += m;
        predictions.push(pred);
    }
    Ok(EvalReport {
        n: data.len(),
        accuracy: correct as f64 / data.len() as f64,
        per_class,
        mean_margin: margin_sum / data.len() as f64,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;

    fn params() -> Parameters<f32> {
        Parameters::init(tiny_config(), 3).unwrap()
    }

    fn data(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                id: i as u64,
                language: "x".into(),
                label: i % 3,
                tokens: vec![0, 5 + (i % 3) as u32, 6, 1],
            })
            .collect()
    }

    #[test]
    fn mask_contents() {
        let p = params();
        let heads = BTreeSet::from([HeadId::new(1, 0)]);
        let m = HeadMask::surgical(&p, Scope::Circuit, &heads, true).unwrap();
        let mut expected = vec![false; p.len()];
        for r in head_param_slices(&p.layout, &p.config, HeadId::new(1, 0)).unwrap() {
            expected[r].iter_mut().for_each(|x| *x = true);
        }
        for kind in [ParamKind::LayerNorm, ParamKind::FinalLayerNorm] {
            for r in p.layout.ranges_of(kind) {
                expected[r].iter_mut().for_each(|x| *x = true);
            }
        }
        for (i, e) in expected.iter().enumerate() {
            assert_eq!(m.contains(i), *e, "coordinate {i}");
        }
        assert_eq!(m.trainable(), expected.iter().filter(|x| **x).count());
        assert!(HeadMask::surgical(&p, Scope::Circuit, &BTreeSet::new(), true).is_err());
        let no_final = HeadMask::surgical(&p, Scope::Circuit, &heads, false).unwrap();
        assert_eq!(m.trainable() - no_final.trainable(), 2 * p.config.d_model);
    }

    #[test]
    fn layer_norm_only_mask_changes_only_layer_norm() {
        let p = params();
        let m = HeadMask::layer_norm_only(&p, Scope::Circuit, true).unwrap();
        let mut q = p.clone();
        let mut opt = MaskedAdam::new(&m, AdamConfig::default());
        let grad = vec![1.0f32; p.len()];
        masked_step(&mut q, &grad, &m, &mut opt, 0.1).unwrap();
        for i in 0..p.len() {
            if p.data[i] != q.data[i] {
                assert!(m.contains(i));
            }
        }
        assert_ne!(p.data, q.data);
    }

    #[test]
    fn full_mask_matches_plain_adam() {
        let p = params();
        let m = HeadMask::full(&p);
        let mut a = p.clone();
        let mut b = p.clone();
        let mut adam = Adam::new(p.len(), AdamConfig::default());
        let mut masked = MaskedAdam::new(&m, AdamConfig::default());
        for step in 0..3 {
            let grad: Vec<f32> = (0..p.len()).map(|i| ((i * 7 + step) % 13) as f32 - 6.0).collect();
            adam.step(&mut a.data, &grad, 0.01);
            masked_step(&mut b, &grad, &m, &mut masked, 0.01).unwrap();
        }
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn competence_tune_edge_cases() {
        let p = params();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            lr: 1e-2,
            seed: 5,
            ..TrainConfig::default()
        };
        let (q, r) = competence_tune(&p, &data(12), 0, &cfg).unwrap();
        assert_eq!(q.hash(), p.hash());
        assert_eq!(r.steps, 0);
        let (a, _) = competence_tune(&p, &data(12), 12, &cfg).unwrap();
        let (b, _) = competence_tune(&p, &data(12), 12, &cfg).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), p.hash());
        assert!(competence_tune(&p, &data(12), 13, &cfg).is_err());
    }

    #[test]
    fn ct_sft_respects_the_mask_and_records_sizes() {
        let p = params();
        let heads = BTreeSet::from([HeadId::new(0, 1)]);
        let m = HeadMask::surgical(&p, Scope::NearZero, &heads, true).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let (q, r25) = ct_sft(&p, &m, &data(9), None, &cfg).unwrap();
        for i in 0..p.len() {
            if !m.contains(i) {
                assert_eq!(p.data[i].to_bits(), q.data[i].to_bits());
            }
        }
        let (_, r12) = ct_sft(&p, &m, &data(12), None, &cfg).unwrap();
        assert_ne!(r25, r12);
        assert_eq!(r25.trainable, r12.trainable);
        assert_eq!(r25.kind, "ct_sft");
    }

    #[test]
    fn evaluation_counts() {
        let p = params();
        let d = data(9);
        let r = evaluate(&p, &d).unwrap();
        let mut correct = 0;
        for e in &d {
            let (l, _) = forward(&p, &e.tokens).unwrap();
            if argmax(&l) == e.label {
                correct += 1;
            }
        }
        assert_eq!(r.accuracy, correct as f64 / 9.0);
        assert_eq!(r.per_class.iter().map(|c| c.support).sum::<usize>(), 9);
        assert!(evaluate(&p, &[]).is_err());
    }

    #[test]
    fn margin_definition() {
        assert_eq!(margin(&[3.0, 1.0, 2.0], 0), 1.5);
        assert_eq!(margin(&[1.0, 1.0], 1), 0.0);
    }
}
