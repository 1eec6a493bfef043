//! Synthetic multilingual classification data.
//!
//! A [`TaskSpec`] fixes class-conditional distributions over content tokens
//! of a source language. A [`LanguageSpec`] derives another language from it:
//! a bijection over content tokens (surface forms) and a `drift` fraction of
//! every class distribution re-expressed through a second, language-specific
//! token map. Sequences are left-padded to a fixed length and end with a
//! separator; the label is predicted at that final position.
//!
//! Token layout: `0 = PAD`, `1 = SEP`, `2..2+n_classes` label tokens, then the
//! content vocabulary.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{argmax, forward, ModelConfig, Parameters};

pub const PAD: u32 = 0;
pub const SEP: u32 = 1;
const FIRST_LABEL: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub content_vocab: usize,
    /// Per class, a probability distribution over content token indices.
    pub class_dists: Vec<Vec<f64>>,
    /// Inclusive range of content tokens per sequence.
    pub min_len: usize,
    pub max_len: usize,
}

impl TaskSpec {
    /// Each class owns `cues_per_class` cue tokens that together receive
    /// `cue_mass` of its distribution; the rest is spread over neutral tokens
    /// shared by all classes.
    pub fn cue_task(
        n_classes: usize,
        content_vocab: usize,
        cues_per_class: usize,
        cue_mass: f64,
        min_len: usize,
        max_len: usize,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Config("a task needs at least two classes".into()));
        }
        if cues_per_class == 0 || n_classes * cues_per_class >= content_vocab {
            return Err(Error::Config(format!(
                "content vocabulary {content_vocab} too small for {n_classes} x {cues_per_class} cues plus neutral tokens"
            )));
        }
        if !(0.0..=1.0).contains(&cue_mass) {
            return Err(Error::Config("cue_mass must lie in [0, 1]".into()));
        }
        let n_cues = n_classes * cues_per_class;
        let n_neutral = content_vocab - n_cues;
        let class_dists = (0..n_classes)
            .map(|c| {
                (0..content_vocab)
                    .map(|t| {
                        if t >= n_cues {
                            (1.0 - cue_mass) / n_neutral as f64
                        } else if t / cues_per_class == c {
                            cue_mass / cues_per_class as f64
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let spec = TaskSpec {
            n_classes,
            content_vocab,
            class_dists,
            min_len,
            max_len,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.class_dists.len() != self.n_classes {
            return Err(Error::Config("class distributions do not match n_classes".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("invalid sequence-length range".into()));
        }
        for (c, dist) in self.class_dists.iter().enumerate() {
            if dist.len() != self.content_vocab {
                return Err(Error::Config(format!("class {c} distribution has wrong length")));
            }
            let total: f64 = dist.iter().sum();
            if dist.iter().any(|&p| p < 0.0 || !p.is_finite()) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("class {c} distribution is not normalised")));
            }
        }
        Ok(())
    }

    pub fn label_tokens(&self) -> Vec<u32> {
        (0..self.n_classes as u32).map(|c| FIRST_LABEL + c).collect()
    }

    pub fn content_token(&self, index: usize) -> u32 {
        FIRST_LABEL + self.n_classes as u32 + index as u32
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_LABEL as usize + self.n_classes + self.content_vocab
    }

    /// Fixed sequence length: content plus separator.
    pub fn seq_len(&self) -> usize {
        self.max_len + 1
    }

    pub fn model_config(&self, n_layers: usize, n_heads: usize, d_model: usize, d_mlp: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_mlp,
            vocab_size: self.vocab_size(),
            max_seq_len: self.seq_len(),
            linear_mode: false,
            label_tokens: self.label_tokens(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: String,
    /// Surface form of every source content index.
    pub permutation: Vec<usize>,
    /// Fraction of each class distribution routed through `drift_map`.
    pub drift: f64,
    pub drift_map: Vec<usize>,
}

impl LanguageSpec {
    /// Identity language without drift.
    pub fn source(id: impl Into<String>, content_vocab: usize) -> Self {
        LanguageSpec {
            id: id.into(),
            permutation: (0..content_vocab).collect(),
            drift: 0.0,
            drift_map: (0..content_vocab).collect(),
        }
    }

    /// Derived language: a random `permuted_fraction` of content tokens is
    /// shuffled among itself, and `drift` of the class mass moves through a
    /// random token map.
    pub fn derived(id: impl Into<String>, content_vocab: usize, permuted_fraction: f64, drift: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&permuted_fraction) || !(0.0..=1.0).contains(&drift) {
            return Err(Error::Config("permuted_fraction and drift must lie in [0, 1]".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut permutation: Vec<usize> = (0..content_vocab).collect();
        let n_moved = (permuted_fraction * content_vocab as f64).round() as usize;
        let mut chosen: Vec<usize> = (0..content_vocab).collect();
        chosen.shuffle(&mut rng);
        chosen.truncate(n_moved);
        let mut targets = chosen.clone();
        targets.shuffle(&mut rng);
        for (&from, &to) in chosen.iter().zip(&targets) {
            permutation[from] = to;
        }
        let mut drift_map: Vec<usize> = (0..content_vocab).collect();
        drift_map.shuffle(&mut rng);
        Ok(LanguageSpec {
            id: id.into(),
            permutation,
            drift,
            drift_map,
        })
    }

    pub fn validate(&self, task: &TaskSpec) -> Result<()> {
        for (name, map) in [("permutation", &self.permutation), ("drift map", &self.drift_map)] {
            if map.len() != task.content_vocab {
                return Err(Error::Config(format!(
                    "language {}: {name} covers {} tokens but the content vocabulary has {}",
                    self.id,
                    map.len(),
                    task.content_vocab
                )));
            }
            let mut seen = vec![false; map.len()];
            for &t in map {
                if t >= seen.len() || std::mem::replace(&mut seen[t], true) {
                    return Err(Error::Config(format!("language {}: {name} is not a bijection", self.id)));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.drift) {
            return Err(Error::Config(format!("language {}: drift outside [0, 1]", self.id)));
        }
        Ok(())
    }

    /// Class distributions over surface content tokens of this language.
    pub fn class_dists(&self, task: &TaskSpec) -> Vec<Vec<f64>> {
        task.class_dists
            .iter()
            .map(|dist| {
                let mut out = vec![0.0; task.content_vocab];
                for (t, &p) in dist.iter().enumerate() {
                    out[self.permutation[t]] += (1.0 - self.drift) * p;
                    out[self.permutation[self.drift_map[t]]] += self.drift * p;
                }
                out
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub language: String,
    pub label: usize,
    pub tokens: Vec<u32>,
}

fn sample_index(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws `n` labelled examples in `lang`; class counts differ by at most one.
pub fn generate_language(task: &TaskSpec, lang: &LanguageSpec, n: usize, seed: u64) -> Result<Vec<Example>> {
    task.validate()?;
    lang.validate(task)?;
    if n < task.n_classes {
        return Err(Error::Config(format!(
            "cannot draw {n} examples over {} classes",
            task.n_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % task.n_classes).collect();
    labels.shuffle(&mut rng);
    let total = task.seq_len();
    let mut out = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let len = rng.gen_range(task.min_len..=task.max_len);
        let mut tokens = vec![PAD; total - len - 1];
        for _ in 0..len {
            let mut t = sample_index(&task.class_dists[label], &mut rng);
            if lang.drift > 0.0 && rng.gen::<f64>() < lang.drift {
                t = lang.drift_map[t];
            }
            tokens.push(task.content_token(lang.permutation[t]));
        }
        tokens.push(SEP);
        out.push(Example {
            id: i as u64,
            language: lang.id.clone(),
            label,
            tokens,
        });
    }
    Ok(out)
}

/// Hex SHA-256 of an example list (ids, labels, tokens) in the given order.
pub fn set_hash(examples: &[Example]) -> String {
    let mut h = Sha256::new();
    for e in examples {
        h.update(e.id.to_le_bytes());
        h.update((e.label as u64).to_le_bytes());
        h.update(e.language.as_bytes());
        for t in &e.tokens {
            h.update(t.to_le_bytes());
        }
        h.update([0xff]);
    }
    hex::encode(h.finalize())
}

/// Writes `id<TAB>language<TAB>label<TAB>space-separated tokens` lines.
pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(f, "# example_id\tlanguage\tlabel\ttokens")?;
        for e in examples {
            let toks = e.tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
            writeln!(f, "{}\t{}\t{}\t{}", e.id, e.language, e.label, toks)?;
        }
        f.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Example>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::format(path, format!("line {}: {what}", i + 1));
        let mut cols = line.split('\t');
        let id = cols.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad id"))?;
        let language = cols.next().ok_or_else(|| bad("missing language"))?.to_string();
        let label = cols.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad label"))?;
        let tokens = cols
            .next()
            .ok_or_else(|| bad("missing tokens"))?
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<Vec<u32>, _>>()
            .map_err(|_| bad("bad token"))?;
        out.push(Example {
            id,
            language,
            label,
            tokens,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCounts {
    pub discovery: usize,
    pub heldout_tuning: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for PoolCounts {
    fn default() -> Self {
        PoolCounts {
            discovery: 400,
            heldout_tuning: 100,
            validation: 100,
            test: 400,
        }
    }
}

impl PoolCounts {
    pub fn total(&self) -> usize {
        self.discovery + self.heldout_tuning + self.validation + self.test
    }
}

/// Who is asking for the test pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Discovery,
    Tuning,
    Diagnostics,
    Evaluation,
}

/// Four disjoint example sets of one language, each sorted by example id.
#[derive(Debug)]
pub struct Pools {
    discovery: Vec<Example>,
    heldout_tuning: Vec<Example>,
    validation: Vec<Example>,
    test: Vec<Example>,
    test_reads: AtomicUsize,
}

impl Clone for Pools {
    fn clone(&self) -> Self {
        Pools {
            discovery: self.discovery.clone(),
            heldout_tuning: self.heldout_tuning.clone(),
            validation: self.validation.clone(),
            test: self.test.clone(),
            test_reads: AtomicUsize::new(self.test_reads.load(Ordering::Relaxed)),
        }
    }
}

impl Pools {
    pub fn discovery(&self) -> &[Example] {
        &self.discovery
    }

    pub fn heldout_tuning(&self) -> &[Example] {
        &self.heldout_tuning
    }

    pub fn validation(&self) -> &[Example] {
        &self.validation
    }

    /// The test pool is only released to the evaluation phase.
    pub fn test(&self, phase: Phase) -> Result<&[Example]> {
        if phase != Phase::Evaluation {
            return Err(Error::Input(format!("test pool requested during {phase:?}")));
        }
        self.test_reads.fetch_add(1, Ordering::Relaxed);
        Ok(&self.test)
    }

    /// How often the test pool has been handed out.
    pub fn test_reads(&self) -> usize {
        self.test_reads.load(Ordering::Relaxed)
    }

    pub fn sizes(&self) -> PoolCounts {
        PoolCounts {
            discovery: self.discovery.len(),
            heldout_tuning: self.heldout_tuning.len(),
            validation: self.validation.len(),
            test: self.test.len(),
        }
    }
}

/// Disjoint random split into the four pools.
pub fn split_pools(examples: &[Example], counts: PoolCounts, seed: u64) -> Result<Pools> {
    if examples.len() < counts.total() {
        return Err(Error::Config(format!(
            "need {} examples for the pools, have {}",
            counts.total(),
            examples.len()
        )));
    }
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut take = {
        let mut cursor = 0;
        move |n: usize| {
            let mut pool: Vec<Example> = idx[cursor..cursor + n].iter().map(|&i| examples[i].clone()).collect();
            cursor += n;
            pool.sort_by_key(|e| e.id);
            pool
        }
    };
    Ok(Pools {
        discovery: take(counts.discovery),
        heldout_tuning: take(counts.heldout_tuning),
        validation: take(counts.validation),
        test: take(counts.test),
        test_reads: AtomicUsize::new(0),
    })
}

/// Correctly predicted discovery inputs.
#[derive(Debug, Clone)]
pub struct DiscoveryInputs {
    pub examples: Vec<Example>,
    /// Fewer than the requested number were available.
    pub short: bool,
}

/// The first `k` pool examples (in id order) the model classifies correctly.
pub fn select_discovery_inputs(params: &Parameters<f32>, pool: &[Example], k: usize) -> Result<DiscoveryInputs> {
    let mut sorted: Vec<&Example> = pool.iter().collect();
    sorted.sort_by_key(|e| e.id);
    let mut examples = Vec::with_capacity(k);
    for e in sorted {
        if examples.len() == k {
            break;
        }
        let (logits, _) = forward(params, &e.tokens)?;
        if argmax(&logits) == e.label {
            examples.push(e.clone());
        }
    }
    if examples.is_empty() {
        return Err(Error::Discovery(
            "model predicts no discovery example correctly; competence too weak".into(),
        ));
    }
    let short = examples.len() < k;
    if short {
        log::warn!("only {} correctly predicted discovery inputs (wanted {k})", examples.len());
    }
    Ok(DiscoveryInputs { examples, short })
}

/// Label-balanced sample for baseline estimation.
///
/// Takes `min(k / n_classes, smallest class count)` examples of every class,
/// so all classes are represented exactly equally. Output is sorted by id.
pub fn sample_balanced_mean_set(pool: &[Example], n_classes: usize, k: usize, seed: u64) -> Result<Vec<Example>> {
    let mut by_class: BTreeMap<usize, Vec<&Example>> = (0..n_classes).map(|c| (c, Vec::new())).collect();
    for e in pool {
        by_class
            .get_mut(&e.label)
            .ok_or_else(|| Error::Input(format!("label {} outside {n_classes} classes", e.label)))?
            .push(e);
    }
    if let Some((&class, _)) = by_class.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::Balance { class });
    }
    let min_count = by_class.values().map(Vec::len).min().unwrap_or(0);
    let per_class = (k / n_classes).min(min_count);
    if per_class == 0 {
        return Err(Error::Config(format!("k = {k} is smaller than the {n_classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_class * n_classes);
    for list in by_class.values_mut() {
        list.sort_by_key(|e| e.id);
        list.shuffle(&mut rng);
        out.extend(list.iter().take(per_class).map(|&e| e.clone()));
    }
    out.sort_by_key(|e| e.id);
    Ok(out)
}
