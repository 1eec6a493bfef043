//! Experiment orchestration.
//!
//! A run goes through the two-phase protocol for every seed: competence
//! tuning on the source language, baseline means and discovery inputs,
//! circuits per scoring rule and selection ratio, then a grid of masked or
//! full tuning runs on each target language, evaluated on target and source
//! test pools. Every result is one [`ResultRow`] in a CSV file; artifacts are
//! cached under content hashes so an interrupted sweep resumes where it
//! stopped.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cdt::{compute_baseline_means, load_means, means_cache_path, save_means, BaselineMeans};
use crate::circuit::{control_selection, discover, topology, CdtScorer, Circuit, DiscoveryConfig, HeadScorer};
use crate::corpus::{
    generate_language, sample_balanced_mean_set, select_discovery_inputs, set_hash, write_dataset, Example,
    LanguageSpec, Phase, PoolCounts, Pools, TaskSpec,
};
use crate::error::{Error, Result};
use crate::faithfulness::{faithfulness_report, write_outcomes};
use crate::model::{load_checkpoint, save_checkpoint, HeadId, ModelConfig, Parameters};
use crate::scoring::{RelevanceTable, ScoringRule};
use crate::tuning::{competence_tune, ct_sft, evaluate, HeadMask, Scope, TrainConfig};

/// Seeds used when a config does not list its own.
pub const DEFAULT_SEEDS: [u64; 4] = [31, 777, 2025, 12345];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub n_classes: usize,
    pub content_vocab: usize,
    pub cues_per_class: usize,
    pub cue_mass: f64,
    pub min_len: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageConfig {
    pub id: String,
    /// Free-form tag such as `hard` or `easy`.
    #[serde(default)]
    pub difficulty: Option<String>,
    #[serde(default)]
    pub permuted_fraction: f64,
    #[serde(default)]
    pub drift: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Where baseline means and discovery inputs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// The competence-tuning examples themselves.
    Shared,
    /// The rest of the discovery pool, disjoint from competence tuning.
    Heldout,
}

impl PoolMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolMode::Shared => "shared",
            PoolMode::Heldout => "heldout",
        }
    }
}

fn default_examples() -> usize {
    1000
}
fn default_data_seed() -> u64 {
    1
}
fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}
fn default_inputs() -> usize {
    50
}
fn default_mean_set() -> usize {
    48
}
fn default_true() -> bool {
    true
}
fn default_depths() -> Vec<usize> {
    vec![crate::circuit::DEFAULT_MAX_DEPTH]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub id: String,
    pub model: ModelShape,
    pub task: TaskConfig,
    #[serde(default = "default_examples")]
    pub examples_per_language: usize,
    #[serde(default = "default_data_seed")]
    pub data_seed: u64,
    pub source: LanguageConfig,
    pub targets: Vec<LanguageConfig>,
    #[serde(default)]
    pub pools: PoolCounts,
    pub n_src: usize,
    pub competence: TrainConfig,
    pub tuning: TrainConfig,
    pub tuning_sizes: Vec<usize>,
    pub scopes: Vec<Scope>,
    pub rules: Vec<ScoringRule>,
    pub ps: Vec<f64>,
    #[serde(default = "default_depths")]
    pub max_depths: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_pool_mode")]
    pub discovery_pool: PoolMode,
    #[serde(default = "default_inputs")]
    pub n_discovery_inputs: usize,
    #[serde(default = "default_mean_set")]
    pub mean_set_size: usize,
    /// Also fine-tune the untuned base model directly on each target.
    #[serde(default)]
    pub direct_ft: bool,
    #[serde(default = "default_true")]
    pub faithfulness: bool,
    /// Worker threads for grid cells; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
}

fn default_pool_mode() -> PoolMode {
    PoolMode::Shared
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() || self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty and distinct".into()));
        }
        let mut ids: BTreeSet<&str> = BTreeSet::from([self.source.id.as_str()]);
        for t in &self.targets {
            if !ids.insert(&t.id) {
                return Err(Error::Config(format!("language id `{}` used twice", t.id)));
            }
        }
        if self.n_src > self.pools.discovery {
            return Err(Error::Config(format!(
                "n_src {} exceeds the discovery pool ({})",
                self.n_src, self.pools.discovery
            )));
        }
        if self.discovery_pool == PoolMode::Heldout && self.n_src >= self.pools.discovery {
            return Err(Error::Config("heldout discovery needs n_src below the discovery pool size".into()));
        }
        if let Some(n) = self.tuning_sizes.iter().find(|&&n| n > self.pools.heldout_tuning) {
            return Err(Error::Config(format!(
                "tuning size {n} exceeds the held-out pool ({})",
                self.pools.heldout_tuning
            )));
        }
        if self.examples_per_language < self.pools.total() {
            return Err(Error::Config("examples_per_language is smaller than the pools".into()));
        }
        for &p in &self.ps {
            DiscoveryConfig::new(ScoringRule::Directional, p, 0).validate()?;
        }
        for &d in &self.max_depths {
            DiscoveryConfig::new(ScoringRule::Directional, 0.5, d).validate()?;
        }
        self.competence.validate()?;
        self.tuning.validate()?;
        self.model_config()?.validate()
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        let t = &self.task;
        TaskSpec::cue_task(t.n_classes, t.content_vocab, t.cues_per_class, t.cue_mass, t.min_len, t.max_len)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        Ok(self.task_spec()?.model_config(m.n_layers, m.n_heads, m.d_model, m.d_mlp))
    }

    /// The synthetic hard-transfer setup used by the acceptance suite.
    pub fn hard_transfer() -> Self {
        ExperimentConfig {
            id: "hard-transfer".into(),
            model: ModelShape {
                n_layers: 4,
                n_heads: 4,
                d_model: 32,
                d_mlp: 64,
            },
            task: TaskConfig {
                n_classes: 3,
                content_vocab: 40,
                cues_per_class: 4,
                cue_mass: 0.5,
                min_len: 6,
                max_len: 12,
            },
            examples_per_language: 1000,
            data_seed: 1,
            source: LanguageConfig {
                id: "src".into(),
                difficulty: None,
                permuted_fraction: 0.0,
                drift: 0.0,
                seed: 0,
            },
            targets: vec![LanguageConfig {
                id: "hard".into(),
                difficulty: Some("hard".into()),
                permuted_fraction: 1.0,
                drift: 0.3,
                seed: 99,
            }],
            pools: PoolCounts::default(),
            n_src: 400,
            competence: TrainConfig {
                epochs: 20,
                batch_size: 16,
                lr: 3e-3,
                ..TrainConfig::default()
            },
            tuning: TrainConfig {
                epochs: 5,
                batch_size: 16,
                lr: 3e-2,
                ..TrainConfig::default()
            },
            tuning_sizes: vec![25],
            scopes: vec![Scope::Full, Scope::Circuit],
            rules: vec![ScoringRule::Directional],
            ps: vec![0.125],
            max_depths: vec![2],
            seeds: DEFAULT_SEEDS.to_vec(),
            discovery_pool: PoolMode::Shared,
            n_discovery_inputs: 50,
            mean_set_size: 48,
            direct_ft: false,
            faithfulness: true,
            workers: 0,
        }
    }
}

/// One metric value of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment_id: String,
    pub phase: String,
    pub source_lang: String,
    pub target_lang: Option<String>,
    pub scope: Option<String>,
    pub rule: Option<String>,
    pub p: Option<f64>,
    pub depth: Option<usize>,
    pub n: Option<usize>,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Generated languages and their pools.
pub struct Prepared {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub source: (LanguageSpec, Pools),
    pub targets: Vec<(LanguageConfig, LanguageSpec, Pools)>,
}

fn language_spec(task: &TaskSpec, lc: &LanguageConfig) -> Result<LanguageSpec> {
    if lc.permuted_fraction == 0.0 && lc.drift == 0.0 {
        Ok(LanguageSpec::source(lc.id.clone(), task.content_vocab))
    } else {
        LanguageSpec::derived(lc.id.clone(), task.content_vocab, lc.permuted_fraction, lc.drift, lc.seed)
    }
}

/// Deterministically generates every language of the config.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let task = cfg.task_spec()?;
    let build = |i: u64, lc: &LanguageConfig| -> Result<(LanguageSpec, Pools)> {
        let spec = language_spec(&task, lc)?;
        let base = cfg.data_seed.wrapping_add(2 * i);
        let examples = generate_language(&task, &spec, cfg.examples_per_language, base)?;
        let pools = crate::corpus::split_pools(&examples, cfg.pools, base + 1)?;
        Ok((spec, pools))
    };
    let source = build(0, &cfg.source)?;
    let mut targets = Vec::new();
    for (i, t) in cfg.targets.iter().enumerate() {
        let (spec, pools) = build(i as u64 + 1, t)?;
        targets.push((t.clone(), spec, pools));
    }
    Ok(Prepared {
        model: cfg.model_config()?,
        task,
        source,
        targets,
    })
}

/// Writes every pool of every language as datasets under `dir`.
pub fn write_data(prepared: &Prepared, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let langs = std::iter::once((&prepared.source.0, &prepared.source.1))
        .chain(prepared.targets.iter().map(|(_, s, p)| (s, p)));
    for (spec, pools) in langs {
        for (name, data) in [
            ("discovery", pools.discovery()),
            ("heldout_tuning", pools.heldout_tuning()),
            ("validation", pools.validation()),
            ("test", pools.test(Phase::Evaluation)?),
        ] {
            let path = dir.join(format!("{}.{name}.tsv", spec.id));
            write_dataset(&path, data)?;
            out.push(path);
        }
    }
    Ok(out)
}

fn hash_parts(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

fn train_key(cfg: &TrainConfig) -> String {
    toml::to_string(cfg).expect("train config is serialisable")
}

/// Competence-tuned checkpoint for one seed, cached under `dir`.
pub fn theta1(cfg: &ExperimentConfig, prepared: &Prepared, seed: u64, dir: &Path) -> Result<Parameters<f32>> {
    let base = Parameters::init(prepared.model.clone(), seed)?;
    let data = &prepared.source.1.discovery()[..cfg.n_src];
    let tc = TrainConfig {
        seed,
        ..cfg.competence.clone()
    };
    let key = hash_parts(&[&base.hash(), &set_hash(data), &train_key(&tc)]);
    let ckpt = dir.join("theta1.manifest");
    let key_path = dir.join("theta1.key");
    if fs::read_to_string(&key_path).ok().as_deref() == Some(key.as_str()) {
        if let Ok(p) = load_checkpoint(&ckpt) {
            return Ok(p);
        }
    }
    let (params, record) = competence_tune(&base, &prepared.source.1.discovery()[..cfg.n_src], cfg.n_src, &tc)?;
    save_checkpoint(&params, &ckpt)?;
    record.save(&dir.join("competence.run"))?;
    fs::write(&key_path, &key).map_err(|e| Error::io(&key_path, e))?;
    Ok(params)
}

/// The pool that feeds baseline means and discovery inputs.
pub fn analysis_pool<'a>(cfg: &ExperimentConfig, source: &'a Pools, mode: PoolMode) -> &'a [Example] {
    match mode {
        PoolMode::Shared => &source.discovery()[..cfg.n_src],
        PoolMode::Heldout => &source.discovery()[cfg.n_src..],
    }
}

/// Baseline means (cached) and discovery inputs from `pool`.
pub fn means_and_inputs(
    cfg: &ExperimentConfig,
    params: &Parameters<f32>,
    pool: &[Example],
    seed: u64,
    cache_dir: &Path,
) -> Result<(BaselineMeans, Vec<Example>)> {
    let n_classes = cfg.task.n_classes;
    let mean_set = sample_balanced_mean_set(pool, n_classes, cfg.mean_set_size, seed)?;
    let ckpt_hash = params.hash();
    let path = means_cache_path(cache_dir, &ckpt_hash, &set_hash(&mean_set));
    let means = match load_means(&path) {
        Ok((m, h)) if h == ckpt_hash => m,
        _ => {
            let m = compute_baseline_means(params, &mean_set, n_classes)?;
            save_means(&path, &m, &ckpt_hash)?;
            m
        }
    };
    let inputs = select_discovery_inputs(params, pool, cfg.n_discovery_inputs)?.examples;
    Ok((means, inputs))
}

fn circuit_cached(
    params: &Parameters<f32>,
    means: &BaselineMeans,
    inputs: &[Example],
    dc: &DiscoveryConfig,
    path: &Path,
) -> Result<Circuit> {
    if let Ok(c) = Circuit::load(path) {
        if c.config == *dc
            && c.provenance.checkpoint_hash == params.hash()
            && c.provenance.inputs_hash == set_hash(inputs)
            && c.provenance.means_hash == means.set_hash
        {
            return Ok(c);
        }
    }
    let c = discover(params, means, inputs, dc)?;
    c.save(path)?;
    Ok(c)
}

/// Everything computed once per seed.
struct SeedState {
    theta1: Parameters<f32>,
    /// Full-depth circuit per `(rule, p)` index.
    circuits: BTreeMap<(ScoringRule, usize), Circuit>,
}

type SeedOutput = (SeedState, Vec<ResultRow>);

/// A tuning run and the coordinates of the rows it feeds.
#[derive(Debug, Clone)]
struct Cell {
    seed: u64,
    target: usize,
    scope: Scope,
    rule: Option<ScoringRule>,
    p: Option<f64>,
    depth: Option<usize>,
    n: usize,
    /// `None` for full fine-tuning.
    heads: Option<BTreeSet<HeadId>>,
    /// Start from the base model instead of the competence checkpoint.
    direct: bool,
}

/// Outcome of a sweep.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub rows: Vec<ResultRow>,
    pub failed_cells: usize,
    pub csv: PathBuf,
}

fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.tsv")
}

fn read_metrics(path: &Path) -> Option<Vec<(String, f64)>> {
    let text = fs::read_to_string(path).ok()?;
    text.lines()
        .map(|l| {
            let (k, v) = l.split_once('\t')?;
            Some((k.to_string(), v.parse().ok()?))
        })
        .collect()
}

fn write_metrics(path: &Path, metrics: &[(String, f64)]) -> Result<()> {
    let text: String = metrics.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    prepared: &'a Prepared,
    out: &'a Path,
}

impl Runner<'_> {
    fn row(&self, phase: &str, seed: u64, metric: &str, value: f64) -> ResultRow {
        ResultRow {
            experiment_id: self.cfg.id.clone(),
            phase: phase.into(),
            source_lang: self.cfg.source.id.clone(),
            target_lang: None,
            scope: None,
            rule: None,
            p: None,
            depth: None,
            n: None,
            seed,
            metric: metric.into(),
            value,
        }
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed-{seed}"))
    }

    fn seed_stage(&self, seed: u64) -> Result<SeedOutput> {
        let dir = self.seed_dir(seed);
        let t1 = theta1(self.cfg, self.prepared, seed, &dir)?;
        let mut rows = Vec::new();
        let src = evaluate(&t1, self.prepared.source.1.test(Phase::Evaluation)?)?;
        rows.push(self.row("competence", seed, "source_accuracy", src.accuracy));
        rows.push(self.row("competence", seed, "source_mean_margin", src.mean_margin));
        for (lc, _, pools) in &self.prepared.targets {
            let r = evaluate(&t1, pools.test(Phase::Evaluation)?)?;
            let mut row = self.row("competence", seed, "target_accuracy", r.accuracy);
            row.target_lang = Some(lc.id.clone());
            rows.push(row);
        }
        let pool = analysis_pool(self.cfg, &self.prepared.source.1, self.cfg.discovery_pool);
        let (means, inputs) = means_and_inputs(self.cfg, &t1, pool, seed, &dir)?;
        let max_depth = self.cfg.max_depths.iter().copied().max().unwrap_or(0);
        let mut circuits = BTreeMap::new();
        for &rule in &self.cfg.rules {
            for (pi, &p) in self.cfg.ps.iter().enumerate() {
                let dc = DiscoveryConfig::new(rule, p, max_depth);
                let path = dir.join(format!("circuit-{rule}-p{p}.circuit"));
                let c = circuit_cached(&t1, &means, &inputs, &dc, &path)?;
                let mut relevance = c.relevance_table();
                relevance.raw.clear();
                for &depth in &self.cfg.max_depths {
                    let cd = c.truncated(depth);
                    let tagged = |mut r: ResultRow| {
                        r.rule = Some(rule.to_string());
                        r.p = Some(p);
                        r.depth = Some(depth);
                        r
                    };
                    rows.push(tagged(self.row("circuit", seed, "circuit_size", cd.len() as f64)));
                    let topo = topology(&cd, self.prepared.model.n_layers);
                    for (l, count) in topo.union().iter().enumerate() {
                        rows.push(tagged(self.row("topology", seed, &format!("layer_{l}"), *count as f64)));
                    }
                    if self.cfg.faithfulness {
                        let f = faithfulness_report(&t1, &means, &cd.heads(), self.prepared.source.1.validation())?;
                        write_outcomes(&dir.join(format!("outcomes-{rule}-p{p}-d{depth}.csv")), &f.outcomes)?;
                        rows.push(tagged(self.row("faithfulness", seed, "accuracy_faithfulness", f.accuracy)));
                        rows.push(tagged(self.row("faithfulness", seed, "margin_faithfulness", f.margin.value)));
                        rows.push(tagged(self.row("faithfulness", seed, "margin_skipped", f.margin.skipped as f64)));
                        if let Some(g) = f.gold_accuracy_ratio {
                            rows.push(tagged(self.row("faithfulness", seed, "gold_accuracy_ratio", g)));
                        }
                    }
                }
                circuits.insert((rule, pi), c);
            }
        }
        Ok((SeedState { theta1: t1, circuits }, rows))
    }

    fn cells_for_seed(&self, seed: u64, state: &SeedState) -> Result<Vec<Cell>> {
        let mut cells = Vec::new();
        for target in 0..self.prepared.targets.len() {
            for &rule in &self.cfg.rules {
                for (pi, &p) in self.cfg.ps.iter().enumerate() {
                    let full = &state.circuits[&(rule, pi)];
                    for &depth in &self.cfg.max_depths {
                        let circuit = full.truncated(depth);
                        for &scope in &self.cfg.scopes {
                            let heads = match scope {
                                Scope::Full => None,
                                Scope::Circuit => Some(circuit.heads()),
                                other => {
                                    let kind = other.control().expect("control scope");
                                    let table: RelevanceTable = circuit.relevance_table();
                                    Some(control_selection(kind, &table, circuit.len(), seed)?)
                                }
                            };
                            for &n in &self.cfg.tuning_sizes {
                                cells.push(Cell {
                                    seed,
                                    target,
                                    scope,
                                    rule: Some(rule),
                                    p: Some(p),
                                    depth: Some(depth),
                                    n,
                                    heads: heads.clone(),
                                    direct: false,
                                });
                            }
                        }
                    }
                }
            }
            if self.cfg.direct_ft {
                for &n in &self.cfg.tuning_sizes {
                    cells.push(Cell {
                        seed,
                        target,
                        scope: Scope::Full,
                        rule: None,
                        p: None,
                        depth: None,
                        n,
                        heads: None,
                        direct: true,
                    });
                }
            }
        }
        Ok(cells)
    }

    fn start_params(&self, cell: &Cell, state: &SeedState) -> Result<Parameters<f32>> {
        if cell.direct {
            Parameters::init(self.prepared.model.clone(), cell.seed)
        } else {
            Ok(state.theta1.clone())
        }
    }

    fn cell_key(&self, cell: &Cell, start: &Parameters<f32>) -> String {
        let (lc, _, pools) = &self.prepared.targets[cell.target];
        let heads = match &cell.heads {
            None => "full".to_string(),
            Some(h) => h.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(""),
        };
        let tc = TrainConfig {
            seed: cell.seed,
            ..self.cfg.tuning.clone()
        };
        hash_parts(&[
            &start.hash(),
            &lc.id,
            &set_hash(&pools.heldout_tuning()[..cell.n]),
            &heads,
            &train_key(&tc),
        ])
    }

    fn run_cell(&self, cell: &Cell, state: &SeedState, key: &str) -> Result<Vec<(String, f64)>> {
        let dir = self.out.join("cells").join(&key[..24]);
        if let Some(m) = read_metrics(&metrics_path(&dir)) {
            return Ok(m);
        }
        let start = self.start_params(cell, state)?;
        let (_, _, pools) = &self.prepared.targets[cell.target];
        let tc = TrainConfig {
            seed: cell.seed,
            ..self.cfg.tuning.clone()
        };
        let mask = match &cell.heads {
            None => HeadMask::full(&start),
            Some(h) => HeadMask::surgical(&start, cell.scope, h, tc.include_final_norm)?,
        };
        let provenance = match (cell.scope, cell.rule) {
            (Scope::Full, _) | (_, None) => None,
            (_, Some(rule)) => {
                let pi = self.cfg.ps.iter().position(|&x| Some(x) == cell.p).unwrap_or(0);
                Some(state.circuits[&(rule, pi)].provenance.clone())
            }
        };
        let (after, record) = ct_sft(&start, &mask, &pools.heldout_tuning()[..cell.n], provenance, &tc)?;
        let tgt = evaluate(&after, pools.test(Phase::Evaluation)?)?;
        let src = evaluate(&after, self.prepared.source.1.test(Phase::Evaluation)?)?;
        let metrics = vec![
            ("target_accuracy".to_string(), tgt.accuracy),
            ("target_mean_margin".to_string(), tgt.mean_margin),
            ("source_accuracy".to_string(), src.accuracy),
            ("trainable_fraction".to_string(), record.trainable_fraction()),
            ("n_heads".to_string(), cell.heads.as_ref().map_or(self.prepared.model.total_heads(), |h| h.len()) as f64),
            ("steps".to_string(), record.steps as f64),
        ];
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_checkpoint(&after, &dir.join("checkpoint.manifest"))?;
        record.save(&dir.join("record.run"))?;
        write_metrics(&metrics_path(&dir), &metrics)?;
        Ok(metrics)
    }

    fn cell_rows(&self, cell: &Cell, metrics: &[(String, f64)]) -> Vec<ResultRow> {
        let phase = if cell.direct { "direct_ft" } else { "transfer" };
        metrics
            .iter()
            .map(|(m, v)| {
                let mut r = self.row(phase, cell.seed, m, *v);
                r.target_lang = Some(self.prepared.targets[cell.target].0.id.clone());
                r.scope = Some(cell.scope.to_string());
                r.rule = cell.rule.map(|x| x.to_string());
                r.p = cell.p;
                r.depth = cell.depth;
                r.n = Some(cell.n);
                r
            })
            .collect()
    }
}

/// Runs the full grid and writes `results.csv` under `out`.
///
/// Failures are isolated per cell (or per seed when the seed's shared stages
/// fail) and reported as `failed` rows.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let prepared = prepare(cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let runner = Runner {
        cfg,
        prepared: &prepared,
        out,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| {
        let stages: Vec<(u64, Result<SeedOutput>)> =
            cfg.seeds.par_iter().map(|&s| (s, runner.seed_stage(s))).collect();
        let mut rows = Vec::new();
        let mut failed = 0;
        let mut states = BTreeMap::new();
        let mut cells = Vec::new();
        for (seed, stage) in stages {
            match stage.and_then(|(state, r)| runner.cells_for_seed(seed, &state).map(|c| (state, r, c))) {
                Ok((state, r, c)) => {
                    rows.extend(r);
                    cells.extend(c);
                    states.insert(seed, state);
                }
                Err(e) => {
                    log::error!("seed {seed} failed: {e}");
                    failed += 1;
                    rows.push(runner.row("competence", seed, "failed", 1.0));
                }
            }
        }
        // identical runs (e.g. full scope at every depth) are trained once
        let keyed: Vec<(Cell, Result<String>)> = cells
            .into_iter()
            .map(|c| {
                let key = runner.start_params(&c, &states[&c.seed]).map(|p| runner.cell_key(&c, &p));
                (c, key)
            })
            .collect();
        let mut unique: BTreeMap<String, &Cell> = BTreeMap::new();
        for (c, k) in &keyed {
            if let Ok(k) = k {
                unique.entry(k.clone()).or_insert(c);
            }
        }
        let jobs: Vec<(&String, &&Cell)> = unique.iter().collect();
        let results: BTreeMap<String, std::result::Result<Vec<(String, f64)>, String>> = jobs
            .par_iter()
            .map(|(k, c)| {
                let r = runner.run_cell(c, &states[&c.seed], k).map_err(|e| e.to_string());
                ((*k).clone(), r)
            })
            .collect();
        for (c, k) in &keyed {
            let outcome = match k {
                Ok(k) => results[k].clone(),
                Err(e) => Err(e.to_string()),
            };
            match outcome {
                Ok(m) => rows.extend(runner.cell_rows(c, &m)),
                Err(e) => {
                    log::error!("cell {:?} failed: {e}", (c.seed, c.scope, c.rule, c.depth, c.n));
                    failed += 1;
                    rows.extend(runner.cell_rows(c, &[("failed".to_string(), 1.0)]));
                }
            }
        }
        let csv = out.join("results.csv");
        write_rows(&csv, &rows)?;
        Ok(RunSummary {
            rows,
            failed_cells: failed,
            csv,
        })
    })
}

/// Source-retention change of one tuning configuration, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetentionRow {
    pub target_lang: String,
    pub scope: String,
    pub rule: Option<String>,
    pub p: Option<f64>,
    pub depth: Option<usize>,
    pub n: usize,
    pub seeds: usize,
    pub mean_source_accuracy: f64,
    /// `acc_source(after) - acc_source(theta1)`, seed mean.
    pub mean_delta: f64,
}

/// Forgetting table from result rows.
pub fn forgetting_report(rows: &[ResultRow]) -> Result<Vec<RetentionRow>> {
    let base: BTreeMap<u64, f64> = rows
        .iter()
        .filter(|r| r.phase == "competence" && r.metric == "source_accuracy" && r.target_lang.is_none())
        .map(|r| (r.seed, r.value))
        .collect();
    type Key = (String, String, Option<String>, Option<u64>, Option<usize>, usize);
    // (p, [(source accuracy, delta)])
    type Group = (Option<f64>, Vec<(f64, f64)>);
    let mut groups: BTreeMap<Key, Group> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.phase == "transfer" && r.metric == "source_accuracy") {
        let theta1 = base.get(&r.seed).ok_or_else(|| {
            Error::Report(format!("no competence source accuracy for seed {}", r.seed))
        })?;
        let key = (
            r.target_lang.clone().unwrap_or_default(),
            r.scope.clone().unwrap_or_default(),
            r.rule.clone(),
            r.p.map(f64::to_bits),
            r.depth,
            r.n.unwrap_or(0),
        );
        let g = groups.entry(key).or_insert((r.p, Vec::new()));
        g.1.push((r.value, r.value - theta1));
    }
    Ok(groups
        .into_iter()
        .map(|((target_lang, scope, rule, _, depth, n), (p, v))| {
            let k = v.len() as f64;
            RetentionRow {
                target_lang,
                scope,
                rule,
                p,
                depth,
                n,
                seeds: v.len(),
                mean_source_accuracy: v.iter().map(|x| x.0).sum::<f64>() / k,
                mean_delta: v.iter().map(|x| x.1).sum::<f64>() / k,
            }
        })
        .collect())
}

/// Seed mean of a metric over the rows matching `filter`.
pub fn seed_mean<F: Fn(&ResultRow) -> bool>(rows: &[ResultRow], metric: &str, filter: F) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.metric == metric && filter(r)).map(|r| r.value).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Top-ranked depth-0 head of one seed under one pool mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityRow {
    pub seed: u64,
    pub mode: PoolMode,
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRange {
    pub mode: PoolMode,
    pub min_layer: usize,
    pub max_layer: usize,
    pub mean_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub rows: Vec<StabilityRow>,
    pub summary: Vec<LayerRange>,
}

/// Directional depth-0 relevance of every head on `pool`.
pub fn iteration0_table(
    cfg: &ExperimentConfig,
    params: &Parameters<f32>,
    pool: &[Example],
    seed: u64,
    cache_dir: &Path,
) -> Result<RelevanceTable> {
    let (means, inputs) = means_and_inputs(cfg, params, pool, seed, cache_dir)?;
    let scorer = CdtScorer {
        params,
        means: &means,
        inputs: &inputs,
        rule: ScoringRule::Directional,
    };
    scorer.score(&params.config.heads(), &[])
}

/// Top-1 depth-0 head per seed when means and discovery inputs come from the
/// competence examples (shared) versus the rest of the discovery pool.
pub fn iteration0_stability(cfg: &ExperimentConfig, out: &Path) -> Result<StabilityReport> {
    if cfg.seeds.len() < 2 {
        return Err(Error::Config("the stability experiment needs at least two seeds".into()));
    }
    if cfg.n_src >= cfg.pools.discovery {
        return Err(Error::Config("heldout discovery needs n_src below the discovery pool size".into()));
    }
    let prepared = prepare(cfg)?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let dir = out.join(format!("seed-{seed}"));
        let t1 = theta1(cfg, &prepared, seed, &dir)?;
        for mode in [PoolMode::Shared, PoolMode::Heldout] {
            let pool = analysis_pool(cfg, &prepared.source.1, mode);
            let table = iteration0_table(cfg, &t1, pool, seed, &dir)?;
            let (h, score) = table.ranked()[0];
            rows.push(StabilityRow {
                seed,
                mode,
                layer: h.layer,
                head: h.head,
                score,
            });
        }
    }
    let summary = [PoolMode::Shared, PoolMode::Heldout]
        .into_iter()
        .map(|mode| {
            let sel: Vec<&StabilityRow> = rows.iter().filter(|r| r.mode == mode).collect();
            LayerRange {
                mode,
                min_layer: sel.iter().map(|r| r.layer).min().unwrap_or(0),
                max_layer: sel.iter().map(|r| r.layer).max().unwrap_or(0),
                mean_score: sel.iter().map(|r| r.score).sum::<f64>() / sel.len().max(1) as f64,
            }
        })
        .collect();
    let result_rows: Vec<ResultRow> = rows
        .iter()
        .flat_map(|r| {
            let make = |metric: &str, value: f64| ResultRow {
                experiment_id: cfg.id.clone(),
                phase: format!("iteration0_{}", r.mode.as_str()),
                source_lang: cfg.source.id.clone(),
                target_lang: None,
                scope: None,
                rule: Some(ScoringRule::Directional.to_string()),
                p: None,
                depth: Some(0),
                n: None,
                seed: r.seed,
                metric: metric.into(),
                value,
            };
            [
                make("top1_layer", r.layer as f64),
                make("top1_head", r.head as f64),
                make("top1_score", r.score),
            ]
        })
        .collect();
    write_rows(&out.join("iteration0.csv"), &result_rows)?;
    Ok(StabilityReport { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_round_trips_through_toml() {
        let cfg = ExperimentConfig::hard_transfer();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_rejects_bad_grids() {
        let mut cfg = ExperimentConfig::hard_transfer();
        cfg.seeds = vec![1, 1];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::hard_transfer();
        cfg.tuning_sizes = vec![101];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::hard_transfer();
        cfg.discovery_pool = PoolMode::Heldout;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_seeds() {
        assert_eq!(DEFAULT_SEEDS, [31, 777, 2025, 12345]);
        let text = ExperimentConfig::hard_transfer().to_toml().replace("seeds = [", "unused_seeds = [");
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg.seeds, DEFAULT_SEEDS.to_vec());
    }

    fn row(phase: &str, seed: u64, scope: Option<&str>, metric: &str, value: f64) -> ResultRow {
        ResultRow {
            experiment_id: "x".into(),
            phase: phase.into(),
            source_lang: "src".into(),
            target_lang: scope.map(|_| "t".to_string()),
            scope: scope.map(str::to_string),
            rule: None,
            p: None,
            depth: None,
            n: scope.map(|_| 25),
            seed,
            metric: metric.into(),
            value,
        }
    }

    #[test]
    fn forgetting_deltas() {
        let rows = vec![
            row("competence", 1, None, "source_accuracy", 0.9),
            row("competence", 2, None, "source_accuracy", 0.8),
            row("transfer", 1, Some("full"), "source_accuracy", 0.5),
            row("transfer", 2, Some("full"), "source_accuracy", 0.6),
            row("transfer", 1, Some("circuit"), "source_accuracy", 0.9),
        ];
        let rep = forgetting_report(&rows).unwrap();
        assert_eq!(rep.len(), 2);
        let full = rep.iter().find(|r| r.scope == "full").unwrap();
        assert!((full.mean_delta - (-0.3)).abs() < 1e-12);
        let circ = rep.iter().find(|r| r.scope == "circuit").unwrap();
        assert_eq!(circ.mean_delta, 0.0);
        assert!(matches!(forgetting_report(&rows[2..]), Err(Error::Report(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut rows = vec![row("transfer", 7, Some("circuit"), "target_accuracy", 0.1 + 0.2)];
        rows[0].p = Some(0.125);
        rows[0].depth = Some(2);
        rows.push(row("competence", 7, None, "source_accuracy", 1.0 / 3.0));
        write_rows(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("experiment_id,phase,source_lang,target_lang,scope,rule,p,depth,n,seed,metric,value\n"));
        assert_eq!(read_rows(&path).unwrap(), rows);
    }
}
