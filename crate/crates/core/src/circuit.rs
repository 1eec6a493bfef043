//! Backward frontier expansion of attention-head circuits.
//!
//! Depth 0 scores every head against the label readout and keeps the top
//! `K`. Each later depth takes the previous selection as its frontier, scores
//! every not-yet-selected head in a layer strictly below the deepest frontier
//! head against the frontier heads downstream of it, and again keeps the top
//! `K`. Expansion stops at `max_depth` or when no candidate remains.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cdt::{decompose_traced, BaselineMeans, Target};
use crate::corpus::{set_hash, Example};
use crate::error::{Error, Result};
use crate::model::{forward, HeadId, Manifest, ModelConfig, Parameters};
use crate::scoring::{aggregate, score_contribution, task_directions, RawScore, RelevanceTable, ScoringRule};

const CIRCUIT_FORMAT: &str = "ctsft-circuit-v1";

/// Expansion beyond this many iterations is refused.
pub const MAX_DEPTH_CAP: usize = 3;
pub const DEFAULT_MAX_DEPTH: usize = 2;

/// Heads kept per iteration for a selection ratio `p`.
///
/// Rounds down (never below one head): 2% of a 24x14 model is 6 heads.
pub fn heads_for_ratio(p: f64, total_heads: usize) -> usize {
    ((p * total_heads as f64 + 1e-9).floor() as usize).clamp(1, total_heads.max(1))
}

/// Produces a relevance table for a set of candidate heads.
///
/// An empty frontier means the targets are the label logits.
pub trait HeadScorer {
    fn score(&self, candidates: &[HeadId], frontier: &[HeadId]) -> Result<RelevanceTable>;
}

/// Frontier heads downstream of `s`; the logits when the frontier is empty.
pub fn targets_for(source: HeadId, frontier: &[HeadId]) -> Vec<Target> {
    if frontier.is_empty() {
        vec![Target::Logits]
    } else {
        frontier
            .iter()
            .filter(|t| t.layer > source.layer)
            .map(|&t| Target::Head(t))
            .collect()
    }
}

/// Scores heads by contextual decomposition over a set of discovery inputs.
pub struct CdtScorer<'a> {
    pub params: &'a Parameters<f32>,
    pub means: &'a BaselineMeans,
    pub inputs: &'a [Example],
    pub rule: ScoringRule,
}

impl HeadScorer for CdtScorer<'_> {
    fn score(&self, candidates: &[HeadId], frontier: &[HeadId]) -> Result<RelevanceTable> {
        if self.inputs.is_empty() {
            return Err(Error::Input("no discovery inputs".into()));
        }
        let directions = match self.rule {
            ScoringRule::Directional if !frontier.is_empty() => task_directions(self.params)?,
            _ => Vec::new(),
        };
        let expected: BTreeMap<HeadId, Vec<Target>> =
            candidates.iter().map(|&s| (s, targets_for(s, frontier))).collect();
        let per_input: Vec<Result<Vec<RawScore>>> = self
            .inputs
            .par_iter()
            .map(|x| {
                let (_, trace) = forward(self.params, &x.tokens)?;
                let mut out = Vec::new();
                for (&s, targets) in &expected {
                    for c in decompose_traced(self.params, self.means, &trace, x.id, s, targets)? {
                        out.push(score_contribution(self.rule, &c, x.label, &directions)?);
                    }
                }
                Ok(out)
            })
            .collect();
        let mut raw = Vec::new();
        for r in per_input {
            raw.extend(r?);
        }
        let ids: Vec<u64> = self.inputs.iter().map(|x| x.id).collect();
        aggregate(raw, &expected, &ids)
    }
}

/// Fixed score tables, one per depth (the last one repeats).
#[derive(Debug, Clone)]
pub struct FixedScorer {
    pub tables: Vec<BTreeMap<HeadId, f64>>,
}

impl HeadScorer for FixedScorer {
    fn score(&self, candidates: &[HeadId], frontier: &[HeadId]) -> Result<RelevanceTable> {
        let depth = if frontier.is_empty() { 0 } else { 1 };
        let table = self
            .tables
            .get(depth)
            .or_else(|| self.tables.last())
            .ok_or_else(|| Error::Config("fixed scorer has no tables".into()))?;
        let mut scores = BTreeMap::new();
        for h in candidates {
            let v = table
                .get(h)
                .ok_or_else(|| Error::Scoring(format!("no fixed score for head {h}")))?;
            scores.insert(*h, *v);
        }
        Ok(RelevanceTable::from_scores(scores))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    pub rule: ScoringRule,
    /// Selection ratio per iteration.
    pub p: f64,
    pub max_depth: usize,
    /// Explicit per-depth head counts; overrides `p` where present.
    #[serde(default)]
    pub k_per_depth: Vec<usize>,
}

impl DiscoveryConfig {
    pub fn new(rule: ScoringRule, p: f64, max_depth: usize) -> Self {
        DiscoveryConfig {
            rule,
            p,
            max_depth,
            k_per_depth: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Config(format!("selection ratio {} outside (0, 1]", self.p)));
        }
        if self.max_depth > MAX_DEPTH_CAP {
            return Err(Error::Config(format!(
                "max_depth {} exceeds the cap of {MAX_DEPTH_CAP}",
                self.max_depth
            )));
        }
        if self.k_per_depth.contains(&0) {
            return Err(Error::Config("per-depth head counts must be positive".into()));
        }
        Ok(())
    }

    pub fn k_at(&self, depth: usize, total_heads: usize) -> usize {
        self.k_per_depth
            .get(depth)
            .copied()
            .unwrap_or_else(|| heads_for_ratio(self.p, total_heads))
    }
}

/// Hashes tying a circuit to the data it was discovered from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Provenance {
    pub checkpoint_hash: String,
    pub inputs_hash: String,
    pub means_hash: String,
}

impl Provenance {
    pub fn of(params: &Parameters<f32>, inputs: &[Example], means: &BaselineMeans) -> Self {
        Provenance {
            checkpoint_hash: params.hash(),
            inputs_hash: set_hash(inputs),
            means_hash: means.set_hash.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthSelection {
    pub depth: usize,
    /// Heads selected at this depth with their aggregate scores, best first.
    pub heads: Vec<(HeadId, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    pub config: DiscoveryConfig,
    pub depths: Vec<DepthSelection>,
    /// Why expansion ended before `max_depth`, if it did.
    pub stop_reason: Option<String>,
    /// Depth-0 aggregate scores of every head (used for control selections).
    pub relevance: BTreeMap<HeadId, f64>,
    pub provenance: Provenance,
}

impl Circuit {
    /// Union of all depths.
    pub fn heads(&self) -> BTreeSet<HeadId> {
        self.depths.iter().flat_map(|d| d.heads.iter().map(|(h, _)| *h)).collect()
    }

    pub fn len(&self) -> usize {
        self.depths.iter().map(|d| d.heads.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reached depth (number of selection rounds minus one).
    pub fn depth(&self) -> usize {
        self.depths.len().saturating_sub(1)
    }

    /// The circuit a run with a smaller `max_depth` would have produced.
    pub fn truncated(&self, max_depth: usize) -> Circuit {
        let mut c = self.clone();
        c.config.max_depth = max_depth.min(self.config.max_depth);
        if c.depths.len() > max_depth + 1 {
            c.depths.truncate(max_depth + 1);
            c.stop_reason = None;
        }
        c
    }

    pub fn relevance_table(&self) -> RelevanceTable {
        RelevanceTable::from_scores(self.relevance.clone())
    }

    pub fn to_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.push("format", CIRCUIT_FORMAT)
            .push("rule", self.config.rule)
            .push("p", self.config.p)
            .push("max_depth", self.config.max_depth);
        if !self.config.k_per_depth.is_empty() {
            let ks: Vec<String> = self.config.k_per_depth.iter().map(|k| k.to_string()).collect();
            m.push("k_per_depth", ks.join(","));
        }
        m.push("checkpoint_hash", &self.provenance.checkpoint_hash)
            .push("inputs_hash", &self.provenance.inputs_hash)
            .push("means_hash", &self.provenance.means_hash);
        if let Some(r) = &self.stop_reason {
            m.push("stop_reason", r);
        }
        m.push("depths", self.depths.len());
        for d in &self.depths {
            for (h, s) in &d.heads {
                m.push("select", format!("{} {} {} {}", d.depth, h.layer, h.head, s));
            }
        }
        for (h, s) in &self.relevance {
            m.push("relevance", format!("{} {} {}", h.layer, h.head, s));
        }
        m
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_manifest().write(path)
    }

    pub fn load(path: &Path) -> Result<Circuit> {
        let m = Manifest::read(path)?;
        if m.get("format") != Some(CIRCUIT_FORMAT) {
            return Err(Error::format(path, "not a circuit manifest"));
        }
        let bad = |what: &str| Error::format(path, format!("bad {what} line"));
        let k_per_depth = match m.get("k_per_depth") {
            Some(s) => s
                .split(',')
                .map(|k| k.parse().map_err(|_| bad("k_per_depth")))
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        let config = DiscoveryConfig {
            rule: m.require("rule", path)?.parse()?,
            p: m.parse_value("p", path)?,
            max_depth: m.parse_value("max_depth", path)?,
            k_per_depth,
        };
        let n_depths: usize = m.parse_value("depths", path)?;
        let mut depths: Vec<DepthSelection> = (0..n_depths)
            .map(|depth| DepthSelection {
                depth,
                heads: Vec::new(),
            })
            .collect();
        for line in m.get_all("select") {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad("select"));
            }
            let depth: usize = f[0].parse().map_err(|_| bad("select"))?;
            let head = HeadId::new(f[1].parse().map_err(|_| bad("select"))?, f[2].parse().map_err(|_| bad("select"))?);
            let score: f64 = f[3].parse().map_err(|_| bad("select"))?;
            depths.get_mut(depth).ok_or_else(|| bad("select"))?.heads.push((head, score));
        }
        let mut relevance = BTreeMap::new();
        for line in m.get_all("relevance") {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad("relevance"));
            }
            let head = HeadId::new(f[0].parse().map_err(|_| bad("relevance"))?, f[1].parse().map_err(|_| bad("relevance"))?);
            relevance.insert(head, f[2].parse().map_err(|_| bad("relevance"))?);
        }
        Ok(Circuit {
            config,
            depths,
            stop_reason: m.get("stop_reason").map(str::to_string),
            relevance,
            provenance: Provenance {
                checkpoint_hash: m.require("checkpoint_hash", path)?.to_string(),
                inputs_hash: m.require("inputs_hash", path)?.to_string(),
                means_hash: m.require("means_hash", path)?.to_string(),
            },
        })
    }
}

/// Runs the frontier expansion with any scorer.
pub fn discover_with<S: HeadScorer + ?Sized>(
    scorer: &S,
    model: &ModelConfig,
    config: &DiscoveryConfig,
    provenance: Provenance,
) -> Result<Circuit> {
    config.validate()?;
    let total = model.total_heads();
    let mut selected: BTreeSet<HeadId> = BTreeSet::new();
    let mut depths = Vec::new();
    let mut frontier: Vec<HeadId> = Vec::new();
    let mut stop_reason = None;
    let mut relevance = BTreeMap::new();
    for depth in 0..=config.max_depth {
        let candidates: Vec<HeadId> = if depth == 0 {
            model.heads()
        } else {
            let deepest = frontier.iter().map(|h| h.layer).max().unwrap_or(0);
            model
                .heads()
                .into_iter()
                .filter(|h| h.layer < deepest && !selected.contains(h))
                .collect()
        };
        if candidates.is_empty() {
            let reason = if frontier.iter().all(|h| h.layer == 0) {
                format!("frontier reached layer 0 before depth {depth}")
            } else {
                format!("no upstream candidates remain at depth {depth}")
            };
            log::info!("circuit expansion stopped: {reason}");
            stop_reason = Some(reason);
            break;
        }
        let table = scorer.score(&candidates, &frontier)?;
        if depth == 0 {
            relevance = table.scores.clone();
        }
        let k = config.k_at(depth, total);
        let heads = table.top(k);
        selected.extend(heads.iter().map(|(h, _)| *h));
        frontier = heads.iter().map(|(h, _)| *h).collect();
        depths.push(DepthSelection { depth, heads });
    }
    Ok(Circuit {
        config: config.clone(),
        depths,
        stop_reason,
        relevance,
        provenance,
    })
}

/// Discovers a circuit by contextual decomposition on `inputs`.
pub fn discover(
    params: &Parameters<f32>,
    means: &BaselineMeans,
    inputs: &[Example],
    config: &DiscoveryConfig,
) -> Result<Circuit> {
    if inputs.is_empty() {
        return Err(Error::Input("discovery needs at least one input".into()));
    }
    let scorer = CdtScorer {
        params,
        means,
        inputs,
        rule: config.rule,
    };
    discover_with(&scorer, &params.config, config, Provenance::of(params, inputs, means))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Random,
    LeastRelevant,
    NearZero,
}

/// Comparison head sets of size `k` drawn from a relevance table.
pub fn control_selection(kind: ControlKind, table: &RelevanceTable, k: usize, seed: u64) -> Result<BTreeSet<HeadId>> {
    if k > table.len() {
        return Err(Error::Input(format!("cannot pick {k} heads from {} scored heads", table.len())));
    }
    let mut heads: Vec<(HeadId, f64)> = table.scores.iter().map(|(h, s)| (*h, *s)).collect();
    match kind {
        ControlKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            heads.shuffle(&mut rng);
        }
        ControlKind::LeastRelevant => heads.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))),
        ControlKind::NearZero => heads.sort_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(a.0.cmp(&b.0))),
    }
    Ok(heads.into_iter().take(k).map(|(h, _)| h).collect())
}

/// Per-layer counts of selected heads.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyHistogram {
    /// `per_depth[d][l]` = heads newly selected at depth `d` in layer `l`.
    pub per_depth: Vec<Vec<usize>>,
    /// `cumulative[d][l]` = heads in layer `l` selected at depths `0..=d`.
    pub cumulative: Vec<Vec<usize>>,
}

impl TopologyHistogram {
    pub fn union(&self) -> &[usize] {
        self.cumulative.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn topology(circuit: &Circuit, n_layers: usize) -> TopologyHistogram {
    let mut per_depth = Vec::new();
    let mut cumulative = Vec::new();
    let mut running = vec![0usize; n_layers];
    for d in &circuit.depths {
        let mut row = vec![0usize; n_layers];
        for (h, _) in &d.heads {
            if h.layer < n_layers {
                row[h.layer] += 1;
                running[h.layer] += 1;
            }
        }
        per_depth.push(row);
        cumulative.push(running.clone());
    }
    TopologyHistogram { per_depth, cumulative }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;

    fn fixed(scores: &[((usize, usize), f64)]) -> FixedScorer {
        FixedScorer {
            tables: vec![scores.iter().map(|&((l, h), s)| (HeadId::new(l, h), s)).collect()],
        }
    }

    #[test]
    fn ratio_to_head_count() {
        assert_eq!(heads_for_ratio(0.02, 24 * 14), 6);
        assert_eq!(heads_for_ratio(0.01, 4), 1);
        assert_eq!(heads_for_ratio(0.5, 4), 2);
        assert_eq!(heads_for_ratio(1.0, 4), 4);
    }

    #[test]
    fn depth_zero_only() {
        let s = fixed(&[((0, 0), 4.0), ((0, 1), 1.0), ((1, 0), 5.0), ((1, 1), 3.0)]);
        let c = discover_with(&s, &tiny_config(), &DiscoveryConfig::new(ScoringRule::Directional, 0.5, 0), Provenance::default()).unwrap();
        assert_eq!(c.depths.len(), 1);
        assert_eq!(c.heads(), BTreeSet::from([HeadId::new(1, 0), HeadId::new(0, 0)]));
        assert!(c.stop_reason.is_none());
    }

    #[test]
    fn expansion_dedups_and_stops_at_layer_zero() {
        let s = fixed(&[((0, 0), 4.0), ((0, 1), 1.0), ((1, 0), 5.0), ((1, 1), 3.0)]);
        let c = discover_with(&s, &tiny_config(), &DiscoveryConfig::new(ScoringRule::Directional, 0.5, 2), Provenance::default()).unwrap();
        assert_eq!(c.depths[1].heads, vec![(HeadId::new(0, 1), 1.0)]);
        assert_eq!(c.len(), 3);
        assert!(c.stop_reason.as_deref().unwrap().contains("layer 0"));
    }

    #[test]
    fn control_examples() {
        let t = RelevanceTable::from_scores(BTreeMap::from([
            (HeadId::new(0, 0), 5.0),
            (HeadId::new(0, 1), 0.1),
            (HeadId::new(1, 0), -0.2),
            (HeadId::new(1, 1), -4.0),
        ]));
        let near = control_selection(ControlKind::NearZero, &t, 2, 0).unwrap();
        assert_eq!(near, BTreeSet::from([HeadId::new(0, 1), HeadId::new(1, 0)]));
        let least = control_selection(ControlKind::LeastRelevant, &t, 2, 0).unwrap();
        assert_eq!(least, BTreeSet::from([HeadId::new(1, 1), HeadId::new(1, 0)]));
        let a = control_selection(ControlKind::Random, &t, 2, 42).unwrap();
        assert_eq!(a, control_selection(ControlKind::Random, &t, 2, 42).unwrap());
        assert_eq!(a.len(), 2);
        assert!(matches!(control_selection(ControlKind::Random, &t, 5, 0), Err(Error::Input(_))));
    }

    #[test]
    fn topology_counts() {
        let c = Circuit {
            config: DiscoveryConfig::new(ScoringRule::Directional, 0.1, 1),
            depths: vec![
                DepthSelection {
                    depth: 0,
                    heads: vec![(HeadId::new(0, 1), 1.0), (HeadId::new(0, 3), 1.0), (HeadId::new(5, 0), 1.0)],
                },
                DepthSelection { depth: 1, heads: vec![] },
            ],
            stop_reason: None,
            relevance: BTreeMap::new(),
            provenance: Provenance::default(),
        };
        let t = topology(&c, 6);
        assert_eq!(t.per_depth[0], vec![2, 0, 0, 0, 0, 1]);
        assert_eq!(t.per_depth[1], vec![0; 6]);
        assert_eq!(t.union(), &[2, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn manifest_round_trip() {
        let s = fixed(&[((0, 0), 4.0), ((0, 1), 1.0 / 3.0), ((1, 0), f64::INFINITY), ((1, 1), -3.0)]);
        let prov = Provenance {
            checkpoint_hash: "abc".into(),
            inputs_hash: "def".into(),
            means_hash: "0123".into(),
        };
        let c = discover_with(&s, &tiny_config(), &DiscoveryConfig::new(ScoringRule::Magnitude, 0.5, 2), prov).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.circuit");
        c.save(&path).unwrap();
        assert_eq!(Circuit::load(&path).unwrap(), c);
    }

    #[test]
    fn config_limits() {
        assert!(DiscoveryConfig::new(ScoringRule::Directional, 0.0, 1).validate().is_err());
        assert!(DiscoveryConfig::new(ScoringRule::Directional, 0.1, 4).validate().is_err());
        assert!(DiscoveryConfig::new(ScoringRule::Directional, 1.0, 3).validate().is_ok());
    }
}
