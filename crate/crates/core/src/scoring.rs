//! Relevance scores for head contributions.
//!
//! Two rules are supported. The magnitude rule is the unsigned ratio
//! `|beta|_1 / |gamma|_1`. The directional rule is signed: at the logits it is
//! the gold logit's relevant part minus the mean over competitor labels, and
//! upstream it is the projection of `beta` onto the task direction built from
//! the unembedding rows of the labels.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cdt::{Contribution, Target};
use crate::error::{Error, Result};
use crate::model::{HeadId, Parameters};

/// Which scoring rule drives discovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringRule {
    /// Signed: logit margin at the readout, task-direction projection upstream.
    Directional,
    /// Unsigned `|beta|_1 / |gamma|_1` everywhere.
    Magnitude,
}

impl ScoringRule {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoringRule::Directional => "directional",
            ScoringRule::Magnitude => "magnitude",
        }
    }
}

impl std::fmt::Display for ScoringRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScoringRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "directional" | "projection" => Ok(ScoringRule::Directional),
            "magnitude" => Ok(ScoringRule::Magnitude),
            other => Err(Error::Config(format!("unknown scoring rule `{other}`"))),
        }
    }
}

/// `|beta|_1 / |gamma|_1`; `+inf` when the denominator vanishes.
pub fn magnitude_ratio(beta: &[f32], gamma: &[f32]) -> f64 {
    let num: f64 = beta.iter().map(|x| (*x as f64).abs()).sum();
    let den: f64 = gamma.iter().map(|x| (*x as f64).abs()).sum();
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    num / den
}

/// Relevant gold logit minus the mean relevant logit of the competitors.
pub fn logit_margin_score(beta: &[f32], gold: usize, others: &[usize]) -> Result<f64> {
    if others.is_empty() {
        return Err(Error::Config("logit margin needs at least one competitor label".into()));
    }
    if others.contains(&gold) {
        return Err(Error::Config(format!("gold label {gold} listed as its own competitor")));
    }
    let at = |i: usize| {
        beta.get(i)
            .map(|x| *x as f64)
            .ok_or_else(|| Error::Input(format!("label index {i} outside {} logits", beta.len())))
    };
    let mut rest = 0.0;
    for &o in others {
        rest += at(o)?;
    }
    Ok(at(gold)? - rest / others.len() as f64)
}

/// Competitor labels of `gold` among `n_labels`.
pub fn competitors(gold: usize, n_labels: usize) -> Vec<usize> {
    (0..n_labels).filter(|&i| i != gold).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDirection {
    pub v_task: Vec<f64>,
    pub gold: usize,
    pub others: Vec<usize>,
    pub norm: f64,
}

/// `W_U(gold) - mean(W_U(others))` over the given label rows.
pub fn task_direction(label_rows: &[Vec<f32>], gold: usize, others: &[usize]) -> Result<TaskDirection> {
    if others.is_empty() {
        return Err(Error::Config("task direction needs at least one competitor label".into()));
    }
    let row = |i: usize| {
        label_rows
            .get(i)
            .ok_or_else(|| Error::Input(format!("label row {i} missing from unembedding")))
    };
    let g = row(gold)?;
    let mut v: Vec<f64> = g.iter().map(|x| *x as f64).collect();
    for &o in others {
        let r = row(o)?;
        if r.len() != v.len() {
            return Err(Error::Input("label rows differ in width".into()));
        }
        for (a, b) in v.iter_mut().zip(r) {
            *a -= *b as f64 / others.len() as f64;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Scoring(format!(
            "task direction for label {gold} is zero: labels are indistinguishable at the readout"
        )));
    }
    Ok(TaskDirection {
        v_task: v,
        gold,
        others: others.to_vec(),
        norm,
    })
}

/// Unembedding rows of the configured label tokens.
pub fn label_rows(params: &Parameters<f32>) -> Vec<Vec<f32>> {
    let d = params.config.d_model;
    let w_u = params.tensor("w_u").expect("layout always has w_u");
    params
        .config
        .label_tokens
        .iter()
        .map(|&t| w_u[t as usize * d..(t as usize + 1) * d].to_vec())
        .collect()
}

/// Task directions for every gold label of the model's readout.
pub fn task_directions(params: &Parameters<f32>) -> Result<Vec<TaskDirection>> {
    let rows = label_rows(params);
    let n = rows.len();
    (0..n).map(|g| task_direction(&rows, g, &competitors(g, n))).collect()
}

/// `(beta . v_task) / |v_task|_2`.
pub fn projection_score(beta: &[f32], dir: &TaskDirection) -> Result<f64> {
    if beta.len() != dir.v_task.len() {
        return Err(Error::Input(format!(
            "contribution has {} dims, task direction {}",
            beta.len(),
            dir.v_task.len()
        )));
    }
    let dot: f64 = beta.iter().zip(&dir.v_task).map(|(b, v)| *b as f64 * v).sum();
    Ok(dot / dir.norm)
}

/// One per-input, per-target score.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScore {
    pub input_id: u64,
    pub source: HeadId,
    pub target: Target,
    pub rule: ScoringRule,
    pub value: f64,
}

/// Scores a single contribution for an input with gold label `gold`.
pub fn score_contribution(
    rule: ScoringRule,
    c: &Contribution,
    gold: usize,
    directions: &[TaskDirection],
) -> Result<RawScore> {
    let value = match (rule, c.target) {
        (ScoringRule::Magnitude, _) => magnitude_ratio(&c.beta, &c.gamma),
        (ScoringRule::Directional, Target::Logits) => {
            logit_margin_score(&c.beta, gold, &competitors(gold, c.beta.len()))?
        }
        (ScoringRule::Directional, Target::Head(_)) => {
            let dir = directions
                .get(gold)
                .ok_or_else(|| Error::Input(format!("no task direction for label {gold}")))?;
            projection_score(&c.beta, dir)?
        }
    };
    Ok(RawScore {
        input_id: c.input_id,
        source: c.source,
        target: c.target,
        rule,
        value,
    })
}

/// Aggregate relevance per source head.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelevanceTable {
    pub scores: BTreeMap<HeadId, f64>,
    /// Heads whose aggregate is the `+inf` sentinel.
    pub infinite: BTreeSet<HeadId>,
    pub raw: Vec<RawScore>,
}

impl RelevanceTable {
    /// Table built directly from aggregate scores (no raw data).
    pub fn from_scores(scores: BTreeMap<HeadId, f64>) -> Self {
        let infinite = scores.iter().filter(|(_, v)| **v == f64::INFINITY).map(|(h, _)| *h).collect();
        RelevanceTable {
            scores,
            infinite,
            raw: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, head: HeadId) -> Option<f64> {
        self.scores.get(&head).copied()
    }

    /// Descending score, ties broken by lexicographic head order.
    pub fn ranked(&self) -> Vec<(HeadId, f64)> {
        let mut v: Vec<(HeadId, f64)> = self.scores.iter().map(|(h, s)| (*h, *s)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn top(&self, k: usize) -> Vec<(HeadId, f64)> {
        let mut r = self.ranked();
        r.truncate(k);
        r
    }

    /// Writes the raw scores as CSV.
    pub fn write_raw_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["input_id", "source_layer", "source_head", "target", "rule", "score"])?;
        for r in &self.raw {
            w.write_record([
                r.input_id.to_string(),
                r.source.layer.to_string(),
                r.source.head.to_string(),
                r.target.to_string(),
                r.rule.to_string(),
                r.value.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Report(e.to_string()))
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_raw_csv(std::io::BufWriter::new(f))
    }
}

/// Mean over targets, then over inputs.
///
/// `expected` names the targets each source must be scored against and
/// `inputs` the input ids; any missing `(source, target, input)` triple or
/// non-finite-but-not-`+inf` score is an error.
pub fn aggregate(
    raw: Vec<RawScore>,
    expected: &BTreeMap<HeadId, Vec<Target>>,
    inputs: &[u64],
) -> Result<RelevanceTable> {
    if inputs.is_empty() {
        return Err(Error::Input("aggregation needs at least one input".into()));
    }
    let mut cells: BTreeMap<(HeadId, Target, u64), f64> = BTreeMap::new();
    for r in &raw {
        if r.value.is_nan() || r.value == f64::NEG_INFINITY {
            return Err(Error::Numeric(format!(
                "score for source {} target {} input {} is {}",
                r.source, r.target, r.input_id, r.value
            )));
        }
        cells.insert((r.source, r.target, r.input_id), r.value);
    }
    let mut scores = BTreeMap::new();
    for (&source, targets) in expected {
        if targets.is_empty() {
            return Err(Error::Input(format!("source {source} has no targets")));
        }
        let mut total = 0.0;
        for &input in inputs {
            let mut per_input = 0.0;
            for &t in targets {
                per_input += cells.get(&(source, t, input)).copied().ok_or_else(|| {
                    Error::Scoring(format!("missing score for source {source} target {t} input {input}"))
                })?;
            }
            total += per_input / targets.len() as f64;
        }
        scores.insert(source, total / inputs.len() as f64);
    }
    let mut table = RelevanceTable::from_scores(scores);
    for h in &table.infinite {
        log::warn!("head {h} has an infinite magnitude ratio; ranked first");
    }
    table.raw = raw;
    Ok(table)
}
