//! Circuit-only evaluation by mean ablation.
//!
//! Heads outside the circuit emit their baseline mean at every position; the
//! rest of the network runs unchanged. Agreement with the full model's
//! prediction and preservation of its logit margin summarise how much of the
//! behaviour the circuit carries.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::cdt::BaselineMeans;
use crate::corpus::{set_hash, Example};
use crate::error::{Error, Result};
use crate::model::{argmax, forward, forward_patched, HeadId, Parameters};
use crate::tuning::margin;

/// Label logits with every head outside `circuit` replaced by its mean.
pub fn circuit_only_forward(
    params: &Parameters<f32>,
    means: &BaselineMeans,
    circuit: &BTreeSet<HeadId>,
    tokens: &[u32],
) -> Result<Vec<f32>> {
    if tokens.len() != means.seq_len {
        return Err(Error::Input(format!(
            "input length {} differs from the mean length {}",
            tokens.len(),
            means.seq_len
        )));
    }
    let mut patches = Vec::new();
    for h in params.config.heads() {
        if !circuit.contains(&h) {
            patches.push((h, means.get(h)?));
        }
    }
    let (logits, _) = forward_patched(params, tokens, |h| {
        patches.iter().find(|(p, _)| *p == h).map(|(_, m)| *m)
    })?;
    Ok(logits)
}

/// Per-example full and circuit-only outcomes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleOutcome {
    pub id: u64,
    pub label: usize,
    pub full_pred: usize,
    pub circuit_pred: usize,
    pub full_margin: f64,
    pub circuit_margin: f64,
}

pub fn outcomes(
    params: &Parameters<f32>,
    means: &BaselineMeans,
    circuit: &BTreeSet<HeadId>,
    data: &[Example],
) -> Result<Vec<ExampleOutcome>> {
    if data.is_empty() {
        return Err(Error::Input("faithfulness needs a nonempty validation set".into()));
    }
    data.par_iter()
        .map(|e| {
            let (full, _) = forward(params, &e.tokens)?;
            let ablated = circuit_only_forward(params, means, circuit, &e.tokens)?;
            Ok(ExampleOutcome {
                id: e.id,
                label: e.label,
                full_pred: argmax(&full),
                circuit_pred: argmax(&ablated),
                full_margin: margin(&full, e.label),
                circuit_margin: margin(&ablated, e.label),
            })
        })
        .collect()
}

/// Fraction of examples whose circuit-only prediction matches the full model.
pub fn agreement(outcomes: &[ExampleOutcome]) -> f64 {
    let same = outcomes.iter().filter(|o| o.full_pred == o.circuit_pred).count();
    same as f64 / outcomes.len().max(1) as f64
}

/// Circuit-only gold accuracy divided by full-model gold accuracy.
pub fn gold_accuracy_ratio(outcomes: &[ExampleOutcome]) -> Option<f64> {
    let full = outcomes.iter().filter(|o| o.full_pred == o.label).count();
    let circ = outcomes.iter().filter(|o| o.circuit_pred == o.label).count();
    (full > 0).then(|| circ as f64 / full as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginFaithfulness {
    /// Mean clamped ratio over examples with a positive full margin.
    pub value: f64,
    pub retained: usize,
    pub skipped: usize,
    /// No example had a positive full margin.
    pub degenerate: bool,
}

pub fn margin_ratio(outcomes: &[ExampleOutcome]) -> MarginFaithfulness {
    let mut sum = 0.0;
    let mut retained = 0;
    for o in outcomes {
        if o.full_margin > 0.0 {
            sum += (o.circuit_margin / o.full_margin).clamp(0.0, 1.0);
            retained += 1;
        }
    }
    MarginFaithfulness {
        value: if retained > 0 { sum / retained as f64 } else { 0.0 },
        retained,
        skipped: outcomes.len() - retained,
        degenerate: retained == 0,
    }
}

pub fn accuracy_faithfulness(
    params: &Parameters<f32>,
    means: &BaselineMeans,
    circuit: &BTreeSet<HeadId>,
    validation: &[Example],
) -> Result<f64> {
    Ok(agreement(&outcomes(params, means, circuit, validation)?))
}

pub fn margin_faithfulness(
    params: &Parameters<f32>,
    means: &BaselineMeans,
    circuit: &BTreeSet<HeadId>,
    validation: &[Example],
) -> Result<MarginFaithfulness> {
    Ok(margin_ratio(&outcomes(params, means, circuit, validation)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaithfulnessReport {
    pub accuracy: f64,
    pub gold_accuracy_ratio: Option<f64>,
    pub margin: MarginFaithfulness,
    pub circuit_size: usize,
    pub validation_hash: String,
    pub outcomes: Vec<ExampleOutcome>,
}

/// Both metrics on the validation pool.
pub fn faithfulness_report(
    params: &Parameters<f32>,
    means: &BaselineMeans,
    circuit: &BTreeSet<HeadId>,
    validation: &[Example],
) -> Result<FaithfulnessReport> {
    let out = outcomes(params, means, circuit, validation)?;
    Ok(FaithfulnessReport {
        accuracy: agreement(&out),
        gold_accuracy_ratio: gold_accuracy_ratio(&out),
        margin: margin_ratio(&out),
        circuit_size: circuit.len(),
        validation_hash: set_hash(validation),
        outcomes: out,
    })
}

/// Writes the per-example outcomes so other metrics can be recomputed later.
pub fn write_outcomes(path: &std::path::Path, outcomes: &[ExampleOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for o in outcomes {
        w.serialize(o)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cdt::compute_baseline_means;
    use crate::model::tests::tiny_config;

    fn setup() -> (Parameters<f32>, Vec<Example>, BaselineMeans) {
        let p = Parameters::init(tiny_config(), 11).unwrap();
        let data: Vec<Example> = (0..9)
            .map(|i| Example {
                id: i,
                language: "x".into(),
                label: (i % 3) as usize,
                tokens: vec![0, 5 + (i % 4) as u32, 6 + (i % 3) as u32, 1],
            })
            .collect();
        let means = compute_baseline_means(&p, &data, 3).unwrap();
        (p, data, means)
    }

    #[test]
    fn all_heads_is_the_full_model() {
        let (p, data, means) = setup();
        let all: BTreeSet<HeadId> = p.config.heads().into_iter().collect();
        for e in &data {
            let (full, _) = forward(&p, &e.tokens).unwrap();
            assert_eq!(circuit_only_forward(&p, &means, &all, &e.tokens).unwrap(), full);
        }
        let r = faithfulness_report(&p, &means, &all, &data).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.margin.degenerate || r.margin.value == 1.0);
    }

    fn outcome(full_margin: f64, circuit_margin: f64, full_pred: usize, circuit_pred: usize) -> ExampleOutcome {
        ExampleOutcome {
            id: 0,
            label: 0,
            full_pred,
            circuit_pred,
            full_margin,
            circuit_margin,
        }
    }

    #[test]
    fn margin_ratio_definition() {
        let half = [outcome(2.0, 1.0, 0, 0), outcome(4.0, 2.0, 0, 0)];
        assert_eq!(margin_ratio(&half).value, 0.5);
        let mixed = [outcome(1.0, 3.0, 0, 0), outcome(1.0, -1.0, 0, 1), outcome(-1.0, 1.0, 1, 0)];
        let m = margin_ratio(&mixed);
        assert_eq!((m.value, m.retained, m.skipped), (0.5, 2, 1));
        assert!(margin_ratio(&[outcome(-1.0, 1.0, 1, 1)]).degenerate);
        assert!((agreement(&mixed) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn missing_mean_is_a_config_error() {
        let (p, data, mut means) = setup();
        means.means.remove(&HeadId::new(0, 0));
        let err = circuit_only_forward(&p, &means, &BTreeSet::new(), &data[0].tokens).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
