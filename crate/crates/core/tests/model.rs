//! Library forward pass against the naive reference, plus checkpoint and
//! gradient invariants.

mod common;

use common::*;
use ctsft::model::{example_gradient, forward, forward_patched, load_checkpoint, save_checkpoint, HeadId, Parameters};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

#[test]
fn forward_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..6 {
        for linear in [false, true] {
            let p = Parameters::<f32>::init(random_config(&mut rng, 16, linear), seed).unwrap();
            for e in random_examples(seed + 100, 5) {
                let (lib, _) = forward(&p, &e.tokens).unwrap();
                let reference = reference_logits(&p, &e.tokens, &|_| None);
                let scale = reference.iter().fold(1.0f64, |m, x| m.max(x.abs()));
                assert!(max_abs_diff(&to_f64(&lib), &reference) <= 1e-5 * scale, "{lib:?} vs {reference:?}");
            }
        }
    }
}

#[test]
fn patched_forward_matches_reference() {
    let p = Parameters::<f32>::init(config(2, 2, 16, false), 9).unwrap();
    let e = &random_examples(1, 1)[0];
    let buf: Vec<f32> = (0..SEQ * 16).map(|i| (i as f32 * 0.37).sin()).collect();
    let target = HeadId::new(1, 0);
    let (lib, _) = forward_patched(&p, &e.tokens, |h| (h == target).then_some(&buf[..])).unwrap();
    let reference = reference_logits(&p, &e.tokens, &|h| (h == target).then(|| to_f64(&buf)));
    assert!(max_abs_diff(&to_f64(&lib), &reference) < 1e-5);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let p = Parameters::<f32>::init(config(2, 4, 16, false), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.manifest");
    save_checkpoint(&p, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.hash(), p.hash());
    assert!(back.data.iter().zip(&p.data).all(|(a, b)| a.to_bits() == b.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causal_prefix_invariance(seed in 0u64..1000, tail in 5u32..20) {
        // the last position only sees earlier tokens, so changing nothing
        // before it leaves the prefix activations untouched
        let p = Parameters::<f32>::init(config(2, 2, 8, false), seed).unwrap();
        let e = &random_examples(seed, 1)[0];
        let mut other = e.tokens.clone();
        let last = other.len() - 1;
        other[last] = tail;
        let (_, a) = forward(&p, &e.tokens).unwrap();
        let (_, b) = forward(&p, &other).unwrap();
        let d = p.config.d_model;
        for l in 0..p.config.n_layers {
            prop_assert_eq!(&a.layers[l].resid_out[..last * d], &b.layers[l].resid_out[..last * d]);
        }
    }

    #[test]
    fn gradient_is_zero_for_unused_tokens(seed in 0u64..1000) {
        let p = Parameters::<f64>::init(config(2, 2, 8, false), seed).unwrap();
        let e = &random_examples(seed, 1)[0];
        let (_, g) = example_gradient(&p, &e.tokens, e.label).unwrap();
        let d = p.config.d_model;
        let tok = p.layout.entry("tok_emb").unwrap().range();
        for v in 0..VOCAB as u32 {
            if !e.tokens.contains(&v) {
                let r = tok.start + v as usize * d..tok.start + (v as usize + 1) * d;
                prop_assert!(g[r].iter().all(|&x| x == 0.0));
            }
        }
        prop_assert!(g.iter().all(|x| x.is_finite()));
    }
}
