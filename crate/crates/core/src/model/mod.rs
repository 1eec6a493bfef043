//! Minimal decoder-only transformer.
//!
//! Pre-LayerNorm residual blocks with causal multi-head attention and a GELU
//! MLP. The label is read out at the final position through the rows of the
//! unembedding matrix that belong to the configured label tokens. Every head
//! output (the head's write into the residual stream) is captured in the
//! [`ActivationTrace`], and the parameter buffer exposes per-head coordinate
//! slices for gradient masking.
//!
//! The forward and backward passes are generic over [`Scalar`] so that test
//! oracles can evaluate the same network in `f64`; training and analysis run
//! in `f32`.

mod backward;
mod checkpoint;
mod forward;
mod params;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::{backward, cross_entropy, example_gradient, Gradients};
pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest};
pub use forward::{forward, forward_patched, ActivationTrace, LayerTrace};
pub use params::{head_param_slices, Layout, ParamKind, Parameters, TensorEntry};
pub(crate) use checkpoint::{read_bundle, write_bundle, BundleTensor};
pub(crate) use forward::{activation, matvec, readout};

/// Floating point type the network can be evaluated in.
pub trait Scalar:
    num_traits::Float + Default + fmt::Debug + std::iter::Sum + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// An attention head, ordered lexicographically by `(layer, head)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        HeadId { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.layer, self.head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Uniform causal mixing, identity activation, no LayerNorm.
    #[serde(default)]
    pub linear_mode: bool,
    /// Token ids whose unembedding rows form the classifier readout.
    pub label_tokens: Vec<u32>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.label_tokens.len() < 2 {
            return Err(Error::Config("at least two label tokens are required".into()));
        }
        let mut seen = self.label_tokens.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.label_tokens.len() {
            return Err(Error::Config("label tokens must be distinct".into()));
        }
        if let Some(&t) = self.label_tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Config(format!("label token {t} outside vocabulary")));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_labels(&self) -> usize {
        self.label_tokens.len()
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    /// All heads in lexicographic order.
    pub fn heads(&self) -> Vec<HeadId> {
        (0..self.n_layers)
            .flat_map(|l| (0..self.n_heads).map(move |h| HeadId::new(l, h)))
            .collect()
    }

    pub fn check_head(&self, head: HeadId) -> Result<()> {
        if head.layer >= self.n_layers || head.head >= self.n_heads {
            return Err(Error::Input(format!(
                "head {head} outside a {}x{} model",
                self.n_layers, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Input(format!("token {t} is out of vocabulary")));
        }
        Ok(())
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_mlp: 12,
            vocab_size: 10,
            max_seq_len: 6,
            linear_mode: false,
            label_tokens: vec![2, 3, 4],
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        assert!(cfg.validate().is_ok());
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_config();
        cfg.label_tokens = vec![2, 2];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.label_tokens = vec![2, 99];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn heads_are_lexicographic() {
        let heads = tiny_config().heads();
        let mut sorted = heads.clone();
        sorted.sort();
        assert_eq!(heads, sorted);
        assert_eq!(heads.len(), 4);
        assert!(HeadId::new(0, 1) < HeadId::new(1, 0));
    }

    #[test]
    fn token_checks() {
        let cfg = tiny_config();
        assert!(cfg.check_tokens(&[]).is_err());
        assert!(cfg.check_tokens(&[10]).is_err());
        assert!(cfg.check_tokens(&[1; 7]).is_err());
        assert!(cfg.check_tokens(&[1, 9]).is_ok());
    }
}
