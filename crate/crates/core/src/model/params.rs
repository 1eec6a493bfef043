use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{HeadId, ModelConfig, Scalar};
use crate::error::Result;

/// Role of a tensor in the network, used for masking decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Embedding,
    Attention,
    Mlp,
    LayerNorm,
    FinalLayerNorm,
    Unembedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: ParamKind,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of one transformer block inside the flat buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Flat-buffer layout of every named tensor.
///
/// Weight matrices are row-major `(out, in)`; `W_U` is `(vocab_size, d_model)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    entries: Vec<TensorEntry>,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) blocks: Vec<BlockOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) w_u: usize,
    total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>, kind: ParamKind| -> usize {
            let at = offset;
            offset += shape.iter().product::<usize>();
            entries.push(TensorEntry {
                name,
                shape,
                offset: at,
                kind,
            });
            at
        };
        let tok_emb = push("tok_emb".into(), vec![cfg.vocab_size, d], ParamKind::Embedding);
        let pos_emb = push("pos_emb".into(), vec![cfg.max_seq_len, d], ParamKind::Embedding);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let b = BlockOffsets {
                ln1_g: push(format!("blocks.{l}.ln1.gain"), vec![d], ParamKind::LayerNorm),
                ln1_b: push(format!("blocks.{l}.ln1.bias"), vec![d], ParamKind::LayerNorm),
                wq: push(format!("blocks.{l}.attn.w_q"), vec![d, d], ParamKind::Attention),
                wk: push(format!("blocks.{l}.attn.w_k"), vec![d, d], ParamKind::Attention),
                wv: push(format!("blocks.{l}.attn.w_v"), vec![d, d], ParamKind::Attention),
                wo: push(format!("blocks.{l}.attn.w_o"), vec![d, d], ParamKind::Attention),
                ln2_g: push(format!("blocks.{l}.ln2.gain"), vec![d], ParamKind::LayerNorm),
                ln2_b: push(format!("blocks.{l}.ln2.bias"), vec![d], ParamKind::LayerNorm),
                w1: push(format!("blocks.{l}.mlp.w_in"), vec![cfg.d_mlp, d], ParamKind::Mlp),
                b1: push(format!("blocks.{l}.mlp.b_in"), vec![cfg.d_mlp], ParamKind::Mlp),
                w2: push(format!("blocks.{l}.mlp.w_out"), vec![d, cfg.d_mlp], ParamKind::Mlp),
                b2: push(format!("blocks.{l}.mlp.b_out"), vec![d], ParamKind::Mlp),
            };
            blocks.push(b);
        }
        let lnf_g = push("ln_final.gain".into(), vec![d], ParamKind::FinalLayerNorm);
        let lnf_b = push("ln_final.bias".into(), vec![d], ParamKind::FinalLayerNorm);
        let w_u = push("w_u".into(), vec![cfg.vocab_size, d], ParamKind::Unembedding);
        Layout {
            entries,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            w_u,
            total: offset,
        }
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Coordinate ranges of every tensor of the given kind.
    pub fn ranges_of(&self, kind: ParamKind) -> Vec<Range<usize>> {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(TensorEntry::range)
            .collect()
    }
}

/// Flat parameter buffer plus the layout that names its pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T = f32> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<T>,
}

impl<T: Scalar> Parameters<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let data = vec![T::zero(); layout.total()];
        Ok(Parameters {
            config,
            layout,
            data,
        })
    }

    /// Seeded random initialisation.
    ///
    /// Matrices draw from `N(0, 1/fan_in)`, embeddings from `N(0, 1)`, MLP
    /// biases start at zero and LayerNorm at the identity.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = p.layout.entries().to_vec();
        for e in entries {
            let r = e.range();
            let std = match e.kind {
                ParamKind::Embedding => 1.0,
                ParamKind::LayerNorm | ParamKind::FinalLayerNorm => {
                    let fill = if e.name.ends_with("gain") { T::one() } else { T::zero() };
                    p.data[r].iter_mut().for_each(|x| *x = fill);
                    continue;
                }
                _ if e.shape.len() == 1 => continue,
                _ => 1.0 / (e.shape[1] as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            for x in &mut p.data[r] {
                *x = T::of(normal.sample(&mut rng));
            }
        }
        Ok(p)
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.entry(name).map(|e| &self.data[e.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.layout.entry(name)?.range();
        Some(&mut self.data[r])
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl Parameters<f32> {
    /// Hex SHA-256 over the config and the little-endian parameter bytes.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(super::checkpoint::config_manifest(&self.config).as_bytes());
        for x in &self.data {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Coordinates owned by one head: its `d_head` rows of `W_Q`, `W_K`, `W_V`
/// and its `d_head` columns of `W_O`.
pub fn head_param_slices(layout: &Layout, cfg: &ModelConfig, head: HeadId) -> Result<Vec<Range<usize>>> {
    cfg.check_head(head)?;
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let b = &layout.blocks[head.layer];
    let row0 = head.head * dh;
    let mut out = Vec::with_capacity(3 + d);
    for base in [b.wq, b.wk, b.wv] {
        let start = base + row0 * d;
        out.push(start..start + dh * d);
    }
    for row in 0..d {
        let start = b.wo + row * d + row0;
        out.push(start..start + dh);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::model::tests::tiny_config;

    #[test]
    fn layout_is_contiguous() {
        let cfg = tiny_config();
        let layout = Layout::new(&cfg);
        let mut next = 0;
        for e in layout.entries() {
            assert_eq!(e.offset, next, "{}", e.name);
            next += e.len();
        }
        assert_eq!(next, layout.total());
        let wu = layout.entry("w_u").unwrap();
        assert_eq!(wu.shape, vec![cfg.vocab_size, cfg.d_model]);
    }

    #[test]
    fn two_heads_split_rows_evenly() {
        let mut cfg = tiny_config();
        cfg.d_model = 4;
        let layout = Layout::new(&cfg);
        let wq = layout.entry("blocks.0.attn.w_q").unwrap().offset;
        let wo = layout.entry("blocks.0.attn.w_o").unwrap().offset;
        let h0 = head_param_slices(&layout, &cfg, HeadId::new(0, 0)).unwrap();
        let h1 = head_param_slices(&layout, &cfg, HeadId::new(0, 1)).unwrap();
        // rows 0..2 and 2..4 of W_Q
        assert_eq!(h0[0], wq..wq + 8);
        assert_eq!(h1[0], wq + 8..wq + 16);
        // columns 0..2 and 2..4 of each W_O row
        assert_eq!(h0[3], wo..wo + 2);
        assert_eq!(h1[3], wo + 2..wo + 4);
        assert_eq!(h1[6], wo + 3 * 4 + 2..wo + 3 * 4 + 4);
    }

    #[test]
    fn head_slices_partition_attention_by_enumeration() {
        let mut cfg = tiny_config();
        cfg.d_model = 8;
        cfg.n_heads = 4;
        let layout = Layout::new(&cfg);
        for layer in 0..cfg.n_layers {
            let mut owner = std::collections::HashMap::new();
            for h in 0..cfg.n_heads {
                for r in head_param_slices(&layout, &cfg, HeadId::new(layer, h)).unwrap() {
                    for c in r {
                        assert!(owner.insert(c, h).is_none(), "coordinate {c} owned twice");
                    }
                }
            }
            let expected: BTreeSet<usize> = ["w_q", "w_k", "w_v", "w_o"]
                .iter()
                .flat_map(|n| layout.entry(&format!("blocks.{layer}.attn.{n}")).unwrap().range())
                .collect();
            let got: BTreeSet<usize> = owner.keys().copied().collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn invalid_head_rejected() {
        let cfg = tiny_config();
        let layout = Layout::new(&cfg);
        assert!(head_param_slices(&layout, &cfg, HeadId::new(2, 0)).is_err());
        assert!(head_param_slices(&layout, &cfg, HeadId::new(0, 2)).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = Parameters::<f32>::init(tiny_config(), 3).unwrap();
        let b = Parameters::<f32>::init(tiny_config(), 3).unwrap();
        let c = Parameters::<f32>::init(tiny_config(), 4).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert!(a.tensor("blocks.0.ln1.gain").unwrap().iter().all(|&g| g == 1.0));
    }
}
