//! Text manifest plus raw little-endian `f32` blob.
//!
//! A bundle at `foo.manifest` stores its blob at `foo.bin`. The manifest is a
//! list of `key = value` lines; tensors appear as
//! `tensor = <name> <d0>x<d1>... <byte offset> <byte length>`.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{Layout, ModelConfig, Parameters};
use crate::error::{Error, Result};

const CHECKPOINT_FORMAT: &str = "ctsft-checkpoint-v1";

/// Ordered `key = value` text record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.iter().filter(move |(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str, path: &Path) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(path, format!("missing key `{key}`")))
    }

    pub fn parse_value<V: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<V> {
        let raw = self.require(key, path)?;
        raw.parse()
            .map_err(|_| Error::format(path, format!("bad value `{raw}` for `{key}`")))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::format(path, format!("line {}: expected `key = value`", i + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Manifest { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

pub(crate) fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// A named tensor destined for a bundle.
pub(crate) struct BundleTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

/// Writes header entries, tensor index and blob.
pub(crate) fn write_bundle(path: &Path, mut header: Manifest, tensors: &[BundleTensor<'_>]) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::new();
    for t in tensors {
        let offset = bytes.len();
        for x in t.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let shape = t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        header.push("tensor", format!("{} {} {} {}", t.name, shape, offset, bytes.len() - offset));
    }
    header.push("blob", blob.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default());
    header.push("blob_sha256", hex::encode(Sha256::digest(&bytes)));
    header.write(path)?;
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))
}

/// A tensor read back from a bundle.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LoadedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub(crate) fn read_bundle(path: &Path) -> Result<(Manifest, Vec<LoadedTensor>)> {
    let manifest = Manifest::read(path)?;
    let blob = blob_path(path);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    if let Some(expected) = manifest.get("blob_sha256") {
        if hex::encode(Sha256::digest(&bytes)) != expected {
            return Err(Error::format(&blob, "blob hash does not match manifest"));
        }
    }
    let mut tensors = Vec::new();
    for spec in manifest.get_all("tensor") {
        let parts: Vec<&str> = spec.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::format(path, format!("bad tensor line `{spec}`")));
        }
        let shape: Vec<usize> = parts[1]
            .split('x')
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("bad shape `{}`", parts[1])))?;
        let offset: usize = parts[2].parse().map_err(|_| Error::format(path, "bad offset"))?;
        let len: usize = parts[3].parse().map_err(|_| Error::format(path, "bad length"))?;
        if len != shape.iter().product::<usize>() * 4 || offset + len > bytes.len() {
            return Err(Error::format(path, format!("tensor `{}` does not fit the blob", parts[0])));
        }
        let data = bytes[offset..offset + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(LoadedTensor {
            name: parts[0].to_string(),
            shape,
            data,
        });
    }
    Ok((manifest, tensors))
}

/// Canonical text form of a config, also used for hashing.
pub(crate) fn config_manifest(cfg: &ModelConfig) -> String {
    config_entries(cfg).render()
}

fn config_entries(cfg: &ModelConfig) -> Manifest {
    let mut m = Manifest::new();
    m.push("config.n_layers", cfg.n_layers)
        .push("config.n_heads", cfg.n_heads)
        .push("config.d_model", cfg.d_model)
        .push("config.d_mlp", cfg.d_mlp)
        .push("config.vocab_size", cfg.vocab_size)
        .push("config.max_seq_len", cfg.max_seq_len)
        .push("config.linear_mode", cfg.linear_mode)
        .push(
            "config.label_tokens",
            cfg.label_tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","),
        );
    m
}

pub fn save_checkpoint(params: &Parameters<f32>, path: &Path) -> Result<()> {
    let mut header = Manifest::new();
    header.push("format", CHECKPOINT_FORMAT).push("dtype", "f32le");
    header.entries.extend(config_entries(&params.config).entries);
    header.push("param_hash", params.hash());
    let tensors: Vec<BundleTensor<'_>> = params
        .layout
        .entries()
        .iter()
        .map(|e| BundleTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: &params.data[e.range()],
        })
        .collect();
    write_bundle(path, header, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<Parameters<f32>> {
    let (m, tensors) = read_bundle(path)?;
    if m.get("format") != Some(CHECKPOINT_FORMAT) {
        return Err(Error::format(path, "not a checkpoint manifest"));
    }
    let label_tokens = m
        .require("config.label_tokens", path)?
        .split(',')
        .map(|s| s.parse())
        .collect::<std::result::Result<Vec<u32>, _>>()
        .map_err(|_| Error::format(path, "bad label token list"))?;
    let config = ModelConfig {
        n_layers: m.parse_value("config.n_layers", path)?,
        n_heads: m.parse_value("config.n_heads", path)?,
        d_model: m.parse_value("config.d_model", path)?,
        d_mlp: m.parse_value("config.d_mlp", path)?,
        vocab_size: m.parse_value("config.vocab_size", path)?,
        max_seq_len: m.parse_value("config.max_seq_len", path)?,
        linear_mode: m.parse_value("config.linear_mode", path)?,
        label_tokens,
    };
    config.validate()?;
    let layout = Layout::new(&config);
    let mut data = vec![0.0f32; layout.total()];
    for e in layout.entries() {
        let t = tensors
            .iter()
            .find(|t| t.name == e.name)
            .ok_or_else(|| Error::format(path, format!("missing tensor `{}`", e.name)))?;
        if t.shape != e.shape {
            return Err(Error::format(path, format!("shape mismatch for `{}`", e.name)));
        }
        data[e.range()].copy_from_slice(&t.data);
    }
    let params = Parameters {
        config,
        layout,
        data,
    };
    if let Some(h) = m.get("param_hash") {
        if h != params.hash() {
            return Err(Error::format(path, "parameter hash mismatch"));
        }
    }
    Ok(params)
}
