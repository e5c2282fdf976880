//! Versioned JSON weight containers.
//!
//! Two file kinds share the format: full model checkpoints (config header +
//! every named tensor) and adapter-only sidecars (per-adapter metadata +
//! tensor pairs). Loading validates the version, every shape against the
//! config, and rejects missing or stray tensors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

use super::lora::validate_adapter;
use super::{AdapterTarget, LayerWeights, LoraAdapter, ModelConfig, ProjKind, TransformerWeights};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint missing tensor '{0}'")]
    MissingTensor(String),
    #[error("checkpoint contains unexpected tensor '{0}'")]
    UnexpectedTensor(String),
    #[error("tensor '{name}' has shape {got:?}, expected {want:?}")]
    ShapeMismatch { name: String, want: Vec<usize>, got: Vec<usize> },
    #[error("invalid checkpoint entry '{name}': {detail}")]
    Invalid { name: String, detail: String },
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    config: ModelConfig,
    tensors: BTreeMap<String, TensorRepr>,
}

#[derive(Serialize, Deserialize)]
struct AdapterEntry {
    layer: usize,
    proj: ProjKind,
    rank: usize,
    alpha: f64,
}

#[derive(Serialize, Deserialize)]
struct AdaptersFile {
    format_version: u32,
    adapters: Vec<AdapterEntry>,
    tensors: BTreeMap<String, TensorRepr>,
}

fn repr(t: &Tensor) -> TensorRepr {
    TensorRepr { shape: t.shape().to_vec(), data: t.data().to_vec() }
}

/// Canonical serialized form of a full weight set. Sorted tensor names make
/// the output deterministic, so bit-identical weights give identical strings
/// — the frozen-base invariant is checked on exactly this function.
pub fn model_json(w: &TransformerWeights) -> Result<String> {
    let tensors: BTreeMap<String, TensorRepr> =
        w.named_tensors().into_iter().map(|(name, t)| (name, repr(t))).collect();
    let file =
        ModelFile { format_version: FORMAT_VERSION, config: w.config().clone(), tensors };
    Ok(serde_json::to_string(&file)?)
}

pub fn save_model(path: &Path, w: &TransformerWeights) -> Result<()> {
    write_file(path, &model_json(w)?)
}

pub fn load_model(path: &Path) -> Result<TransformerWeights> {
    let file: ModelFile = serde_json::from_str(&read_file(path)?)?;
    if file.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: file.format_version });
    }
    let cfg = file.config;
    cfg.validate()
        .map_err(|e| CheckpointError::Invalid { name: "config".into(), detail: e.to_string() })?;
    let mut tensors = file.tensors;
    let d = cfg.d_model;
    let mut take = |name: String, want: Vec<usize>| -> Result<Tensor> {
        let repr = tensors
            .remove(&name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if repr.shape != want {
            return Err(CheckpointError::ShapeMismatch { name, want, got: repr.shape });
        }
        Tensor::new(repr.shape, repr.data)
            .map_err(|e| CheckpointError::Invalid { name, detail: e.to_string() })
    };

    let tok_emb = take("tok_emb".into(), vec![cfg.vocab_size, d])?;
    let pos_emb = take("pos_emb".into(), vec![cfg.max_seq_len, d])?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        layers.push(LayerWeights {
            ln1_gamma: take(format!("layers.{i}.ln1.gamma"), vec![d])?,
            ln1_beta: take(format!("layers.{i}.ln1.beta"), vec![d])?,
            wq: take(format!("layers.{i}.attn.wq"), vec![d, d])?,
            wk: take(format!("layers.{i}.attn.wk"), vec![d, d])?,
            wv: take(format!("layers.{i}.attn.wv"), vec![d, d])?,
            wo: take(format!("layers.{i}.attn.wo"), vec![d, d])?,
            ln2_gamma: take(format!("layers.{i}.ln2.gamma"), vec![d])?,
            ln2_beta: take(format!("layers.{i}.ln2.beta"), vec![d])?,
            w_up: take(format!("layers.{i}.mlp.w_up"), vec![cfg.d_ff, d])?,
            w_down: take(format!("layers.{i}.mlp.w_down"), vec![d, cfg.d_ff])?,
        });
    }
    let ln_f_gamma = take("ln_f.gamma".into(), vec![d])?;
    let ln_f_beta = take("ln_f.beta".into(), vec![d])?;
    if let Some(stray) = tensors.keys().next() {
        return Err(CheckpointError::UnexpectedTensor(stray.clone()));
    }
    Ok(TransformerWeights { config: cfg, tok_emb, pos_emb, layers, ln_f_gamma, ln_f_beta })
}

pub fn save_adapters(path: &Path, adapters: &[LoraAdapter]) -> Result<()> {
    let mut entries = Vec::with_capacity(adapters.len());
    let mut tensors = BTreeMap::new();
    for (i, ad) in adapters.iter().enumerate() {
        entries.push(AdapterEntry {
            layer: ad.target.layer,
            proj: ad.target.proj,
            rank: ad.rank,
            alpha: ad.alpha,
        });
        tensors.insert(format!("adapters.{i}.a"), repr(&ad.a));
        tensors.insert(format!("adapters.{i}.b"), repr(&ad.b));
    }
    let file = AdaptersFile { format_version: FORMAT_VERSION, adapters: entries, tensors };
    write_file(path, &serde_json::to_string(&file)?)
}

/// Loads an adapter sidecar and validates it against `cfg`. Loaded pairs come
/// back trainable, ready for further training or merging.
pub fn load_adapters(path: &Path, cfg: &ModelConfig) -> Result<Vec<LoraAdapter>> {
    let file: AdaptersFile = serde_json::from_str(&read_file(path)?)?;
    if file.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: file.format_version });
    }
    let mut tensors = file.tensors;
    let mut out = Vec::with_capacity(file.adapters.len());
    for (i, entry) in file.adapters.iter().enumerate() {
        let mut take = |name: String| -> Result<Tensor> {
            let repr = tensors
                .remove(&name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            Tensor::new(repr.shape, repr.data)
                .map_err(|e| CheckpointError::Invalid { name, detail: e.to_string() })
        };
        let ad = LoraAdapter {
            target: AdapterTarget { layer: entry.layer, proj: entry.proj },
            a: take(format!("adapters.{i}.a"))?.trainable(),
            b: take(format!("adapters.{i}.b"))?.trainable(),
            rank: entry.rank,
            alpha: entry.alpha,
        };
        validate_adapter(cfg, &ad).map_err(|e| CheckpointError::Invalid {
            name: format!("adapters.{i}"),
            detail: e.to_string(),
        })?;
        out.push(ad);
    }
    if let Some(stray) = tensors.keys().next() {
        return Err(CheckpointError::UnexpectedTensor(stray.clone()));
    }
    Ok(out)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}
