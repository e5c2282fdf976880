//! Decoder-only transformer with a frozen weight set and optional LoRA
//! adapters: the frozen base is the teacher, base + adapters the student.
//!
//! Architecture: learned token + positional embeddings, pre-LN blocks with
//! causal multi-head attention and a GELU MLP, a final layer norm, and an
//! output head tied to the token embedding. All projections are bias-free.
//! Weight matrices are stored in math orientation `[d_out x d_in]` and applied
//! as `x @ W^T`, so the LoRA merge reads literally as `W + (alpha/r) B A`.

mod checkpoint;
mod lora;

pub use checkpoint::{
    load_adapters, load_model, model_json, save_adapters, save_model, CheckpointError,
};
pub use lora::{AdaptedModel, AdapterTarget, LoraAdapter, LoraConfig, ProjKind};

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::derive_seed;
use crate::tensor::{GradGraph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    /// The prompt does not fit the model's context window. Callers that plan
    /// prompt budgets catch this variant specifically.
    #[error("context window exceeded: sequence length {len} > max_seq_len {max}")]
    ContextWindowExceeded { len: usize, max: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid adapter setup: {0}")]
    Adapter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Shape of one transformer instance. `d_ff` is conventionally `4 * d_model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout_p: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            (self.vocab_size, "vocab_size"),
            (self.d_model, "d_model"),
            (self.n_layers, "n_layers"),
            (self.n_heads, "n_heads"),
            (self.d_ff, "d_ff"),
            (self.max_seq_len, "max_seq_len"),
        ];
        for (v, name) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Four-point model-size axis. The sizes grade width, depth, and head count
/// together so that accuracy-vs-size trends can be read off the run matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeTag {
    S,
    M,
    L,
    XL,
}

impl SizeTag {
    pub const ALL: [SizeTag; 4] = [SizeTag::S, SizeTag::M, SizeTag::L, SizeTag::XL];

    /// The shared context window for every size in the family.
    pub const MAX_SEQ_LEN: usize = 768;

    pub fn config(self, vocab_size: usize) -> ModelConfig {
        let (d_model, n_layers, n_heads) = match self {
            SizeTag::S => (64, 2, 2),
            SizeTag::M => (96, 3, 3),
            SizeTag::L => (128, 4, 4),
            SizeTag::XL => (192, 4, 6),
        };
        ModelConfig {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_ff: 4 * d_model,
            max_seq_len: Self::MAX_SEQ_LEN,
            dropout_p: 0.1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SizeTag::S => "s",
            SizeTag::M => "m",
            SizeTag::L => "l",
            SizeTag::XL => "xl",
        }
    }
}

impl FromStr for SizeTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(SizeTag::S),
            "m" => Ok(SizeTag::M),
            "l" => Ok(SizeTag::L),
            "xl" => Ok(SizeTag::XL),
            other => Err(format!("unknown model size '{other}' (expected s|m|l|xl)")),
        }
    }
}

impl std::fmt::Display for SizeTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    /// Attention projections, each `[d_model x d_model]` in math orientation.
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    /// MLP up projection `[d_ff x d_model]`.
    pub w_up: Tensor,
    /// MLP down projection `[d_model x d_ff]`.
    pub w_down: Tensor,
}

/// Full frozen weight set. Construction is the only mutation path; training
/// never touches these, which the frozen-base serialization test pins down.
#[derive(Debug, Clone)]
pub struct TransformerWeights {
    config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub ln_f_gamma: Tensor,
    pub ln_f_beta: Tensor,
}

const INIT_STD: f64 = 0.02;

impl TransformerWeights {
    /// Fresh weights: Gaussian(0, 0.02) matrices, unit gains, zero shifts.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let randn = |shape: Vec<usize>, rng: &mut ChaCha8Rng| Tensor::randn(shape, INIT_STD, rng);
        let tok_emb = randn(vec![config.vocab_size, d], &mut rng);
        let pos_emb = randn(vec![config.max_seq_len, d], &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_gamma: ones(d),
                ln1_beta: Tensor::zeros(&[d]),
                wq: randn(vec![d, d], &mut rng),
                wk: randn(vec![d, d], &mut rng),
                wv: randn(vec![d, d], &mut rng),
                wo: randn(vec![d, d], &mut rng),
                ln2_gamma: ones(d),
                ln2_beta: Tensor::zeros(&[d]),
                w_up: randn(vec![config.d_ff, d], &mut rng),
                w_down: randn(vec![d, config.d_ff], &mut rng),
            });
        }
        Ok(TransformerWeights {
            config,
            tok_emb,
            pos_emb,
            layers,
            ln_f_gamma: ones(d),
            ln_f_beta: Tensor::zeros(&[d]),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Stable name -> tensor listing used by checkpoints and the frozen-base
    /// byte-identity check.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in [
                ("ln1.gamma", &l.ln1_gamma),
                ("ln1.beta", &l.ln1_beta),
                ("attn.wq", &l.wq),
                ("attn.wk", &l.wk),
                ("attn.wv", &l.wv),
                ("attn.wo", &l.wo),
                ("ln2.gamma", &l.ln2_gamma),
                ("ln2.beta", &l.ln2_beta),
                ("mlp.w_up", &l.w_up),
                ("mlp.w_down", &l.w_down),
            ] {
                out.push((format!("layers.{i}.{suffix}"), t));
            }
        }
        out.push(("ln_f.gamma".into(), &self.ln_f_gamma));
        out.push(("ln_f.beta".into(), &self.ln_f_beta));
        out
    }

    /// Teacher-style forward: logits for every position, `[T x vocab]`.
    pub fn forward(&self, tokens: &[usize], train_flag: bool, dropout_seed: u64) -> Result<Tensor> {
        let mut g = GradGraph::new();
        let logits = build_forward(&mut g, self, None, tokens, train_flag, dropout_seed)?;
        Ok(g.value(logits))
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("positive width")
}

/// Graph handles for one adapter's trainable pair, aligned with
/// `AdaptedModel::adapters` order.
#[derive(Debug, Clone, Copy)]
pub struct AdapterNodes {
    pub a: NodeId,
    pub b: NodeId,
}

/// One recorded student forward: the tape, the logits node, and the leaf
/// handles gradients are read from after `backward`.
pub struct StudentForward {
    pub graph: GradGraph,
    pub logits: NodeId,
    pub adapter_nodes: Vec<AdapterNodes>,
}

const CAUSAL_MASK: f64 = -1e30;

/// Records the full forward computation on `g`. With `adapters`, the wrapped
/// projections get the low-rank bypass and each adapter's (A, B) leaves are
/// written into `nodes_out` at the adapter's own index.
pub(crate) fn build_forward(
    g: &mut GradGraph,
    w: &TransformerWeights,
    adapters: Option<(&[LoraAdapter], &mut Vec<Option<AdapterNodes>>)>,
    tokens: &[usize],
    train_flag: bool,
    dropout_seed: u64,
) -> Result<NodeId> {
    let cfg = &w.config;
    if tokens.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(ModelError::ContextWindowExceeded { len: tokens.len(), max: cfg.max_seq_len });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange { id: bad, vocab: cfg.vocab_size });
    }

    let (adapter_list, mut nodes_out) = match adapters {
        Some((list, out)) => {
            out.clear();
            out.resize(list.len(), None);
            (list, Some(out))
        }
        None => (&[][..], None),
    };
    let adapter_at = |layer: usize, proj: ProjKind| -> Option<usize> {
        adapter_list
            .iter()
            .position(|a| a.target.layer == layer && a.target.proj == proj)
    };

    let t_len = tokens.len();
    let p = cfg.dropout_p;
    let mut site: u64 = 0;
    let mut next_seed = || {
        site += 1;
        derive_seed(dropout_seed, site)
    };

    let emb = g.constant(&w.tok_emb);
    let pos = g.constant(&w.pos_emb);
    let tok_e = g.embedding(emb, tokens)?;
    let pos_ids: Vec<usize> = (0..t_len).collect();
    let pos_e = g.embedding(pos, &pos_ids)?;
    let mut h = g.add(tok_e, pos_e)?;
    h = g.dropout(h, p, next_seed(), train_flag)?;

    let mask = causal_mask(t_len);
    let mask_node = g.constant(&mask);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    for (li, layer) in w.layers.iter().enumerate() {
        let ln1g = g.constant(&layer.ln1_gamma);
        let ln1b = g.constant(&layer.ln1_beta);
        let x1 = g.layer_norm(h, ln1g, ln1b)?;

        let mut project = |g: &mut GradGraph,
                           weight: &Tensor,
                           proj: ProjKind,
                           nodes_out: &mut Option<&mut Vec<Option<AdapterNodes>>>|
         -> Result<NodeId> {
            let wc = g.constant(weight);
            let wt = g.transpose(wc)?;
            let mut y = g.matmul(x1, wt)?;
            if let Some(idx) = adapter_at(li, proj) {
                let ad = &adapter_list[idx];
                let a = g.leaf(&ad.a);
                let b = g.leaf(&ad.b);
                let at = g.transpose(a)?;
                let bt = g.transpose(b)?;
                let xa = g.matmul(x1, at)?;
                let xab = g.matmul(xa, bt)?;
                let bypass = g.scale(xab, ad.alpha / ad.rank as f64)?;
                y = g.add(y, bypass)?;
                if let Some(out) = nodes_out.as_mut() {
                    out[idx] = Some(AdapterNodes { a, b });
                }
            }
            Ok(y)
        };

        let q = project(g, &layer.wq, ProjKind::Q, &mut nodes_out)?;
        let k = project(g, &layer.wk, ProjKind::K, &mut nodes_out)?;
        let v = project(g, &layer.wv, ProjKind::V, &mut nodes_out)?;

        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hh in 0..cfg.n_heads {
            let qh = g.slice_cols(q, hh * dh, dh)?;
            let kh = g.slice_cols(k, hh * dh, dh)?;
            let vh = g.slice_cols(v, hh * dh, dh)?;
            let kt = g.transpose(kh)?;
            let mut s = g.matmul(qh, kt)?;
            s = g.scale(s, scale)?;
            s = g.add(s, mask_node)?;
            let mut att = g.softmax_lastdim(s)?;
            att = g.dropout(att, p, next_seed(), train_flag)?;
            heads.push(g.matmul(att, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let wo = g.constant(&layer.wo);
        let wo_t = g.transpose(wo)?;
        let mut o = g.matmul(cat, wo_t)?;
        o = g.dropout(o, p, next_seed(), train_flag)?;
        h = g.add(h, o)?;

        let ln2g = g.constant(&layer.ln2_gamma);
        let ln2b = g.constant(&layer.ln2_beta);
        let x2 = g.layer_norm(h, ln2g, ln2b)?;
        let up = g.constant(&layer.w_up);
        let up_t = g.transpose(up)?;
        let mut m = g.matmul(x2, up_t)?;
        m = g.gelu(m)?;
        let down = g.constant(&layer.w_down);
        let down_t = g.transpose(down)?;
        m = g.matmul(m, down_t)?;
        m = g.dropout(m, p, next_seed(), train_flag)?;
        h = g.add(h, m)?;
    }

    let lnfg = g.constant(&w.ln_f_gamma);
    let lnfb = g.constant(&w.ln_f_beta);
    let hf = g.layer_norm(h, lnfg, lnfb)?;
    let emb_t = g.transpose(emb)?;
    let logits = g.matmul(hf, emb_t)?;
    Ok(logits)
}

fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = CAUSAL_MASK;
        }
    }
    Tensor::new(vec![t, t], data).expect("mask entries are finite")
}

/// Row `T-1` of a `[T x vocab]` logits matrix: the distribution the label is
/// read from.
pub fn last_token_logits(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(ModelError::Tensor(TensorError::Contract {
            op: "last_token_logits",
            detail: format!("expected 2-D logits, got {:?}", logits.shape()),
        }));
    }
    let (t, v) = (logits.shape()[0], logits.shape()[1]);
    let row = logits.data()[(t - 1) * v..t * v].to_vec();
    Ok(Tensor::new(vec![v], row)?)
}
