//! Low-rank adapter pairs over frozen attention projections.
//!
//! Each adapter contributes `(alpha/r) * B A` on top of one projection. A is
//! Gaussian-initialized, B starts at zero, so a fresh student is numerically
//! identical to its teacher — the distillation loss starts from exact
//! agreement and every later difference is attributable to training.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{matmul_raw, GradGraph, Tensor};

use super::{
    build_forward, AdapterNodes, ModelConfig, ModelError, Result, StudentForward,
    TransformerWeights,
};

/// Which attention projection an adapter wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjKind {
    Q,
    K,
    V,
    O,
}

impl ProjKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProjKind::Q => "q",
            ProjKind::K => "k",
            ProjKind::V => "v",
            ProjKind::O => "o",
        }
    }
}

impl FromStr for ProjKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "q" => Ok(ProjKind::Q),
            "k" => Ok(ProjKind::K),
            "v" => Ok(ProjKind::V),
            "o" => Ok(ProjKind::O),
            other => Err(format!("unknown projection '{other}' (expected q|k|v|o)")),
        }
    }
}

impl std::fmt::Display for ProjKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// (layer, projection) address of one wrapped matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AdapterTarget {
    pub layer: usize,
    pub proj: ProjKind,
}

/// Adapter hyperparameters. Defaults: rank 8 on q and v, alpha = rank so the
/// bypass scale is exactly 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<ProjKind>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 8, alpha: 8.0, targets: vec![ProjKind::Q, ProjKind::V] }
    }
}

impl LoraConfig {
    /// All wrapped projections are square `[d_model x d_model]`, so the rank
    /// bound is `rank < d_model`.
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(ModelError::Adapter("rank must be positive".into()));
        }
        if self.rank >= d_model {
            return Err(ModelError::Adapter(format!(
                "rank {} must be < d_model {}",
                self.rank, d_model
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ModelError::Adapter(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.targets.is_empty() {
            return Err(ModelError::Adapter("targets must not be empty".into()));
        }
        for (i, t) in self.targets.iter().enumerate() {
            if self.targets[..i].contains(t) {
                return Err(ModelError::Adapter(format!("duplicate target '{t}'")));
            }
        }
        Ok(())
    }
}

/// One trainable rank-decomposition pair.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub target: AdapterTarget,
    /// `[rank x d_in]`, Gaussian-initialized.
    pub a: Tensor,
    /// `[d_out x rank]`, zero-initialized.
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

const ADAPTER_INIT_STD: f64 = 0.02;

/// Frozen base plus trainable adapters: the student. The base is shared
/// read-only; training updates only the adapter pairs.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    base: TransformerWeights,
    adapters: Vec<LoraAdapter>,
}

impl AdaptedModel {
    /// Wraps `cfg.targets` in every layer. Adapter order is layer-major,
    /// then target order as given in the config.
    pub fn new(base: TransformerWeights, cfg: &LoraConfig, seed: u64) -> Result<Self> {
        let d = base.config().d_model;
        cfg.validate(d)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adapters = Vec::with_capacity(base.config().n_layers * cfg.targets.len());
        for layer in 0..base.config().n_layers {
            for &proj in &cfg.targets {
                adapters.push(LoraAdapter {
                    target: AdapterTarget { layer, proj },
                    a: Tensor::randn(vec![cfg.rank, d], ADAPTER_INIT_STD, &mut rng).trainable(),
                    b: Tensor::zeros(&[d, cfg.rank]).trainable(),
                    rank: cfg.rank,
                    alpha: cfg.alpha,
                });
            }
        }
        let model = AdaptedModel { base, adapters };
        if model.trainable_parameter_count() >= model.base.parameter_count() {
            return Err(ModelError::Adapter(format!(
                "adapter parameters ({}) must stay below base parameters ({})",
                model.trainable_parameter_count(),
                model.base.parameter_count()
            )));
        }
        Ok(model)
    }

    /// Reassembles a model from checkpointed parts. Validates every adapter
    /// against the base shape.
    pub fn from_parts(base: TransformerWeights, adapters: Vec<LoraAdapter>) -> Result<Self> {
        let cfg = base.config().clone();
        for ad in &adapters {
            validate_adapter(&cfg, ad)?;
        }
        Ok(AdaptedModel { base, adapters })
    }

    pub fn base(&self) -> &TransformerWeights {
        &self.base
    }

    pub fn config(&self) -> &ModelConfig {
        self.base.config()
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    /// Mutable adapter access for the optimizer; the base stays untouchable.
    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.adapters
    }

    /// `sum r * (d_in + d_out)` over adapters.
    pub fn trainable_parameter_count(&self) -> usize {
        self.adapters.iter().map(|a| a.a.numel() + a.b.numel()).sum()
    }

    /// Student forward, values only.
    pub fn forward(&self, tokens: &[usize], train_flag: bool, dropout_seed: u64) -> Result<Tensor> {
        let mut g = GradGraph::new();
        let mut nodes = Vec::new();
        let logits = build_forward(
            &mut g,
            &self.base,
            Some((&self.adapters, &mut nodes)),
            tokens,
            train_flag,
            dropout_seed,
        )?;
        Ok(g.value(logits))
    }

    /// Student forward keeping the tape for a backward pass. The returned
    /// adapter handles are index-aligned with [`Self::adapters`].
    pub fn forward_graph(
        &self,
        tokens: &[usize],
        train_flag: bool,
        dropout_seed: u64,
    ) -> Result<StudentForward> {
        let mut g = GradGraph::new();
        let mut nodes = Vec::new();
        let logits = build_forward(
            &mut g,
            &self.base,
            Some((&self.adapters, &mut nodes)),
            tokens,
            train_flag,
            dropout_seed,
        )?;
        let adapter_nodes: Vec<AdapterNodes> = nodes
            .into_iter()
            .enumerate()
            .map(|(i, n)| {
                n.unwrap_or_else(|| panic!("adapter {i} targets a layer outside the model"))
            })
            .collect();
        Ok(StudentForward { graph: g, logits, adapter_nodes })
    }

    /// Folds every adapter into a standalone weight set:
    /// `W' = W + (alpha/r) * B A` per wrapped projection. `self` is unchanged.
    pub fn merge_adapters(&self) -> TransformerWeights {
        let mut merged = self.base.clone();
        for ad in &self.adapters {
            let d_out = ad.b.shape()[0];
            let d_in = ad.a.shape()[1];
            let delta = matmul_raw(ad.b.data(), ad.a.data(), d_out, ad.rank, d_in);
            let scale = ad.alpha / ad.rank as f64;
            let layer = &mut merged.layers[ad.target.layer];
            let w = match ad.target.proj {
                ProjKind::Q => &mut layer.wq,
                ProjKind::K => &mut layer.wk,
                ProjKind::V => &mut layer.wv,
                ProjKind::O => &mut layer.wo,
            };
            for (wv, dv) in w.data_mut().iter_mut().zip(&delta) {
                *wv += scale * dv;
            }
        }
        merged
    }
}

pub(super) fn validate_adapter(cfg: &ModelConfig, ad: &LoraAdapter) -> Result<()> {
    if ad.target.layer >= cfg.n_layers {
        return Err(ModelError::Adapter(format!(
            "adapter targets layer {} but model has {} layers",
            ad.target.layer, cfg.n_layers
        )));
    }
    let d = cfg.d_model;
    if ad.rank == 0 || ad.rank >= d {
        return Err(ModelError::Adapter(format!("rank {} invalid for d_model {d}", ad.rank)));
    }
    if ad.a.shape() != [ad.rank, d] || ad.b.shape() != [d, ad.rank] {
        return Err(ModelError::Adapter(format!(
            "adapter shapes a={:?} b={:?} incompatible with rank {} and d_model {d}",
            ad.a.shape(),
            ad.b.shape(),
            ad.rank
        )));
    }
    if !(ad.alpha > 0.0 && ad.alpha.is_finite()) {
        return Err(ModelError::Adapter(format!("alpha must be positive, got {}", ad.alpha)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_base(seed: u64) -> TransformerWeights {
        let cfg = ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 12,
            dropout_p: 0.1,
        };
        TransformerWeights::init(cfg, seed).unwrap()
    }

    fn randomize_adapters(m: &mut AdaptedModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for ad in m.adapters_mut() {
            for v in ad.a.data_mut() {
                *v = rng.gen::<f64>() - 0.5;
            }
            for v in ad.b.data_mut() {
                *v = rng.gen::<f64>() - 0.5;
            }
        }
    }

    #[test]
    fn config_validation_catches_bad_setups() {
        let d = 8;
        assert!(LoraConfig { rank: 0, ..Default::default() }.validate(d).is_err());
        assert!(LoraConfig { rank: 8, ..Default::default() }.validate(d).is_err());
        assert!(LoraConfig { rank: 2, alpha: 0.0, ..Default::default() }.validate(d).is_err());
        assert!(LoraConfig { rank: 2, alpha: 2.0, targets: vec![] }.validate(d).is_err());
        assert!(LoraConfig { rank: 2, alpha: 2.0, targets: vec![ProjKind::Q, ProjKind::Q] }
            .validate(d)
            .is_err());
        LoraConfig { rank: 2, alpha: 2.0, targets: vec![ProjKind::Q, ProjKind::V] }
            .validate(d)
            .unwrap();
    }

    #[test]
    fn default_targets_every_layer_q_and_v() {
        let m = AdaptedModel::new(tiny_base(1), &LoraConfig { rank: 2, ..Default::default() }, 5)
            .unwrap();
        let targets: Vec<_> = m.adapters().iter().map(|a| a.target).collect();
        assert_eq!(
            targets,
            vec![
                AdapterTarget { layer: 0, proj: ProjKind::Q },
                AdapterTarget { layer: 0, proj: ProjKind::V },
                AdapterTarget { layer: 1, proj: ProjKind::Q },
                AdapterTarget { layer: 1, proj: ProjKind::V },
            ]
        );
        // sum r*(d_in+d_out) = 4 adapters * 2*(8+8)
        assert_eq!(m.trainable_parameter_count(), 4 * 2 * 16);
        assert!(m.trainable_parameter_count() < m.base().parameter_count());
    }

    #[test]
    fn zero_init_student_equals_teacher_exactly() {
        let base = tiny_base(2);
        let m = AdaptedModel::new(base.clone(), &LoraConfig { rank: 2, ..Default::default() }, 3)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let len = rng.gen_range(1..=12);
            let toks: Vec<usize> = (0..len).map(|_| rng.gen_range(0..11)).collect();
            let teacher = base.forward(&toks, false, 0).unwrap();
            let student = m.forward(&toks, false, 0).unwrap();
            assert_eq!(teacher.data(), student.data());
        }
    }

    #[test]
    fn adapted_forward_matches_merged_forward() {
        let base = tiny_base(5);
        let mut m =
            AdaptedModel::new(base, &LoraConfig { rank: 3, alpha: 6.0, ..Default::default() }, 6)
                .unwrap();
        randomize_adapters(&mut m, 7);
        let merged = m.merge_adapters();
        let toks = [0usize, 4, 9, 2, 10, 1];
        let via_adapters = m.forward(&toks, false, 0).unwrap();
        let via_merge = merged.forward(&toks, false, 0).unwrap();
        let max_diff = via_adapters
            .data()
            .iter()
            .zip(via_merge.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-8, "max diff {max_diff}");
    }

    #[test]
    fn merge_with_zero_b_is_identity() {
        let base = tiny_base(8);
        let m = AdaptedModel::new(base.clone(), &LoraConfig { rank: 2, ..Default::default() }, 9)
            .unwrap();
        let merged = m.merge_adapters();
        for ((na, ta), (nb, tb)) in base.named_tensors().iter().zip(merged.named_tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "tensor {na} changed under zero-B merge");
        }
    }

    #[test]
    fn merge_delta_has_rank_at_most_r() {
        let base = tiny_base(10);
        let d = base.config().d_model;
        let rank = 3;
        let mut m = AdaptedModel::new(
            base.clone(),
            &LoraConfig { rank, alpha: 3.0, ..Default::default() },
            11,
        )
        .unwrap();
        randomize_adapters(&mut m, 12);
        let merged = m.merge_adapters();
        for (base_l, merged_l) in base.layers.iter().zip(&merged.layers) {
            for (w0, w1) in [(&base_l.wq, &merged_l.wq), (&base_l.wv, &merged_l.wv)] {
                let delta: Vec<f64> =
                    w1.data().iter().zip(w0.data()).map(|(a, b)| a - b).collect();
                let mat = nalgebra::DMatrix::from_row_slice(d, d, &delta);
                let svd = mat.svd(false, false);
                let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
                sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
                assert!(sv[0] > 1e-6, "delta unexpectedly zero");
                for &s in &sv[rank..] {
                    assert!(s < 1e-9, "singular value {s} beyond rank {rank}");
                }
            }
        }
    }

    #[test]
    fn forward_graph_reaches_every_adapter() {
        let base = tiny_base(13);
        let mut m = AdaptedModel::new(base, &LoraConfig { rank: 2, ..Default::default() }, 14)
            .unwrap();
        randomize_adapters(&mut m, 15);
        let fwd = m.forward_graph(&[1usize, 2, 3], true, 42).unwrap();
        assert_eq!(fwd.adapter_nodes.len(), m.adapters().len());
        let mut g = fwd.graph;
        let loss = g.sum_all(fwd.logits).unwrap();
        let grads = g.backward(loss).unwrap();
        for an in &fwd.adapter_nodes {
            assert!(grads.get(an.a).is_some());
            assert!(grads.get(an.b).is_some());
        }
    }

    #[test]
    fn adapter_init_is_seed_deterministic() {
        let cfg = LoraConfig { rank: 2, ..Default::default() };
        let a = AdaptedModel::new(tiny_base(1), &cfg, 21).unwrap();
        let b = AdaptedModel::new(tiny_base(1), &cfg, 21).unwrap();
        let c = AdaptedModel::new(tiny_base(1), &cfg, 22).unwrap();
        for (x, y) in a.adapters().iter().zip(b.adapters()) {
            assert_eq!(x.a.data(), y.a.data());
            assert!(x.b.data().iter().all(|&v| v == 0.0));
        }
        assert_ne!(a.adapters()[0].a.data(), c.adapters()[0].a.data());
    }
}
