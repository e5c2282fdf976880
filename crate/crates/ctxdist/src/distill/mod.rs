//! Teacher-student distillation: KL loss at the final position, AdamW with
//! linear-warmup-then-constant scheduling, LoRA-only updates, and the
//! experiment-matrix planner.

mod optim;
mod runner;

pub use optim::{adamw_step, lr_at, total_steps, warmup_steps, TrainerState};
pub use runner::{distill_run, RunOutcome};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{DataError, TaskSpec};
use crate::model::{LoraConfig, ModelError, ProjKind, SizeTag};
use crate::seeds::derive_seed;
use crate::tensor::{GradGraph, NodeId, Tensor, TensorError};
use crate::text::TextError;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, DistillError>;

fn default_lr() -> f64 {
    1e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_warmup_ratio() -> f64 {
    0.10
}
fn default_weight_decay() -> f64 {
    0.0
}
fn default_dropout() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    20
}
fn default_lora_rank() -> usize {
    8
}
fn default_lora_alpha() -> f64 {
    8.0
}
fn default_lora_targets() -> Vec<ProjKind> {
    vec![ProjKind::Q, ProjKind::V]
}
fn default_cache_teacher() -> bool {
    false
}

/// The full training hyperparameter bundle. Defaults are the published
/// fine-tuning settings; every field can be overridden from config or flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Warmup fraction of total steps; linear ramp, then constant.
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lora_rank")]
    pub lora_rank: usize,
    #[serde(default = "default_lora_alpha")]
    pub lora_alpha: f64,
    #[serde(default = "default_lora_targets")]
    pub lora_targets: Vec<ProjKind>,
    /// The dropout-free teacher makes its logits constant across epochs, so
    /// caching them is a pure optimization; the reference path recomputes.
    #[serde(default = "default_cache_teacher")]
    pub cache_teacher: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            warmup_ratio: default_warmup_ratio(),
            weight_decay: default_weight_decay(),
            dropout: default_dropout(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            lora_rank: default_lora_rank(),
            lora_alpha: default_lora_alpha(),
            lora_targets: default_lora_targets(),
            cache_teacher: default_cache_teacher(),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(DistillError::Contract("batch_size and epochs must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.warmup_ratio) {
            return Err(DistillError::Contract(format!(
                "warmup_ratio {} outside [0, 0.5]",
                self.warmup_ratio
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DistillError::Contract(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DistillError::Contract(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn lora_config(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
            targets: self.lora_targets.clone(),
        }
    }
}

/// Independent RNG streams for one run. Same struct, same run — the config
/// hash covers all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    /// Context-set and inference-request draws (shared by all runs of one
    /// (task, n) so every model size trains against the same sets).
    pub sampling: u64,
    /// Teacher weight init (shared by all runs of one model size — one
    /// "pretrained" teacher per size).
    pub init: u64,
    /// Adapter A init, unique per run.
    pub adapter: u64,
    /// Per-step student dropout stream, unique per run.
    pub dropout: u64,
    /// Eval-set draws, fixed per task so every run of a task is scored on
    /// the same 100 examples.
    pub eval: u64,
}

/// Everything that determines one distillation run. Serializable and
/// hash-addressable; the hash keys resumability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub size: SizeTag,
    pub n: usize,
    pub context_set_index: usize,
    pub seeds: RunSeeds,
    pub hyperparams: Hyperparams,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.hyperparams.validate()?;
        if self.n == 0 {
            return Err(DistillError::Contract("n must be positive".into()));
        }
        if self.context_set_index >= crate::data::CONTEXT_SETS_PER_N {
            return Err(DistillError::Contract(format!(
                "context_set_index {} out of range",
                self.context_set_index
            )));
        }
        Ok(())
    }

    /// Content hash over the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex::encode(h.finalize())
    }
}

/// KL(softmax(teacher) || softmax(student)) over one final-position logit
/// row, computed in log space: sum p_t * (log p_t - log p_s). Value-only
/// variant; the graph variant below feeds training.
pub fn kl_last_token(teacher: &Tensor, student: &Tensor) -> Result<f64> {
    check_logit_rows(teacher.shape(), student.shape())?;
    let lt = crate::tensor::log_softmax_slice(teacher.data());
    let ls = crate::tensor::log_softmax_slice(student.data());
    Ok(lt.iter().zip(&ls).map(|(lt, ls)| lt.exp() * (lt - ls)).sum())
}

fn check_logit_rows(t: &[usize], s: &[usize]) -> Result<()> {
    if t.len() != 1 || s.len() != 1 || t[0] != s[0] {
        return Err(DistillError::Tensor(TensorError::Shape {
            op: "kl_last_token",
            detail: format!("expected matching 1-D logit rows, got {t:?} vs {s:?}"),
        }));
    }
    Ok(())
}

/// Graph form of [`kl_last_token`]: the teacher row enters as constants (no
/// gradient flows to it), the student row is a live node. Identical logits
/// produce exactly zero because both sides run the same log-softmax path.
pub fn kl_last_token_node(
    g: &mut GradGraph,
    teacher: &Tensor,
    student_row: NodeId,
) -> Result<NodeId> {
    check_logit_rows(teacher.shape(), g.shape_of(student_row))?;
    let lt_vals = crate::tensor::log_softmax_slice(teacher.data());
    let pt_vals: Vec<f64> = lt_vals.iter().map(|v| v.exp()).collect();
    let width = teacher.shape()[0];
    let lt = g.constant(&Tensor::new(vec![width], lt_vals)?);
    let pt = g.constant(&Tensor::new(vec![width], pt_vals)?);
    let ls = g.log_softmax_lastdim(student_row)?;
    let neg_ls = g.scale(ls, -1.0)?;
    let diff = g.add(lt, neg_ls)?;
    let terms = g.mul(pt, diff)?;
    Ok(g.sum_all(terms)?)
}

/// Per-task n values paired with a task; the planner takes feasibility as
/// given by the caller and crosses everything else.
pub type TaskPlan = (TaskSpec, Vec<usize>);

/// Cross product of tasks x their n values x context sets x model sizes, in
/// deterministic task-major order. Seeds are derived from `master_seed` such
/// that all sizes of one (task, n) share sampling, all runs of one size share
/// the teacher init, and every run gets private adapter/dropout streams.
pub fn plan_experiment_matrix(
    tasks: &[TaskPlan],
    sizes: &[SizeTag],
    sets_per_n: usize,
    master_seed: u64,
    hyperparams: &Hyperparams,
) -> Vec<RunConfig> {
    let mut plan = Vec::new();
    for (task_idx, (task, ns)) in tasks.iter().enumerate() {
        let task_stream = derive_seed(master_seed, 0x10_0000 + task_idx as u64);
        for &n in ns {
            let sampling = derive_seed(task_stream, n as u64);
            for set_index in 0..sets_per_n {
                for (size_idx, &size) in sizes.iter().enumerate() {
                    let run_stream = derive_seed(
                        sampling,
                        (set_index as u64) << 32 | size_idx as u64,
                    );
                    plan.push(RunConfig {
                        task: task.clone(),
                        size,
                        n,
                        context_set_index: set_index,
                        seeds: RunSeeds {
                            sampling,
                            init: derive_seed(master_seed, 0x20_0000 + size_idx as u64),
                            adapter: derive_seed(run_stream, 1),
                            dropout: derive_seed(run_stream, 2),
                            eval: derive_seed(master_seed, 0x30_0000 + task_idx as u64),
                        },
                        hyperparams: hyperparams.clone(),
                    });
                }
            }
        }
    }
    plan
}
