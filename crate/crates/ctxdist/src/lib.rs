//! Desk-scale context distillation for decoder-only language models.
//!
//! A frozen base transformer acting as teacher sees in-context examples plus a
//! query; a LoRA-adapted student sees only the query. The student is trained to
//! match the teacher's final-token distribution via KL divergence. The crate
//! carries the whole pipeline: a small f64 autodiff engine, the toy transformer
//! with LoRA adapters, prompt rendering and tokenization, dataset sampling with
//! leakage guarantees, the distillation trainer, and evaluation plus reporting.

pub mod cli;
pub mod data;
pub mod distill;
pub mod eval_report;
pub mod model;
pub mod seeds;
pub mod tensor;
pub mod text;
