//! Core library for `cibi`, a desk-scale laboratory for studying and removing
//! language bias in synthetic VQA-style data.
//!
//! The crate is organised around a small causal data generator and a training
//! scheme with two optional debiasing branches:
//!
//! * [`scm`] builds datasets from an explicit structural causal model with a
//!   discrete confounder, and exposes exact observational and interventional
//!   answer distributions as oracles.
//! * [`bias`] measures token/answer co-occurrence and selects keywords by
//!   mutual information.
//! * [`counterfactual`] produces synonym-swap, structure-swap, and masked
//!   question variants used by the debiasing branches.
//! * [`nn`] is a minimal reverse-mode engine for the fixed model family
//!   (embedding mean, affine+tanh encoders, Hadamard fusion, linear head,
//!   and a sigmoid question-only branch).
//! * [`objectives`] holds the loss functions: cross-entropy, the contrastive
//!   loss over counterfactual positives, the question-only loss, and the
//!   debiased fusion loss.
//! * [`trainer`] runs deterministic mini-batch training with Adam and
//!   checkpointing.
//! * [`eval`] computes accuracy, per-pattern distribution recovery, and
//!   alignment against the interventional oracle, plus ablation and sweep
//!   drivers.

pub mod bias;
pub mod counterfactual;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod objectives;
pub mod rngutil;
pub mod scm;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
