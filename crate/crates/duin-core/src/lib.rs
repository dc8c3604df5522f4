//! DUIN: a trigger-induced recommendation model, desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine, the intent
//! modules that make up the model, a data pipeline with a synthetic session
//! generator, training/evaluation tooling, and an ablation bench. The `duin`
//! binary exposes all of it as a CLI.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod explicit_intent;
pub mod intent_uncertainty;
pub mod latent_intent;
pub mod embedding;
pub mod graph;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;
