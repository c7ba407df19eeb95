//! Core library for a desk-scale knowledge-grounded dialogue system:
//! tokenizer, transformer, training loop, retrieval index, inference
//! pipeline, and evaluation tooling, built on a small reverse-mode
//! autodiff engine.

pub mod corpus;
pub mod evaluation;
pub mod inference;
pub mod knowledge_store;
pub mod model;
pub mod numerics;
pub mod tokenizer;
pub mod training;
