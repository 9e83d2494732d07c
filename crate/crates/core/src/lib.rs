//! Precedent-conditioned guardrail engine.
//!
//! Labeled examples are turned into precedents (caption, label, rationale,
//! policy) by a critique-revise collection loop; at inference time the most
//! similar precedent is retrieved and its policy and rationale condition the
//! vision-language model's YES/NO verdict.

pub mod collector;
pub mod dataset;
pub mod embedding;
pub mod eval;
pub mod gateway;
pub mod image;
pub mod judge;
pub mod policy;
pub mod prompt;
pub mod retrieval;
pub mod retry;
pub mod service;
pub mod store;
pub mod synthetic;
