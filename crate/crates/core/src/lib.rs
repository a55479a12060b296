//! Metadata-guided contrastive learning of MRI contrast representations.
//!
//! The pipeline reads acquisition metadata ([`ingest`]), groups acquisitions
//! into contrast-aware labels ([`labels`]), renders metadata as text
//! ([`prompt`]), trains a small image/text dual encoder with a bidirectional
//! supervised contrastive loss ([`model`], [`loss`]) on physics-based
//! synthetic data ([`synth`]), and evaluates retrieval, linear probing and
//! per-tag errors ([`eval`]). [`pipeline`] wires the steps into commands.

#![allow(clippy::needless_range_loop)]

pub mod eval;
pub mod ingest;
pub mod labels;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod synth;
