//! Grounds referring expressions with multi-step attention over a spatial relation graph.
//!
//! A scene is a set of object proposals connected by spatial relations. An
//! expression is encoded, decomposed into per-step word distributions, and
//! used to attend nodes and relation types over several message-passing
//! steps. The proposal whose final memory best matches the expression wins.

pub mod dataset;
pub mod error;
pub mod geometry;
pub mod language;
pub mod matching;
pub mod model;
pub mod reasoning;
pub mod static_attention;
pub mod synth;
pub mod tensor;
pub mod trace;
pub mod training;

pub use error::{DgaError, Result};
