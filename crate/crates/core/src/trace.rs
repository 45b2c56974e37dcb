//! Per-step attention record of one forward pass.

use serde::{Deserialize, Serialize};

use crate::dataset::PreparedScene;
use crate::error::Result;
use crate::model::DgaModel;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    /// Word distribution, one entry per token.
    pub words: Vec<f64>,
    /// Node weights, one per proposal.
    pub nodes: Vec<f64>,
    /// Edge-type weights, index `n − 1` for type `n`.
    pub edge_types: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tokens: Vec<String>,
    pub steps: Vec<TraceStep>,
    pub scores: Vec<f64>,
    pub predicted: usize,
    pub gt: usize,
    /// Entity weight of each word.
    pub entity_weights: Vec<f64>,
    /// Resolved run configuration, echoed for reproducibility.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

pub fn trace_scene(model: &DgaModel, scene: &PreparedScene) -> Result<TraceRecord> {
    let mut tape = Tape::new(&model.store);
    let pass = model.forward(&mut tape, &scene.graph, &scene.edges, &scene.expression)?;
    let steps = pass
        .program
        .word_attention
        .iter()
        .zip(&pass.reasoning.weights)
        .enumerate()
        .map(|(i, (&r, w))| TraceStep {
            step: i + 1,
            words: tape.data(r).to_vec(),
            nodes: tape.data(w.nodes).to_vec(),
            edge_types: tape.data(w.edges).to_vec(),
        })
        .collect();
    let tokens = scene
        .expression
        .tokens()
        .iter()
        .map(|&id| model.vocab.token(id).unwrap_or("?").to_string())
        .collect();
    Ok(TraceRecord {
        tokens,
        steps,
        scores: tape.data(pass.matching.scores).to_vec(),
        predicted: pass.matching.predicted,
        gt: scene.gt,
        entity_weights: tape.data(pass.word_types.entity).to_vec(),
        config: None,
    })
}
