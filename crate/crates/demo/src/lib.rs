//! WebAssembly bindings for the browser demo. Every export takes and returns
//! JSON strings; the plain `*_json` functions hold the logic so they can be
//! tested natively.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use dga::dataset::{PreparedScene, SceneRecord};
use dga::geometry::{classify_boxes, BoundingBox, EdgeType};
use dga::language::Vocabulary;
use dga::model::{DgaModel, ModelConfig};
use dga::synth::{self, SynthConfig};
use dga::trace::trace_scene;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EdgeMatrix {
    pub codes: Vec<Vec<u8>>,
    pub labels: Vec<Vec<String>>,
}

pub fn edge_matrix_json(boxes_json: &str) -> Result<String, String> {
    let boxes: Vec<BoundingBox> = serde_json::from_str(boxes_json).map_err(|e| e.to_string())?;
    for b in &boxes {
        b.validate().map_err(|e| e.to_string())?;
    }
    let codes: Vec<Vec<EdgeType>> = boxes
        .iter()
        .enumerate()
        .map(|(i, a)| {
            boxes
                .iter()
                .enumerate()
                .map(|(j, b)| if i == j { EdgeType::NONE } else { classify_boxes(a, b) })
                .collect()
        })
        .collect();
    let out = EdgeMatrix {
        labels: codes.iter().map(|r| r.iter().map(|e| e.label().to_string()).collect()).collect(),
        codes: codes.iter().map(|r| r.iter().map(|e| e.code()).collect()).collect(),
    };
    Ok(serde_json::to_string(&out).expect("edge matrix serializes"))
}

pub fn generate_scene_json(seed: u32, k: u32, depth: u32) -> Result<String, String> {
    let cfg = SynthConfig {
        objects: k as usize,
        ..SynthConfig::default()
    };
    let mut rng = synth::scene_rng(u64::from(seed), 0);
    let scene = synth::generate_sample(&mut rng, &cfg, depth as usize).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&scene.to_record()).expect("scene serializes"))
}

/// Untrained network over the template lexicon, for running without a checkpoint.
fn untrained_model(visual_dim: usize) -> Result<DgaModel, String> {
    let vocab = Vocabulary::from_tokens(synth::lexicon());
    let mut cfg = ModelConfig::new(vocab.len(), visual_dim);
    cfg.node_dim = 32;
    cfg.match_dim = 32;
    cfg.embed_dim = 16;
    cfg.hidden_dim = 16;
    cfg.attn_dim = 16;
    DgaModel::init(cfg, vocab, 0).map_err(|e| e.to_string())
}

/// Runs the network on a scene record; an empty checkpoint means untrained weights.
pub fn trace_json(scene_json: &str, checkpoint: &[u8]) -> Result<String, String> {
    let record: SceneRecord = serde_json::from_str(scene_json).map_err(|e| e.to_string())?;
    record.validate()?;
    let model = if checkpoint.is_empty() {
        untrained_model(record.feature_dim())?
    } else {
        DgaModel::load(checkpoint).map_err(|e| e.to_string())?
    };
    let scene = PreparedScene::new(&record, &model.vocab, model.config.visual_dim, model.config.max_len)
        .map_err(|e| e.to_string())?;
    let trace = trace_scene(&model, &scene).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&trace).expect("trace serializes"))
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// Edge codes and labels for every ordered pair of `[{cx, cy, w, h}, ...]`.
#[wasm_bindgen]
pub fn edge_matrix(boxes_json: &str) -> Result<String, JsValue> {
    js(edge_matrix_json(boxes_json))
}

#[wasm_bindgen]
pub fn generate_scene(seed: u32, k: u32, depth: u32) -> Result<String, JsValue> {
    js(generate_scene_json(seed, k, depth))
}

#[wasm_bindgen]
pub fn trace(scene_json: &str, checkpoint: &[u8]) -> Result<String, JsValue> {
    js(trace_json(scene_json, checkpoint))
}
