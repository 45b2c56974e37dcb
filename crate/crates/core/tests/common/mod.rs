#![allow(dead_code)]

pub mod oracles;

use dga::dataset::{dataset_vocabulary, prepare_all, PreparedScene, SceneRecord};
use dga::synth::{generate_dataset, SynthConfig};
use dga::geometry::{BoundingBox, ObjectProposal, VisualGraph};
use dga::language::{Expression, Vocabulary};
use dga::model::{DgaModel, ModelConfig};
use dga::reasoning::EdgeIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_vocab() -> Vocabulary {
    Vocabulary::from_tokens(["the", "red", "blue", "circle", "square", "left", "of", "above"])
}

/// Small widths so exhaustive finite differences stay cheap.
pub fn tiny_config(vocab: &Vocabulary, visual_dim: usize, steps: usize) -> ModelConfig {
    let mut c = ModelConfig::new(vocab.len(), visual_dim);
    c.embed_dim = 4;
    c.hidden_dim = 3;
    c.spatial_dim = 3;
    c.node_dim = 5;
    c.attn_dim = 4;
    c.match_dim = 4;
    c.steps = steps;
    c
}

pub fn tiny_model(seed: u64, visual_dim: usize, steps: usize) -> DgaModel {
    let vocab = tiny_vocab();
    let cfg = tiny_config(&vocab, visual_dim, steps);
    DgaModel::init(cfg, vocab, seed).unwrap()
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let w = rng.gen_range(0.05..0.5);
    let h = rng.gen_range(0.05..0.5);
    BoundingBox {
        cx: rng.gen_range(w / 2.0..1.0 - w / 2.0),
        cy: rng.gen_range(h / 2.0..1.0 - h / 2.0),
        w,
        h,
    }
}

pub fn random_graph(rng: &mut ChaCha8Rng, k: usize, visual_dim: usize) -> VisualGraph {
    let proposals = (0..k)
        .map(|_| ObjectProposal {
            bbox: random_box(rng),
            visual_feature: (0..visual_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect();
    VisualGraph::build(proposals).unwrap()
}

/// Random token ids, avoiding the reserved ids.
pub fn random_expression(rng: &mut ChaCha8Rng, vocab: &Vocabulary, len: usize) -> Expression {
    let ids = (0..len).map(|_| rng.gen_range(2..vocab.len())).collect();
    Expression::new(ids, 20).unwrap()
}

/// Overwrites every element of the named parameter.
pub fn fill(model: &mut DgaModel, name: &str, value: f64) {
    let id = model.store.require(name).unwrap();
    model.store.value_mut(id).data_mut().fill(value);
}

pub fn scale(model: &mut DgaModel, name: &str, factor: f64) {
    let id = model.store.require(name).unwrap();
    model.store.value_mut(id).data_mut().iter_mut().for_each(|x| *x *= factor);
}

/// Random scene with `k` boxes and an `len`-word expression for `model`.
pub fn random_scene(rng: &mut ChaCha8Rng, model: &DgaModel, k: usize, len: usize) -> PreparedScene {
    let graph = random_graph(rng, k, model.config.visual_dim);
    PreparedScene {
        edges: EdgeIndex::new(&graph),
        graph,
        expression: random_expression(rng, &model.vocab, len),
        gt: rng.gen_range(0..k),
        depth: None,
        gt_box: None,
    }
}

/// Synthetic records with the default generator settings.
pub fn synth_records(count: usize, mix: &[f64], seed: u64) -> Vec<SceneRecord> {
    let cfg = SynthConfig::default();
    generate_dataset(count, mix, seed, &cfg)
        .unwrap()
        .iter()
        .map(|s| s.to_record())
        .collect()
}

/// Widths small enough for a few thousand training passes per test.
pub fn small_config(vocab: &Vocabulary, visual_dim: usize, steps: usize) -> ModelConfig {
    let mut c = ModelConfig::new(vocab.len(), visual_dim);
    c.embed_dim = 16;
    c.hidden_dim = 16;
    c.spatial_dim = 8;
    c.node_dim = 32;
    c.attn_dim = 16;
    c.match_dim = 32;
    c.steps = steps;
    c
}

/// Model over the records' vocabulary plus the prepared scenes.
pub fn small_setup(records: &[SceneRecord], steps: usize, seed: u64) -> (DgaModel, Vec<PreparedScene>) {
    let vocab = dataset_vocabulary(records);
    let dv = records[0].feature_dim();
    let model = DgaModel::init(small_config(&vocab, dv, steps), vocab.clone(), seed).unwrap();
    let scenes = prepare_all(records, &vocab, dv, dga::language::MAX_LEN).unwrap();
    (model, scenes)
}
