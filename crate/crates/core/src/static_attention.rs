//! Expression-guided attention over the scene graph before any reasoning:
//! each word is split into entity and relation mass, entity mass is spread
//! over nodes, relation mass over edge types, and node features are fused
//! with the words that attend to them.

use crate::error::{DgaError, Result};
use crate::geometry::{VisualGraph, NUM_EDGE_TYPES};
use crate::tensor::{ParamId, ParameterStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct StaticParams {
    pub w_p: ParamId,
    pub w_z0: ParamId,
    pub b_z0: ParamId,
    pub w_z1: ParamId,
    pub b_z1: ParamId,
    pub w_a0: ParamId,
    pub w_a1: ParamId,
    pub w_a2: ParamId,
    pub w_b0: ParamId,
    pub b_b0: ParamId,
    pub w_b1: ParamId,
    pub b_b1: ParamId,
    pub w_m: ParamId,
    pub b_m: ParamId,
}

impl StaticParams {
    pub fn bind(store: &ParameterStore) -> Result<Self> {
        let r = |n: &str| store.require(n);
        Ok(StaticParams {
            w_p: r("spatial.w_p")?,
            w_z0: r("word_type.w_z0")?,
            b_z0: r("word_type.b_z0")?,
            w_z1: r("word_type.w_z1")?,
            b_z1: r("word_type.b_z1")?,
            w_a0: r("node_attn.w_a0")?,
            w_a1: r("node_attn.w_a1")?,
            w_a2: r("node_attn.w_a2")?,
            w_b0: r("edge_attn.w_b0")?,
            b_b0: r("edge_attn.b_b0")?,
            w_b1: r("edge_attn.w_b1")?,
            b_b1: r("edge_attn.b_b1")?,
            w_m: r("fuse.w_m")?,
            b_m: r("fuse.b_m")?,
        })
    }
}

/// Entity weight `z0` and relation weight `z1 = 1 − z0` per word, both length L.
#[derive(Clone, Copy, Debug)]
pub struct WordTypeGates {
    pub entity: Var,
    pub relation: Var,
}

impl WordTypeGates {
    /// L×2 matrix of `[z0, z1]` rows.
    pub fn matrix(&self, tape: &Tape) -> Vec<[f64; 2]> {
        tape.data(self.entity)
            .iter()
            .zip(tape.data(self.relation))
            .map(|(a, b)| [*a, *b])
            .collect()
    }
}

/// Node-word weights `alpha` (K×L), edge-type-word weights `beta` (11×L,
/// row `n−1` for type `n`) and per-node language context (K×E).
#[derive(Clone, Copy, Debug)]
pub struct StaticAttention {
    pub alpha: Var,
    pub beta: Var,
    pub context: Var,
}

/// The scene graph with expression-fused node features (K×D_m).
#[derive(Clone, Copy, Debug)]
pub struct MultimodalGraph<'g> {
    pub graph: &'g VisualGraph,
    pub features: Var,
}

/// `x^I_k = [visual feature; W_p · spatial_raw]`, one row per proposal.
pub fn assemble_node_features(tape: &mut Tape, p: &StaticParams, graph: &VisualGraph) -> Result<Var> {
    let k = graph.len();
    let visual: Vec<f64> = graph
        .proposals
        .iter()
        .flat_map(|o| o.visual_feature.iter().copied())
        .collect();
    let visual = tape.constant(Tensor::matrix(k, graph.feature_dim(), visual)?);
    let raw: Vec<f64> = graph.spatial_raw.iter().flatten().copied().collect();
    let raw = tape.constant(Tensor::matrix(k, 5, raw)?);
    let w_p = tape.param(p.w_p);
    let spatial = tape.matmul_t(raw, w_p)?;
    tape.concat_cols(&[visual, spatial])
}

pub fn word_type_gates(tape: &mut Tape, p: &StaticParams, words: Var) -> Result<WordTypeGates> {
    let len = tape.value(words).rows();
    let (w0, b0) = (tape.param(p.w_z0), tape.param(p.b_z0));
    let hidden = tape.linear(words, w0, Some(b0))?;
    let (w1, b1) = (tape.param(p.w_z1), tape.param(p.b_z1));
    let logit = tape.linear(hidden, w1, Some(b1))?;
    let logit = tape.reshape(logit, &[len])?;
    let entity = tape.sigmoid(logit);
    let relation = tape.affine(entity, -1.0, 1.0);
    Ok(WordTypeGates { entity, relation })
}

/// Softmax over nodes for each word, scaled by that word's entity weight.
/// `logits` is K×L; the result has the same layout.
pub fn weighted_node_softmax(tape: &mut Tape, logits: Var, entity: Var) -> Result<Var> {
    let per_word = tape.transpose(logits);
    let per_word = tape.softmax_rows(per_word);
    let per_word = tape.scale_rows(per_word, entity)?;
    Ok(tape.transpose(per_word))
}

/// Returns `(alpha, context)`.
pub fn node_word_attention(
    tape: &mut Tape,
    p: &StaticParams,
    node_features: Var,
    words: Var,
    gates: &WordTypeGates,
) -> Result<(Var, Var)> {
    let (k, l) = (tape.value(node_features).rows(), tape.value(words).rows());
    if k < 2 {
        return Err(DgaError::Scene(format!("node attention over {k} node(s)")));
    }
    let w_a1 = tape.param(p.w_a1);
    let w_a0 = tape.param(p.w_a0);
    let nodes = tape.matmul_t(node_features, w_a1)?;
    let word_keys = tape.matmul_t(words, w_a0)?;
    let pairs = tape.pairwise_add(nodes, word_keys)?;
    let pairs = tape.tanh(pairs);
    let w_a2 = tape.param(p.w_a2);
    let logits = tape.matmul_t(pairs, w_a2)?;
    let logits = tape.reshape(logits, &[k, l])?;
    let alpha = weighted_node_softmax(tape, logits, gates.entity)?;
    let context = tape.matmul(alpha, words)?;
    Ok((alpha, context))
}

/// 11×L relation-type weights; each column sums to the word's relation weight.
pub fn edge_type_attention(tape: &mut Tape, p: &StaticParams, words: Var, gates: &WordTypeGates) -> Result<Var> {
    let (w0, b0) = (tape.param(p.w_b0), tape.param(p.b_b0));
    let hidden = tape.linear(words, w0, Some(b0))?;
    let hidden = tape.relu(hidden);
    let (w1, b1) = (tape.param(p.w_b1), tape.param(p.b_b1));
    let logits = tape.linear(hidden, w1, Some(b1))?;
    debug_assert_eq!(tape.value(logits).cols(), NUM_EDGE_TYPES);
    let probs = tape.softmax_rows(logits);
    let probs = tape.scale_rows(probs, gates.relation)?;
    Ok(tape.transpose(probs))
}

pub fn fuse_multimodal<'g>(
    tape: &mut Tape,
    p: &StaticParams,
    graph: &'g VisualGraph,
    node_features: Var,
    context: Var,
) -> Result<MultimodalGraph<'g>> {
    if tape.value(node_features).rows() != tape.value(context).rows() {
        return Err(DgaError::contract("node features and context disagree on K"));
    }
    let joined = tape.concat_cols(&[node_features, context])?;
    let (w_m, b_m) = (tape.param(p.w_m), tape.param(p.b_m));
    if tape.value(w_m).cols() != tape.value(joined).cols() {
        return Err(DgaError::contract(format!(
            "fusion expects {} inputs, node+context give {}",
            tape.value(w_m).cols(),
            tape.value(joined).cols()
        )));
    }
    let features = tape.linear(joined, w_m, Some(b_m))?;
    Ok(MultimodalGraph { graph, features })
}

/// Runs the full static stage and returns the fused graph with its attention.
pub fn static_stage<'g>(
    tape: &mut Tape,
    p: &StaticParams,
    graph: &'g VisualGraph,
    words: Var,
) -> Result<(MultimodalGraph<'g>, StaticAttention, WordTypeGates)> {
    let x_i = assemble_node_features(tape, p, graph)?;
    let gates = word_type_gates(tape, p, words)?;
    let (alpha, context) = node_word_attention(tape, p, x_i, words, &gates)?;
    let beta = edge_type_attention(tape, p, words, &gates)?;
    let mm = fuse_multimodal(tape, p, graph, x_i, context)?;
    Ok((mm, StaticAttention { alpha, beta, context }, gates))
}
