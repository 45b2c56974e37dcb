//! Multi-step reasoning over the multimodal graph.
//!
//! Each step turns the step's word distribution into node weights `λ` and
//! edge-type weights `μ`, accumulates them into gates `p` and `ν`, and from
//! step 2 on rebuilds every node memory from its incoming neighbours.

use crate::error::{DgaError, Result};
use crate::geometry::{VisualGraph, NUM_EDGE_TYPES};
use crate::language::ReasoningProgram;
use crate::static_attention::MultimodalGraph;
use crate::tensor::{ParamId, ParameterStore, Tape, Tensor, Var};

/// Gates below this are treated as zero.
pub const ZERO_GATE: f64 = 1e-9;

#[derive(Clone, Copy, Debug)]
pub struct ReasoningParams {
    /// Shared neighbour transform.
    pub w_in: ParamId,
    /// One bias row per edge type (11×D_m).
    pub b_in: ParamId,
    pub w_self: ParamId,
    pub b_self: ParamId,
    pub w_hat: ParamId,
    pub b_hat: ParamId,
}

impl ReasoningParams {
    pub fn bind(store: &ParameterStore) -> Result<Self> {
        Ok(ReasoningParams {
            w_in: store.require("reason.w_in")?,
            b_in: store.require("reason.b_in")?,
            w_self: store.require("reason.w_self")?,
            b_self: store.require("reason.b_self")?,
            w_hat: store.require("reason.w_hat")?,
            b_hat: store.require("reason.b_hat")?,
        })
    }
}

/// Incoming-edge layout of a graph, precomputed once per scene.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeIndex {
    k: usize,
    /// Row-major K×K: entry (k, j) is `Some(e_jk − 1)` when j → k is an edge.
    incoming: Vec<Option<usize>>,
    /// K×11: number of incoming edges of each type per node.
    type_counts: Vec<f64>,
}

impl EdgeIndex {
    pub fn new(graph: &VisualGraph) -> Self {
        let k = graph.len();
        let mut incoming = vec![None; k * k];
        let mut type_counts = vec![0.0; k * NUM_EDGE_TYPES];
        for dst in 0..k {
            for src in 0..k {
                let e = graph.edge(src, dst);
                if src != dst && e.is_edge() {
                    let n = e.code() as usize - 1;
                    incoming[dst * k + src] = Some(n);
                    type_counts[dst * NUM_EDGE_TYPES + n] += 1.0;
                }
            }
        }
        EdgeIndex {
            k,
            incoming,
            type_counts,
        }
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.incoming[dst * self.k + src].is_some()
    }
}

/// Node weights `λ` (K) and edge-type weights `μ` (11) for one step.
#[derive(Clone, Copy, Debug)]
pub struct StepWeights {
    pub nodes: Var,
    pub edges: Var,
}

/// Memories (K×D_m), node gates `p` (K) and edge-type gates `ν` (11) after `step`.
#[derive(Clone, Copy, Debug)]
pub struct ReasoningState {
    pub memories: Var,
    pub node_gates: Var,
    pub edge_gates: Var,
    pub step: usize,
}

/// `λ_k = Σ_l r_l α_{k,l}` and `μ_n = Σ_l r_l β_{n,l}`.
pub fn step_weights(tape: &mut Tape, words: Var, alpha: Var, beta: Var) -> Result<StepWeights> {
    let nodes = tape.matmul_t(words, alpha)?;
    let k = tape.value(nodes).len();
    let nodes = tape.reshape(nodes, &[k])?;
    let edges = tape.matmul_t(words, beta)?;
    let edges = tape.reshape(edges, &[NUM_EDGE_TYPES])?;
    Ok(StepWeights { nodes, edges })
}

/// Adds this step's weights onto the running gates; returns `(p, ν)`.
pub fn update_gates(tape: &mut Tape, w: &StepWeights, node_gates: Var, edge_gates: Var) -> Result<(Var, Var)> {
    let p = tape.add(w.nodes, node_gates)?;
    let nu = tape.add(w.edges, edge_gates)?;
    Ok((p, nu))
}

/// Memories for step `t ≥ 2`. `node_gates`/`edge_gates` are the gates after
/// this step's update, so `node_gates = w.nodes + prev.node_gates`.
///
/// The blend `[λ·new + p_prev·m_prev] / p` is evaluated as
/// `m_prev + (λ/p)·(new − m_prev)`, which is the same quantity when the gates
/// come from [`update_gates`] and leaves a node with `λ = 0` bit-for-bit
/// unchanged. Nodes whose gate is still zero keep their memory.
pub fn propagate(
    tape: &mut Tape,
    p: &ReasoningParams,
    edges: &EdgeIndex,
    prev: &ReasoningState,
    w: &StepWeights,
    node_gates: Var,
    edge_gates: Var,
) -> Result<Var> {
    let k = edges.len();
    if tape.value(prev.memories).rows() != k {
        return Err(DgaError::contract("memory rows differ from graph size"));
    }
    // Σ_j ν_{e_jk} W← (p_j m_j)
    let weighted = tape.scale_rows(prev.memories, prev.node_gates)?;
    let w_in = tape.param(p.w_in);
    let messages = tape.matmul_t(weighted, w_in)?;
    let adjacency = tape.gather_elems(edge_gates, &edges.incoming, &[k, k])?;
    let from_neighbours = tape.matmul(adjacency, messages)?;
    // Σ_j ν_{e_jk} b←_{e_jk} = Σ_n (count_kn ν_n) b←_n
    let counts = tape.constant(Tensor::matrix(k, NUM_EDGE_TYPES, edges.type_counts.clone())?);
    let counts = tape.scale_cols(counts, edge_gates)?;
    let b_in = tape.param(p.b_in);
    let type_bias = tape.matmul(counts, b_in)?;
    let relational = tape.add(from_neighbours, type_bias)?;

    let (w_self, b_self) = (tape.param(p.w_self), tape.param(p.b_self));
    let own = tape.linear(prev.memories, w_self, Some(b_self))?;
    let combined = tape.add(relational, own)?;
    let (w_hat, b_hat) = (tape.param(p.w_hat), tape.param(p.b_hat));
    let candidate = tape.linear(combined, w_hat, Some(b_hat))?;

    let inv_gate = tape.safe_recip(node_gates, ZERO_GATE);
    let share = tape.mul(w.nodes, inv_gate)?;
    let delta = tape.sub(candidate, prev.memories)?;
    let delta = tape.scale_rows(delta, share)?;
    let blended = tape.add(prev.memories, delta)?;

    let frozen: Vec<bool> = tape.data(node_gates).iter().map(|&g| g < ZERO_GATE).collect();
    tape.select_rows(&frozen, prev.memories, blended)
}

/// Everything the reasoning loop produced, kept for tracing and tests.
#[derive(Clone, Debug)]
pub struct ReasoningOutcome {
    pub weights: Vec<StepWeights>,
    pub states: Vec<ReasoningState>,
}

impl ReasoningOutcome {
    pub fn final_memories(&self) -> Var {
        self.states.last().expect("at least one step").memories
    }
}

/// Runs all steps of `program`. Gates start at zero; step 1 takes the fused
/// node features as memories and only updates the gates.
pub fn run_reasoning(
    tape: &mut Tape,
    p: &ReasoningParams,
    mm: &MultimodalGraph,
    edges: &EdgeIndex,
    program: &ReasoningProgram,
    alpha: Var,
    beta: Var,
) -> Result<ReasoningOutcome> {
    let steps = program.steps();
    if steps == 0 {
        return Err(DgaError::contract("reasoning needs at least one step"));
    }
    let k = mm.graph.len();
    let zero_p = tape.constant(Tensor::zeros(&[k])?);
    let zero_nu = tape.constant(Tensor::zeros(&[NUM_EDGE_TYPES])?);

    let w1 = step_weights(tape, program.word_attention[0], alpha, beta)?;
    let (p1, nu1) = update_gates(tape, &w1, zero_p, zero_nu)?;
    let mut state = ReasoningState {
        memories: mm.features,
        node_gates: p1,
        edge_gates: nu1,
        step: 1,
    };
    let mut outcome = ReasoningOutcome {
        weights: vec![w1],
        states: vec![state],
    };
    for t in 2..=steps {
        let w = step_weights(tape, program.word_attention[t - 1], alpha, beta)?;
        let (pg, nu) = update_gates(tape, &w, state.node_gates, state.edge_gates)?;
        let memories = propagate(tape, p, edges, &state, &w, pg, nu)?;
        state = ReasoningState {
            memories,
            node_gates: pg,
            edge_gates: nu,
            step: t,
        };
        outcome.weights.push(w);
        outcome.states.push(state);
    }
    Ok(outcome)
}
