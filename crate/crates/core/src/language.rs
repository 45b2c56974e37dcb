//! Expression side: vocabulary, bidirectional LSTM encoder and the analyzer
//! that turns an expression into a sequence of soft word distributions, one
//! per reasoning step.

use std::collections::HashMap;

use crate::error::{DgaError, Result};
use crate::tensor::{ParamId, ParameterStore, Tape, Tensor, Var};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Default maximum expression length.
pub const MAX_LEN: usize = 20;

/// Token ↔ id map. Ids 0 and 1 are reserved for padding and unknown words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<&str>())
    }
}

impl Vocabulary {
    /// Reserved tokens first, then the given tokens in first-seen order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        v.push(PAD);
        v.push(UNK);
        for t in tokens {
            v.push(t.as_ref());
        }
        v
    }

    /// Rebuilds from a serialized ordered list, which must start with the
    /// reserved tokens and contain no duplicates.
    pub fn from_ordered(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD || tokens[UNK_ID] != UNK {
            return Err(DgaError::Vocabulary("missing reserved tokens".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(DgaError::Vocabulary(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    fn push(&mut self, t: &str) {
        if !self.ids.contains_key(t) {
            self.ids.insert(t.to_string(), self.tokens.len());
            self.tokens.push(t.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Strict encoding: unknown words are an error.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| DgaError::Vocabulary(format!("unknown token `{}`", t.as_ref())))
            })
            .collect()
    }

    /// Unknown words map to the reserved unknown id.
    pub fn encode_lossy<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID))
            .collect()
    }
}

/// Sequence of word ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Expression {
    tokens: Vec<usize>,
}

impl Expression {
    pub fn new(tokens: Vec<usize>, max_len: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(DgaError::contract("empty expression"));
        }
        if tokens.len() > max_len {
            return Err(DgaError::contract(format!(
                "expression of {} words exceeds limit {max_len}",
                tokens.len()
            )));
        }
        Ok(Expression { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

/// Trainable weights of the encoder and analyzer.
#[derive(Clone, Debug)]
pub struct LanguageParams {
    pub embedding: ParamId,
    pub forward: LstmParams,
    pub backward: LstmParams,
    /// Per-step `(W, b)` mapping the expression vector to its step-specific view.
    pub step_maps: Vec<(ParamId, ParamId)>,
    pub w_u: ParamId,
    pub b_u: ParamId,
    pub w_s0: ParamId,
    pub w_s1: ParamId,
    pub w_s2: ParamId,
    pub y0: ParamId,
}

impl LanguageParams {
    pub fn bind(store: &ParameterStore, steps: usize) -> Result<Self> {
        let lstm = |dir: &str| -> Result<LstmParams> {
            Ok(LstmParams {
                w_ih: store.require(&format!("lstm.{dir}.w_ih"))?,
                w_hh: store.require(&format!("lstm.{dir}.w_hh"))?,
                bias: store.require(&format!("lstm.{dir}.b"))?,
            })
        };
        let step_maps = (1..=steps)
            .map(|t| {
                Ok((
                    store.require(&format!("analyzer.step{t}.w"))?,
                    store.require(&format!("analyzer.step{t}.b"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LanguageParams {
            embedding: store.require("embedding")?,
            forward: lstm("fwd")?,
            backward: lstm("bwd")?,
            step_maps,
            w_u: store.require("analyzer.w_u")?,
            b_u: store.require("analyzer.b_u")?,
            w_s0: store.require("analyzer.w_s0")?,
            w_s1: store.require("analyzer.w_s1")?,
            w_s2: store.require("analyzer.w_s2")?,
            y0: store.require("analyzer.y0")?,
        })
    }

    pub fn steps(&self) -> usize {
        self.step_maps.len()
    }
}

/// Word embeddings `F` (L×E), contextual states `H` (L×2H) and the
/// expression vector `q` (2H).
#[derive(Clone, Copy, Debug)]
pub struct EncodedExpression {
    pub words: Var,
    pub states: Var,
    pub summary: Var,
    pub len: usize,
}

fn run_lstm(tape: &mut Tape, p: &LstmParams, inputs: Var, order: &[usize]) -> Result<Vec<Var>> {
    let w_ih = tape.param(p.w_ih);
    let w_hh = tape.param(p.w_hh);
    let b = tape.param(p.bias);
    let hidden = tape.value(w_hh).cols();
    let projected = tape.linear(inputs, w_ih, Some(b))?;
    let mut h = tape.constant(Tensor::zeros(&[hidden])?);
    let mut c = tape.constant(Tensor::zeros(&[hidden])?);
    let mut states = vec![h; order.len()];
    for &l in order {
        let x = tape.row(projected, l)?;
        let rec = tape.matmul_t(h, w_hh)?;
        let gates = tape.add(x, rec)?;
        let i = tape.slice_cols(gates, 0, hidden)?;
        let f = tape.slice_cols(gates, hidden, hidden)?;
        let g = tape.slice_cols(gates, 2 * hidden, hidden)?;
        let o = tape.slice_cols(gates, 3 * hidden, hidden)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        h = tape.mul(o, tc)?;
        states[l] = h;
    }
    Ok(states)
}

/// Embeds the words and runs the bidirectional LSTM.
pub fn encode_expression(tape: &mut Tape, p: &LanguageParams, expr: &Expression) -> Result<EncodedExpression> {
    let emb = tape.param(p.embedding);
    let vocab = tape.value(emb).rows();
    if let Some(bad) = expr.tokens().iter().find(|&&t| t >= vocab) {
        return Err(DgaError::Vocabulary(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let len = expr.len();
    let words = tape.gather_rows(emb, expr.tokens())?;
    let fwd_order: Vec<usize> = (0..len).collect();
    let bwd_order: Vec<usize> = (0..len).rev().collect();
    let fwd = run_lstm(tape, &p.forward, words, &fwd_order)?;
    let bwd = run_lstm(tape, &p.backward, words, &bwd_order)?;
    let hf = tape.stack_rows(&fwd)?;
    let hb = tape.stack_rows(&bwd)?;
    let states = tape.concat_cols(&[hf, hb])?;
    let summary = tape.concat_cols(&[fwd[len - 1], bwd[0]])?;
    Ok(EncodedExpression {
        words,
        states,
        summary,
        len,
    })
}

/// Soft word distributions `R` and step outputs `y`, one per reasoning step.
#[derive(Clone, Debug)]
pub struct ReasoningProgram {
    pub word_attention: Vec<Var>,
    pub outputs: Vec<Var>,
}

impl ReasoningProgram {
    pub fn steps(&self) -> usize {
        self.word_attention.len()
    }
}

/// One analyzer step `t` (1-based): returns the word distribution and the
/// attended expression state fed to the next step.
pub fn analyzer_step(
    tape: &mut Tape,
    p: &LanguageParams,
    enc: &EncodedExpression,
    prev: Var,
    t: usize,
) -> Result<(Var, Var)> {
    let w_s1 = tape.param(p.w_s1);
    let keyed = tape.matmul_t(enc.states, w_s1)?;
    analyzer_step_keyed(tape, p, enc, keyed, prev, t)
}

fn analyzer_step_keyed(
    tape: &mut Tape,
    p: &LanguageParams,
    enc: &EncodedExpression,
    keyed_states: Var,
    prev: Var,
    t: usize,
) -> Result<(Var, Var)> {
    if t == 0 || t > p.steps() {
        return Err(DgaError::contract(format!("step {t} outside 1..={}", p.steps())));
    }
    let (w_t, b_t) = p.step_maps[t - 1];
    let (w_t, b_t) = (tape.param(w_t), tape.param(b_t));
    let q_t = tape.linear(enc.summary, w_t, Some(b_t))?;
    let u = tape.concat_cols(&[q_t, prev])?;
    let (w_u, b_u) = (tape.param(p.w_u), tape.param(p.b_u));
    let s = tape.linear(u, w_u, Some(b_u))?;
    let s = tape.relu(s);
    let w_s0 = tape.param(p.w_s0);
    let query = tape.matmul_t(s, w_s0)?;
    let pre = tape.add_row(keyed_states, query)?;
    let act = tape.tanh(pre);
    let w_s2 = tape.param(p.w_s2);
    let logits = tape.matmul_t(act, w_s2)?;
    let logits = tape.reshape(logits, &[enc.len])?;
    let r = tape.softmax_rows(logits);
    let y = tape.matmul(r, enc.states)?;
    let width = tape.value(y).len();
    let y = tape.reshape(y, &[width])?;
    Ok((r, y))
}

/// Chains `steps` analyzer steps starting from the learned initial state.
pub fn run_analyzer(tape: &mut Tape, p: &LanguageParams, enc: &EncodedExpression, steps: usize) -> Result<ReasoningProgram> {
    if steps == 0 || steps > p.steps() {
        return Err(DgaError::contract(format!(
            "analyzer has weights for {} steps, asked for {steps}",
            p.steps()
        )));
    }
    let w_s1 = tape.param(p.w_s1);
    let keyed = tape.matmul_t(enc.states, w_s1)?;
    let mut prev = tape.param(p.y0);
    let mut program = ReasoningProgram {
        word_attention: Vec::with_capacity(steps),
        outputs: Vec::with_capacity(steps),
    };
    for t in 1..=steps {
        let (r, y) = analyzer_step_keyed(tape, p, enc, keyed, prev, t)?;
        program.word_attention.push(r);
        program.outputs.push(y);
        prev = y;
    }
    Ok(program)
}
