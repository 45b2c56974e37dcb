//! The assembled grounding network: parameter layout, initialization,
//! the full forward pass and checkpoint persistence.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DgaError, Result};
use crate::geometry::{VisualGraph, NUM_EDGE_TYPES};
use crate::language::{self, EncodedExpression, Expression, LanguageParams, ReasoningProgram, Vocabulary};
use crate::matching::{self, MatchParams, MatchResult};
use crate::reasoning::{self, EdgeIndex, ReasoningOutcome, ReasoningParams};
use crate::static_attention::{self, StaticAttention, StaticParams, WordTypeGates};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, ParameterStore, Tape, Tensor, Var};

/// Layer widths and the number of reasoning steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Per direction; contextual word states are twice this wide.
    pub hidden_dim: usize,
    pub visual_dim: usize,
    pub spatial_dim: usize,
    pub node_dim: usize,
    pub attn_dim: usize,
    pub match_dim: usize,
    pub steps: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, visual_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 64,
            hidden_dim: 64,
            visual_dim,
            spatial_dim: 16,
            node_dim: 128,
            attn_dim: 64,
            match_dim: 128,
            steps: 3,
            max_len: language::MAX_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("visual_dim", self.visual_dim),
            ("spatial_dim", self.spatial_dim),
            ("node_dim", self.node_dim),
            ("attn_dim", self.attn_dim),
            ("match_dim", self.match_dim),
            ("steps", self.steps),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(DgaError::contract(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Uniform with the Glorot bound for a [out×in] weight.
    Glorot,
    Zeros,
    Uniform(f64),
}

/// Every trainable tensor as `(name, shape, init)`, in storage order.
fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let h2 = 2 * c.hidden_dim;
    let node_in = c.visual_dim + c.spatial_dim;
    let mut l: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut add = |name: &str, shape: &[usize], init: Init| l.push((name.to_string(), shape.to_vec(), init));

    add("embedding", &[c.vocab_size, c.embed_dim], Init::Uniform(0.5));
    for dir in ["fwd", "bwd"] {
        add(&format!("lstm.{dir}.w_ih"), &[4 * c.hidden_dim, c.embed_dim], Init::Glorot);
        add(&format!("lstm.{dir}.w_hh"), &[4 * c.hidden_dim, c.hidden_dim], Init::Glorot);
        add(&format!("lstm.{dir}.b"), &[4 * c.hidden_dim], Init::Zeros);
    }
    for t in 1..=c.steps {
        add(&format!("analyzer.step{t}.w"), &[h2, h2], Init::Glorot);
        add(&format!("analyzer.step{t}.b"), &[h2], Init::Zeros);
    }
    add("analyzer.w_u", &[h2, 2 * h2], Init::Glorot);
    add("analyzer.b_u", &[h2], Init::Zeros);
    add("analyzer.w_s0", &[c.attn_dim, h2], Init::Glorot);
    add("analyzer.w_s1", &[c.attn_dim, h2], Init::Glorot);
    add("analyzer.w_s2", &[1, c.attn_dim], Init::Glorot);
    add("analyzer.y0", &[h2], Init::Uniform(0.1));

    add("spatial.w_p", &[c.spatial_dim, 5], Init::Glorot);
    add("word_type.w_z0", &[c.attn_dim, c.embed_dim], Init::Glorot);
    add("word_type.b_z0", &[c.attn_dim], Init::Zeros);
    add("word_type.w_z1", &[1, c.attn_dim], Init::Glorot);
    add("word_type.b_z1", &[1], Init::Zeros);
    add("node_attn.w_a0", &[c.attn_dim, c.embed_dim], Init::Glorot);
    add("node_attn.w_a1", &[c.attn_dim, node_in], Init::Glorot);
    add("node_attn.w_a2", &[1, c.attn_dim], Init::Glorot);
    add("edge_attn.w_b0", &[c.attn_dim, c.embed_dim], Init::Glorot);
    add("edge_attn.b_b0", &[c.attn_dim], Init::Zeros);
    add("edge_attn.w_b1", &[NUM_EDGE_TYPES, c.attn_dim], Init::Glorot);
    add("edge_attn.b_b1", &[NUM_EDGE_TYPES], Init::Zeros);
    add("fuse.w_m", &[c.node_dim, node_in + c.embed_dim], Init::Glorot);
    add("fuse.b_m", &[c.node_dim], Init::Zeros);

    add("reason.w_in", &[c.node_dim, c.node_dim], Init::Glorot);
    add("reason.b_in", &[NUM_EDGE_TYPES, c.node_dim], Init::Zeros);
    add("reason.w_self", &[c.node_dim, c.node_dim], Init::Glorot);
    add("reason.b_self", &[c.node_dim], Init::Zeros);
    add("reason.w_hat", &[c.node_dim, c.node_dim], Init::Glorot);
    add("reason.b_hat", &[c.node_dim], Init::Zeros);

    add("match.w_c0", &[c.match_dim, c.node_dim], Init::Glorot);
    add("match.w_c1", &[c.match_dim, h2], Init::Glorot);
    l
}

fn init_tensor(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let bound = match init {
        Init::Zeros => return Tensor::new(shape.to_vec(), vec![0.0; n]),
        Init::Uniform(b) => b,
        Init::Glorot => {
            let (fan_out, fan_in) = match shape {
                [o, i] => (*o, *i),
                [o] => (*o, 1),
                _ => (1, 1),
            };
            (6.0 / (fan_in + fan_out) as f64).sqrt()
        }
    };
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Parameters plus the handles each stage uses to find its weights.
#[derive(Clone, Debug)]
pub struct DgaModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParameterStore,
    pub language: LanguageParams,
    pub statics: StaticParams,
    pub reasoning: ReasoningParams,
    pub matching: MatchParams,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub encoded: EncodedExpression,
    pub program: ReasoningProgram,
    pub word_types: WordTypeGates,
    pub attention: StaticAttention,
    pub fused: Var,
    pub reasoning: ReasoningOutcome,
    pub matching: MatchResult,
}

const META_VOCAB: &str = "meta.vocab";
const META_CONFIG: &str = "meta.config";
const META_RUN: &str = "meta.run";

impl DgaModel {
    /// Fresh model with weights drawn from a seeded generator.
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(DgaError::contract(format!(
                "config expects {} words, vocabulary has {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for (name, shape, init) in layout(&config) {
            store.insert(name, init_tensor(&mut rng, &shape, init)?)?;
        }
        Self::from_store(config, vocab, store)
    }

    fn from_store(config: ModelConfig, vocab: Vocabulary, store: ParameterStore) -> Result<Self> {
        Ok(DgaModel {
            language: LanguageParams::bind(&store, config.steps)?,
            statics: StaticParams::bind(&store)?,
            reasoning: ReasoningParams::bind(&store)?,
            matching: MatchParams::bind(&store)?,
            config,
            vocab,
            store,
        })
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    /// Runs the whole network on one scene/expression pair.
    pub fn forward(&self, tape: &mut Tape, graph: &VisualGraph, edges: &EdgeIndex, expr: &Expression) -> Result<ForwardPass> {
        if graph.feature_dim() != self.config.visual_dim {
            return Err(DgaError::Compatibility {
                field: "visual_dim".into(),
                message: format!("model expects {}, scene has {}", self.config.visual_dim, graph.feature_dim()),
            });
        }
        if expr.len() > self.config.max_len {
            return Err(DgaError::contract(format!("expression longer than {}", self.config.max_len)));
        }
        let encoded = language::encode_expression(tape, &self.language, expr)?;
        let program = language::run_analyzer(tape, &self.language, &encoded, self.config.steps)?;
        let (mm, attention, word_types) = static_attention::static_stage(tape, &self.statics, graph, encoded.words)?;
        let reasoning = reasoning::run_reasoning(
            tape,
            &self.reasoning,
            &mm,
            edges,
            &program,
            attention.alpha,
            attention.beta,
        )?;
        let matching = matching::matching_scores(tape, &self.matching, reasoning.final_memories(), encoded.summary)?;
        Ok(ForwardPass {
            encoded,
            program,
            word_types,
            attention,
            fused: mm.features,
            reasoning,
            matching,
        })
    }

    /// Serializes weights, vocabulary, model config and an optional run-config
    /// JSON echo into the checkpoint format.
    pub fn to_checkpoint(&self, run_config: Option<&str>) -> Result<Checkpoint> {
        let mut records: Vec<(String, Tensor)> = self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        records.push((META_VOCAB.into(), text_tensor(&self.vocab.tokens().join("\n"))?));
        let cfg = serde_json::to_string(&self.config).map_err(|e| DgaError::Checkpoint(e.to_string()))?;
        records.push((META_CONFIG.into(), text_tensor(&cfg)?));
        if let Some(run) = run_config {
            records.push((META_RUN.into(), text_tensor(run)?));
        }
        Ok(Checkpoint { records })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let text = |name: &str| -> Result<String> {
            let t = ckpt
                .get(name)
                .ok_or_else(|| DgaError::Checkpoint(format!("missing `{name}` record")))?;
            tensor_text(t).ok_or_else(|| DgaError::Checkpoint(format!("`{name}` is not text")))
        };
        let config: ModelConfig =
            serde_json::from_str(&text(META_CONFIG)?).map_err(|e| DgaError::Checkpoint(format!("config: {e}")))?;
        config.validate()?;
        let vocab = Vocabulary::from_ordered(text(META_VOCAB)?.split('\n').map(String::from).collect())?;
        if vocab.len() != config.vocab_size {
            return Err(DgaError::Checkpoint("vocabulary size disagrees with config".into()));
        }
        let expected = layout(&config);
        let mut store = ParameterStore::new();
        for (name, shape, _) in &expected {
            let t = ckpt
                .get(name)
                .ok_or_else(|| DgaError::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(DgaError::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            store.insert(name.clone(), t.clone())?;
        }
        let known = |n: &str| n.starts_with("meta.") || expected.iter().any(|(e, _, _)| e == n);
        if let Some((n, _)) = ckpt.records.iter().find(|(n, _)| !known(n)) {
            return Err(DgaError::Checkpoint(format!("unexpected record `{n}`")));
        }
        Self::from_store(config, vocab, store)
    }

    pub fn save<W: Write>(&self, w: W, run_config: Option<&str>) -> Result<()> {
        let ckpt = self.to_checkpoint(run_config)?;
        write_checkpoint(w, &ckpt).map_err(|e| DgaError::Checkpoint(e.to_string()))
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(r)?)
    }
}

/// Run-config echo stored alongside the weights, if any.
pub fn checkpoint_run_config(ckpt: &Checkpoint) -> Option<String> {
    ckpt.get(META_RUN).and_then(tensor_text)
}

// Text is stored one byte per value so it fits the tensor-only format.
fn text_tensor(s: &str) -> Result<Tensor> {
    let mut bytes: Vec<f64> = s.bytes().map(f64::from).collect();
    if bytes.is_empty() {
        bytes.push(0.0);
    }
    Tensor::vector(bytes)
}

fn tensor_text(t: &Tensor) -> Option<String> {
    let mut bytes = Vec::with_capacity(t.len());
    for &v in t.data() {
        if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
            return None;
        }
        if v != 0.0 {
            bytes.push(v as u8);
        }
    }
    String::from_utf8(bytes).ok()
}
