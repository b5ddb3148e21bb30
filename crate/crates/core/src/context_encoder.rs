//! Sentence and concept encoding with a small transformer trained from
//! scratch.
//!
//! Inputs are restructured so the entities a sentence mentions come first:
//! `[CLS] water [SEP] minerals [SEP] <sentence> [SEP]`. The output is the
//! final hidden state at the `[CLS]` position.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::corpus::{entity_aliases, match_entities, mentioned_entities, tokenize};
use crate::error::{Result, SgrError};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::scene_graph::{CompleteGraph, ConceptKind, GLOBAL_SURFACE, UNK_LOC_SURFACE};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const INIT: &str = "[INIT]";

/// Reserved tokens, in index order.
pub const SPECIALS: [&str; 7] = [PAD, UNK, CLS, SEP, INIT, GLOBAL_SURFACE, UNK_LOC_SURFACE];

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in SPECIALS.iter().map(|s| s.to_string()).chain(tokens) {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// Tokens in first-seen order over the given texts, after the specials.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        Self::from_tokens(texts.into_iter().flat_map(tokenize))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(1)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| SgrError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SgrError::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(SgrError::contract(format!(
                "{}: vocabulary must start with the reserved tokens",
                path.display()
            )));
        }
        Ok(Self::from_tokens(tokens))
    }
}

fn wrap(prefix: Vec<String>, body: Vec<String>, max_len: usize) -> Result<Vec<String>> {
    let mut seq = Vec::with_capacity(prefix.len() + body.len() + 2);
    seq.push(CLS.to_string());
    seq.extend(prefix);
    if seq.len() + 1 > max_len {
        return Err(SgrError::contract(format!(
            "entity prefix of {} tokens does not fit in {max_len} positions",
            seq.len() + 1
        )));
    }
    let room = max_len - seq.len() - 1;
    seq.extend(body.into_iter().take(room));
    seq.push(SEP.to_string());
    Ok(seq)
}

/// `[CLS] e_a [SEP] e_b [SEP] … <sentence> [SEP]` for the tracked entities
/// mentioned in the sentence, in first-mention order. Only the sentence is
/// ever truncated.
pub fn restructure_input(sentence: &str, entities: &[String], max_len: usize) -> Result<Vec<String>> {
    let toks = tokenize(sentence);
    let mentions = match_entities(&toks, entities);
    let mut prefix = Vec::new();
    for e in mentioned_entities(&mentions) {
        let alias = entity_aliases(&entities[e]).into_iter().next().unwrap_or_default();
        prefix.extend(alias);
        prefix.push(SEP.to_string());
    }
    wrap(prefix, toks, max_len)
}

/// Input of the virtual step before the first sentence.
pub fn init_step_input(prompt: Option<&str>, max_len: usize) -> Result<Vec<String>> {
    wrap(vec![INIT.to_string()], prompt.map(tokenize).unwrap_or_default(), max_len)
}

/// `[CLS] <surface> [SEP]`; reserved nodes use their reserved token.
pub fn concept_input(surface: &str, kind: ConceptKind, max_len: usize) -> Result<Vec<String>> {
    let body = match kind {
        ConceptKind::Global | ConceptKind::UnkLoc => vec![surface.to_string()],
        ConceptKind::Entity => entity_aliases(surface).into_iter().next().unwrap_or_default(),
        _ => tokenize(surface),
    };
    wrap(Vec::new(), body, max_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_len: 128,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ff1: ParamId,
    pub ff1_b: ParamId,
    pub ff2: ParamId,
    pub ff2_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tokens: ParamId,
    pub positions: ParamId,
    pub emb_ln_g: ParamId,
    pub emb_ln_b: ParamId,
    pub layers: Vec<LayerParams>,
}

const LAYER_SHAPES: [(&str, bool); 16] = [
    ("wq", true),
    ("bq", false),
    ("wk", true),
    ("bk", false),
    ("wv", true),
    ("bv", false),
    ("wo", true),
    ("bo", false),
    ("ln1.g", false),
    ("ln1.b", false),
    ("ff1", true),
    ("ff1.b", false),
    ("ff2", true),
    ("ff2.b", false),
    ("ln2.g", false),
    ("ln2.b", false),
];

impl EncoderParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        config: EncoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let EncoderConfig { dim: d, ffn_dim: f, .. } = config;
        if config.heads == 0 || d % config.heads != 0 {
            return Err(SgrError::contract(format!(
                "hidden size {d} is not divisible by {} heads",
                config.heads
            )));
        }
        store.init_uniform(format!("{prefix}.tok"), &[vocab_size, d], d, rng)?;
        store.init_uniform(format!("{prefix}.pos"), &[config.max_len, d], d, rng)?;
        store.init_filled(format!("{prefix}.emb_ln.g"), &[1, d], 1.0)?;
        store.init_filled(format!("{prefix}.emb_ln.b"), &[1, d], 0.0)?;
        for l in 0..config.layers {
            for (name, is_matrix) in LAYER_SHAPES {
                let full = format!("{prefix}.l{l}.{name}");
                if is_matrix {
                    let (rows, cols) = match name {
                        "ff1" => (d, f),
                        "ff2" => (f, d),
                        _ => (d, d),
                    };
                    store.init_uniform(full, &[rows, cols], rows, rng)?;
                } else {
                    let cols = if name == "ff1.b" { f } else { d };
                    let value = if name.ends_with(".g") { 1.0 } else { 0.0 };
                    store.init_filled(full, &[1, cols], value)?;
                }
            }
        }
        Self::from_store(store, prefix, config)
    }

    pub fn from_store(store: &ParamStore, prefix: &str, config: EncoderConfig) -> Result<Self> {
        let get = |n: &str| store.require(&format!("{prefix}.{n}"));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let g = |n: &str| get(&format!("l{l}.{n}"));
            layers.push(LayerParams {
                wq: g("wq")?,
                bq: g("bq")?,
                wk: g("wk")?,
                bk: g("bk")?,
                wv: g("wv")?,
                bv: g("bv")?,
                wo: g("wo")?,
                bo: g("bo")?,
                ln1_g: g("ln1.g")?,
                ln1_b: g("ln1.b")?,
                ff1: g("ff1")?,
                ff1_b: g("ff1.b")?,
                ff2: g("ff2")?,
                ff2_b: g("ff2.b")?,
                ln2_g: g("ln2.g")?,
                ln2_b: g("ln2.b")?,
            });
        }
        Ok(EncoderParams {
            config,
            tokens: get("tok")?,
            positions: get("pos")?,
            emb_ln_g: get("emb_ln.g")?,
            emb_ln_b: get("emb_ln.b")?,
            layers,
        })
    }
}

fn affine(tape: &Tape, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let y = tape.matmul(x, tape.param(store, w))?;
    tape.add_row(y, tape.param(store, b))
}

fn block(
    tape: &Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    p: &LayerParams,
    x: Var,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let dh = cfg.dim / cfg.heads;
    let q = affine(tape, store, x, p.wq, p.bq)?;
    let k = affine(tape, store, x, p.wk, p.bk)?;
    let v = affine(tape, store, x, p.wv, p.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.scale(tape.matmul_nt(qh, kh)?, scale)?;
        let att = tape.softmax_rows(scores, mask)?;
        heads.push(tape.matmul(att, vh)?);
    }
    let ctx = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let attn_out = affine(tape, store, ctx, p.wo, p.bo)?;
    let ln = |x, g, b| tape.layer_norm(x, tape.param(store, g), tape.param(store, b), LAYER_NORM_EPS);
    let x = ln(tape.add(x, attn_out)?, p.ln1_g, p.ln1_b)?;
    let hidden = tape.gelu(affine(tape, store, x, p.ff1, p.ff1_b)?)?;
    let ff = affine(tape, store, hidden, p.ff2, p.ff2_b)?;
    ln(tape.add(x, ff)?, p.ln2_g, p.ln2_b)
}

/// Encodes several sequences in one packed pass, attention restricted to
/// each sequence. Returns the `[CLS]` states, one row per sequence.
pub fn encode_batch(
    tape: &Tape,
    store: &ParamStore,
    params: &EncoderParams,
    seqs: &[Vec<usize>],
) -> Result<Var> {
    let cfg = &params.config;
    let vocab_size = store.get(params.tokens).rows();
    if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
        return Err(SgrError::contract("cannot encode an empty token sequence"));
    }
    if let Some(s) = seqs.iter().find(|s| s.len() > cfg.max_len) {
        return Err(SgrError::contract(format!(
            "sequence of {} tokens exceeds the {} available positions",
            s.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = seqs.iter().flatten().find(|&&t| t >= vocab_size) {
        return Err(SgrError::contract(format!("token id {bad} outside vocabulary of {vocab_size}")));
    }
    let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
    let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
    let mut starts = Vec::with_capacity(seqs.len());
    let mut offset = 0;
    for s in seqs {
        starts.push(offset);
        offset += s.len();
    }
    let mask = (seqs.len() > 1).then(|| {
        let n = ids.len();
        let mut m = Tensor::filled(&[n, n], f64::NEG_INFINITY);
        for (s, &start) in seqs.iter().zip(&starts) {
            for i in start..start + s.len() {
                m.data_mut()[i * n + start..i * n + start + s.len()].fill(0.0);
            }
        }
        m
    });

    let tok = tape.select_rows(tape.param(store, params.tokens), &ids)?;
    let pos = tape.select_rows(tape.param(store, params.positions), &positions)?;
    let mut x = tape.layer_norm(
        tape.add(tok, pos)?,
        tape.param(store, params.emb_ln_g),
        tape.param(store, params.emb_ln_b),
        LAYER_NORM_EPS,
    )?;
    for layer in &params.layers {
        x = block(tape, store, cfg, layer, x, mask.as_ref())?;
    }
    tape.select_rows(x, &starts)
}

/// `[CLS]` state of one sequence, `1 × d`.
pub fn encode_context(
    tape: &Tape,
    store: &ParamStore,
    params: &EncoderParams,
    ids: &[usize],
) -> Result<Var> {
    encode_batch(tape, store, params, &[ids.to_vec()])
}

/// Token ids of every concept's encoder input, in node order.
pub fn concept_inputs(graph: &CompleteGraph, vocab: &Vocab, max_len: usize) -> Result<Vec<Vec<usize>>> {
    graph
        .nodes()
        .iter()
        .map(|n| Ok(vocab.encode(&concept_input(&n.surface, n.kind, max_len)?)))
        .collect()
}

/// Static concept features, `M × d`: each node's surface encoded on its own.
pub fn init_concept_features(
    tape: &Tape,
    store: &ParamStore,
    params: &EncoderParams,
    graph: &CompleteGraph,
    vocab: &Vocab,
) -> Result<Var> {
    let seqs = concept_inputs(graph, vocab, params.config.max_len)?;
    encode_batch(tape, store, params, &seqs)
}
