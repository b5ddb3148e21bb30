//! The full model: vocabulary, relation table and every learnable
//! parameter, plus per-paragraph preparation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::context_encoder::{
    concept_inputs, init_step_input, restructure_input, EncoderConfig, EncoderParams, Vocab,
};
use crate::corpus::{generate_location_candidates, ProcedureInstance, Split, Triple};
use crate::error::{Result, SgrError};
use crate::numerics::checkpoint::Checkpoint;
use crate::numerics::ParamStore;
use crate::predictor::PredictorParams;
use crate::scene_graph::{
    build_complete_graph, construct_gold_graphs, enhance_with_knowledge, CompleteGraph,
    SceneGraph, ENT_ENT, LOCATE_IN, LOC_LOC,
};
use crate::structure_encoder::{GatParams, RelationRows};

/// Embedding row shared by knowledge relations never seen in training.
pub const OTHER_KNOWLEDGE: &str = "OtherKnowledge";
pub const GLOBAL_RELATION: &str = "Global";
pub const SELF_LOOP_RELATION: &str = "SelfLoop";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Hidden width of both output perceptrons.
    pub head_hidden: usize,
}

impl ModelConfig {
    /// Encoder defaults with hidden size `dim`.
    pub fn with_dim(dim: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                dim,
                ffn_dim: 2 * dim,
                ..EncoderConfig::default()
            },
            head_hidden: dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_dim(EncoderConfig::default().dim)
    }
}

#[derive(Debug, Clone)]
pub struct SgrModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    /// Relation embedding table layout: built-ins, knowledge relations,
    /// then the fallback, global and self-loop rows.
    pub relations: Vec<String>,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub gat: GatParams,
    pub heads: PredictorParams,
}

fn relation_table(knowledge: &[String]) -> Vec<String> {
    let mut rel: Vec<String> = [LOCATE_IN, ENT_ENT, LOC_LOC].iter().map(|s| s.to_string()).collect();
    for k in knowledge {
        let reserved = [OTHER_KNOWLEDGE, GLOBAL_RELATION, SELF_LOOP_RELATION];
        if !rel.contains(k) && !reserved.contains(&k.as_str()) {
            rel.push(k.clone());
        }
    }
    rel.extend([OTHER_KNOWLEDGE, GLOBAL_RELATION, SELF_LOOP_RELATION].map(String::from));
    rel
}

impl SgrModel {
    /// Freshly initialised model; the seed fixes every initial weight.
    pub fn new(
        config: ModelConfig,
        vocab: Vocab,
        knowledge_relations: &[String],
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let relations = relation_table(knowledge_relations);
        let mut store = ParamStore::new();
        let d = config.dim();
        let encoder = EncoderParams::init(&mut store, "ctx", config.encoder, vocab.len(), &mut rng)?;
        let gat = GatParams::init(&mut store, "gat", d, relations.len(), &mut rng)?;
        let heads = PredictorParams::init(&mut store, "head", d, config.head_hidden, &mut rng)?;
        Ok(SgrModel {
            config,
            vocab,
            relations,
            store,
            encoder,
            gat,
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    fn relation_row(&self, name: &str) -> usize {
        self.relations
            .iter()
            .position(|r| r == name)
            .unwrap_or_else(|| self.relations.len() - 3)
    }

    pub fn relation_rows(&self, graph: &CompleteGraph) -> RelationRows {
        RelationRows {
            graph: graph.relation_vocab().iter().map(|r| self.relation_row(r)).collect(),
            global: self.relation_row(GLOBAL_RELATION),
            self_loop: self.relation_row(SELF_LOOP_RELATION),
        }
    }

    /// Tokenizes a paragraph against this model, attaching gold scenes when
    /// the instance carries annotations.
    pub fn prepare(&self, instance: &ProcedureInstance, graph: CompleteGraph) -> Result<PreparedInstance> {
        self.prepare_inner(instance, graph, instance.has_gold())
    }

    /// Like [`SgrModel::prepare`] but never builds gold scenes, so annotated
    /// test paragraphs whose gold locations are not candidates still work.
    pub fn prepare_for_inference(&self, instance: &ProcedureInstance, graph: CompleteGraph) -> Result<PreparedInstance> {
        self.prepare_inner(instance, graph, false)
    }

    fn prepare_inner(&self, instance: &ProcedureInstance, graph: CompleteGraph, with_gold: bool) -> Result<PreparedInstance> {
        let max_len = self.config.encoder.max_len;
        let mut contexts = Vec::with_capacity(instance.num_steps() + 1);
        contexts.push(self.vocab.encode(&init_step_input(instance.prompt.as_deref(), max_len)?));
        for s in &instance.sentences {
            contexts.push(self.vocab.encode(&restructure_input(s, &instance.entities, max_len)?));
        }
        let concepts = concept_inputs(&graph, &self.vocab, max_len)?;
        let gold = if with_gold {
            Some(construct_gold_graphs(instance, &graph)?)
        } else {
            None
        };
        Ok(PreparedInstance {
            relation_rows: self.relation_rows(&graph),
            instance: instance.clone(),
            graph,
            contexts,
            concepts,
            gold,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let e = &self.config.encoder;
        let meta = [
            ("dim", e.dim),
            ("layers", e.layers),
            ("heads", e.heads),
            ("ffn_dim", e.ffn_dim),
            ("max_len", e.max_len),
            ("head_hidden", self.config.head_hidden),
        ];
        Checkpoint {
            meta: meta.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            lists: vec![
                ("vocab".into(), self.vocab.tokens().to_vec()),
                ("relations".into(), self.relations.clone()),
            ],
            tensors: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            ck.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| SgrError::Checkpoint(format!("missing or invalid meta {k}")))
        };
        let config = ModelConfig {
            encoder: EncoderConfig {
                dim: num("dim")?,
                layers: num("layers")?,
                heads: num("heads")?,
                ffn_dim: num("ffn_dim")?,
                max_len: num("max_len")?,
            },
            head_hidden: num("head_hidden")?,
        };
        let list = |k: &str| {
            ck.list(k)
                .map(<[String]>::to_vec)
                .ok_or_else(|| SgrError::Checkpoint(format!("missing list {k}")))
        };
        let vocab = Vocab::from_tokens(list("vocab")?);
        let relations = list("relations")?;
        let store = ck.tensors;
        let encoder = EncoderParams::from_store(&store, "ctx", config.encoder)?;
        let gat = GatParams::from_store(&store, "gat")?;
        let heads = PredictorParams::from_store(&store, "head")?;
        let expect = [
            (store.get(encoder.tokens).rows(), vocab.len(), "token table rows"),
            (store.get(gat.w2).rows(), relations.len(), "relation table rows"),
            (gat.dim, config.dim(), "graph attention width"),
        ];
        for (got, want, what) in expect {
            if got != want {
                return Err(SgrError::Checkpoint(format!("{what}: {got}, expected {want}")));
            }
        }
        Ok(SgrModel {
            config,
            vocab,
            relations,
            store,
            encoder,
            gat,
            heads,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| SgrError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.to_checkpoint()
            .write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| SgrError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| SgrError::io(path, e))?;
        Self::from_checkpoint(Checkpoint::read_from(BufReader::new(file))?)
    }
}

/// Complete graph of a paragraph: candidates for the split, co-mention
/// edges, then knowledge from the instance and from `extra_triples`.
pub fn build_graph(
    instance: &ProcedureInstance,
    split: Split,
    extra_triples: &[Triple],
) -> Result<CompleteGraph> {
    let candidates = generate_location_candidates(instance, split);
    let graph = build_complete_graph(instance, &candidates)?;
    let mut triples: Vec<Triple> = instance.knowledge_triples.clone().unwrap_or_default();
    triples.extend_from_slice(extra_triples);
    if triples.is_empty() {
        return Ok(graph);
    }
    Ok(enhance_with_knowledge(&graph, &triples).0)
}

/// Texts a vocabulary should cover for the given paragraphs and graphs.
pub fn vocab_texts<'a>(
    instances: &'a [ProcedureInstance],
    graphs: &'a [CompleteGraph],
) -> impl Iterator<Item = &'a str> {
    let inst = instances.iter().flat_map(|i| {
        i.prompt
            .iter()
            .chain(&i.sentences)
            .chain(&i.entities)
            .map(String::as_str)
    });
    let nodes = graphs.iter().flat_map(|g| g.nodes().iter().map(|n| n.surface.as_str()));
    inst.chain(nodes)
}

/// Knowledge relation names across graphs, in first-seen order.
pub fn knowledge_relations(graphs: &[CompleteGraph]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for g in graphs {
        for r in g.relation_vocab().iter().skip(3) {
            if !out.contains(r) {
                out.push(r.clone());
            }
        }
    }
    out
}

/// A paragraph ready for the model: graph, token ids and gold scenes.
#[derive(Debug, Clone)]
pub struct PreparedInstance {
    pub instance: ProcedureInstance,
    pub graph: CompleteGraph,
    pub relation_rows: RelationRows,
    /// Encoder inputs for steps `0..=T`; step 0 is the virtual init step.
    pub contexts: Vec<Vec<usize>>,
    /// Encoder input of every concept node.
    pub concepts: Vec<Vec<usize>>,
    /// Gold scenes `y_0 .. y_T`.
    pub gold: Option<Vec<SceneGraph>>,
}

impl PreparedInstance {
    pub fn num_steps(&self) -> usize {
        self.contexts.len() - 1
    }
}
