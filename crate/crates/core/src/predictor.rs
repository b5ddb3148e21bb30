//! Next-scene prediction and the step-by-step rollout.
//!
//! Each transition takes the scene summary of `y_{t-1}` and the `[CLS]`
//! state of sentence `t`, and scores every entity (exists?) and every
//! entity/location pair (located there?) with two shared perceptrons. Both
//! perceptrons see the static concept features and the graph-attention
//! states of the nodes they score.

use std::cell::Cell;

use rand::Rng;

use crate::context_encoder::encode_batch;
use crate::error::{Result, SgrError};
use crate::model::{PreparedInstance, SgrModel};
use crate::numerics::{sigmoid, softmax_into, ParamId, ParamStore, Tape, Var};
use crate::scene_graph::{CompleteGraph, SceneGraph};
use crate::structure_encoder::encode_scene;

/// One two-layer `tanh` perceptron producing a single logit.
#[derive(Debug, Clone, Copy)]
pub struct Perceptron {
    /// `input × hidden`.
    pub w: ParamId,
    /// `1 × hidden`.
    pub b: ParamId,
    /// `hidden × 1`.
    pub v: ParamId,
    /// `1 × 1`.
    pub c: ParamId,
}

impl Perceptron {
    fn init<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Perceptron {
            w: store.init_uniform(format!("{prefix}.w"), &[input, hidden], input, rng)?,
            b: store.init_filled(format!("{prefix}.b"), &[1, hidden], 0.0)?,
            v: store.init_uniform(format!("{prefix}.v"), &[hidden, 1], hidden, rng)?,
            c: store.init_filled(format!("{prefix}.c"), &[1, 1], 0.0)?,
        })
    }

    fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| store.require(&format!("{prefix}.{n}"));
        Ok(Perceptron {
            w: get("w")?,
            b: get("b")?,
            v: get("v")?,
            c: get("c")?,
        })
    }

    /// Rows `[start, start+len)` of the first-layer weights.
    fn block(&self, tape: &Tape, store: &ParamStore, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        tape.select_rows(tape.param(store, self.w), &rows)
    }

    fn output(&self, tape: &Tape, store: &ParamStore, pre: Var) -> Result<Var> {
        let hidden = tape.tanh(pre)?;
        let out = tape.matmul(hidden, tape.param(store, self.v))?;
        tape.add_row(out, tape.param(store, self.c))
    }
}

/// `f1` scores `[g ‖ c ‖ x_e ‖ h_e]`; `f2` scores `[g ‖ c ‖ x_e ‖ h_e ‖ x_l ‖ h_l]`.
#[derive(Debug, Clone, Copy)]
pub struct PredictorParams {
    pub mask_head: Perceptron,
    pub loc_head: Perceptron,
    pub dim: usize,
}

impl PredictorParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(PredictorParams {
            mask_head: Perceptron::init(store, &format!("{prefix}.mask"), 4 * dim, hidden, rng)?,
            loc_head: Perceptron::init(store, &format!("{prefix}.loc"), 6 * dim, hidden, rng)?,
            dim,
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let mask_head = Perceptron::from_store(store, &format!("{prefix}.mask"))?;
        let loc_head = Perceptron::from_store(store, &format!("{prefix}.loc"))?;
        Ok(PredictorParams {
            dim: store.get(mask_head.w).rows() / 4,
            mask_head,
            loc_head,
        })
    }
}

/// Logits of one transition.
#[derive(Debug, Clone, Copy)]
pub struct StepLogits {
    /// `N × 1`.
    pub mask: Var,
    /// `N × (L+1)`.
    pub location: Var,
}

/// Both heads for one transition.
///
/// `feats` and `states` are the `M × d` concept features and graph-attention
/// states; `h_global` and `h_cls` are `1 × d`.
#[allow(clippy::too_many_arguments)]
pub fn predict_step(
    tape: &Tape,
    store: &ParamStore,
    params: &PredictorParams,
    graph: &CompleteGraph,
    feats: Var,
    states: Var,
    h_global: Var,
    h_cls: Var,
) -> Result<StepLogits> {
    let d = params.dim;
    let m = graph.num_nodes();
    for (v, rows) in [(feats, m), (states, m), (h_global, 1), (h_cls, 1)] {
        let shape = tape.shape(v)?;
        if shape != [rows, d] {
            return Err(SgrError::Shape {
                op: "predict_step",
                shapes: vec![shape, vec![rows, d]],
            });
        }
    }
    let n = graph.num_entities();
    let cols = graph.num_columns();
    let summary = tape.concat_cols(&[h_global, h_cls])?;
    let nodes = tape.concat_cols(&[feats, states])?;
    let entity_rows: Vec<usize> = (0..n).collect();
    let column_rows: Vec<usize> = (0..cols).map(|c| graph.column_node(c)).collect();
    let ents = tape.select_rows(nodes, &entity_rows)?;
    let locs = tape.select_rows(nodes, &column_rows)?;

    let f1 = &params.mask_head;
    let shared = tape.matmul(summary, f1.block(tape, store, 0, 2 * d)?)?;
    let shared = tape.add(shared, tape.param(store, f1.b))?;
    let pre = tape.add_row(tape.matmul(ents, f1.block(tape, store, 2 * d, 2 * d)?)?, shared)?;
    let mask = f1.output(tape, store, pre)?;

    let f2 = &params.loc_head;
    let shared = tape.matmul(summary, f2.block(tape, store, 0, 2 * d)?)?;
    let shared = tape.add(shared, tape.param(store, f2.b))?;
    let ent_part = tape.add_row(tape.matmul(ents, f2.block(tape, store, 2 * d, 2 * d)?)?, shared)?;
    let loc_part = tape.matmul(locs, f2.block(tape, store, 4 * d, 2 * d)?)?;
    let pre = tape.pair_sum(ent_part, loc_part)?;
    let location = tape.reshape(f2.output(tape, store, pre)?, &[n, cols])?;
    Ok(StepLogits { mask, location })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePrediction {
    pub mask_probs: Vec<f64>,
    /// One distribution over location columns per entity.
    pub loc_probs: Vec<Vec<f64>>,
}

impl ScenePrediction {
    pub fn from_logits(tape: &Tape, logits: &StepLogits) -> Result<Self> {
        let mask = tape.value(logits.mask)?;
        let loc = tape.value(logits.location)?;
        let mask_probs = mask.data().iter().map(|&z| sigmoid(z)).collect();
        let loc_probs = (0..loc.rows())
            .map(|i| {
                let mut p = vec![0.0; loc.cols()];
                softmax_into(loc.row(i), &mut p);
                p
            })
            .collect();
        Ok(ScenePrediction { mask_probs, loc_probs })
    }
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Thresholds existence at 0.5 and takes each existing entity's most likely
/// location.
pub fn decode_scene(prediction: &ScenePrediction, graph: &CompleteGraph) -> SceneGraph {
    let mut scene = SceneGraph::empty(graph);
    for (e, &p) in prediction.mask_probs.iter().enumerate() {
        if p >= 0.5 {
            scene.mask[e] = true;
            scene.locate_in[e] = Some(argmax(&prediction.loc_probs[e]));
        }
    }
    scene
}

/// Counts encoder invocations. Concept-feature initialisation is one packed
/// encoder pass per paragraph and is tallied separately.
#[derive(Debug, Default)]
pub struct InvocationCounter {
    structure: Cell<usize>,
    context: Cell<usize>,
    concept_init: Cell<usize>,
}

impl InvocationCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn structure(&self) -> usize {
        self.structure.get()
    }

    pub fn context(&self) -> usize {
        self.context.get()
    }

    pub fn concept_init(&self) -> usize {
        self.concept_init.get()
    }

    pub fn reset(&self) {
        self.structure.set(0);
        self.context.set(0);
        self.concept_init.set(0);
    }
}

fn bump(counter: Option<&InvocationCounter>, field: fn(&InvocationCounter) -> &Cell<usize>) {
    if let Some(c) = counter {
        let cell = field(c);
        cell.set(cell.get() + 1);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// Step `t` reads the gold scene `y_{t-1}`.
    TeacherForced,
    /// Step `t` reads the scene decoded at step `t-1`.
    Autoregressive,
}

/// Concept features of a prepared paragraph, `M × d`.
pub fn concept_features(
    tape: &Tape,
    model: &SgrModel,
    prep: &PreparedInstance,
    counter: Option<&InvocationCounter>,
) -> Result<Var> {
    features_with(tape, model, &model.store, prep, counter)
}

fn features_with(
    tape: &Tape,
    model: &SgrModel,
    store: &ParamStore,
    prep: &PreparedInstance,
    counter: Option<&InvocationCounter>,
) -> Result<Var> {
    bump(counter, |c| &c.concept_init);
    encode_batch(tape, store, &model.encoder, &prep.concepts)
}

/// One transition: encode `scene`, encode context `step`, score.
pub fn transition(
    tape: &Tape,
    model: &SgrModel,
    prep: &PreparedInstance,
    feats: Var,
    scene: &SceneGraph,
    step: usize,
    counter: Option<&InvocationCounter>,
) -> Result<StepLogits> {
    transition_with(tape, model, &model.store, prep, feats, scene, step, counter)
}

#[allow(clippy::too_many_arguments)]
fn transition_with(
    tape: &Tape,
    model: &SgrModel,
    store: &ParamStore,
    prep: &PreparedInstance,
    feats: Var,
    scene: &SceneGraph,
    step: usize,
    counter: Option<&InvocationCounter>,
) -> Result<StepLogits> {
    bump(counter, |c| &c.structure);
    let enc = encode_scene(tape, store, &model.gat, &prep.relation_rows, &prep.graph, scene, feats)?;
    bump(counter, |c| &c.context);
    let h_cls = encode_batch(tape, store, &model.encoder, &prep.contexts[step..=step])?;
    predict_step(tape, store, &model.heads, &prep.graph, feats, enc.node_states, enc.global, h_cls)
}

/// Logits for steps `0..=T` with gold previous scenes, all on one tape.
pub fn teacher_forced_logits(
    tape: &Tape,
    model: &SgrModel,
    prep: &PreparedInstance,
) -> Result<Vec<StepLogits>> {
    teacher_forced_logits_with(tape, model, &model.store, prep)
}

/// As [`teacher_forced_logits`], reading parameters from `store` instead of
/// the model's own (used by finite-difference checks).
pub fn teacher_forced_logits_with(
    tape: &Tape,
    model: &SgrModel,
    store: &ParamStore,
    prep: &PreparedInstance,
) -> Result<Vec<StepLogits>> {
    let gold = prep.gold.as_ref().ok_or_else(|| {
        SgrError::contract(format!("{}: teacher forcing needs gold scenes", prep.instance.para_id))
    })?;
    let feats = features_with(tape, model, store, prep, None)?;
    let empty = SceneGraph::empty(&prep.graph);
    (0..=prep.num_steps())
        .map(|t| {
            let prev = if t == 0 { &empty } else { &gold[t - 1] };
            transition_with(tape, model, store, prep, feats, prev, t, None)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Rollout {
    /// `T+1` predictions, for `y_0 .. y_T`.
    pub predictions: Vec<ScenePrediction>,
    pub scenes: Vec<SceneGraph>,
}

pub fn rollout(
    model: &SgrModel,
    prep: &PreparedInstance,
    mode: RolloutMode,
    counter: Option<&InvocationCounter>,
) -> Result<Rollout> {
    let gold = match mode {
        RolloutMode::TeacherForced => Some(prep.gold.as_ref().ok_or_else(|| {
            SgrError::contract(format!("{}: teacher forcing needs gold scenes", prep.instance.para_id))
        })?),
        RolloutMode::Autoregressive => None,
    };
    let tape = Tape::new();
    let feats = concept_features(&tape, model, prep, counter)?;
    let mut prev = SceneGraph::empty(&prep.graph);
    let mut predictions = Vec::with_capacity(prep.num_steps() + 1);
    let mut scenes = Vec::with_capacity(prep.num_steps() + 1);
    for t in 0..=prep.num_steps() {
        let logits = transition(&tape, model, prep, feats, &prev, t, counter)?;
        let pred = ScenePrediction::from_logits(&tape, &logits)?;
        let decoded = decode_scene(&pred, &prep.graph);
        prev = match gold {
            Some(g) => g[t].clone(),
            None => decoded.clone(),
        };
        predictions.push(pred);
        scenes.push(decoded);
    }
    Ok(Rollout { predictions, scenes })
}

/// Entity-wise reference: the same encoders run once per entity and step,
/// each pass tracking a single entity (all others masked out) and reading
/// only that entity's outputs.
pub fn entity_wise_rollout(
    model: &SgrModel,
    prep: &PreparedInstance,
    counter: Option<&InvocationCounter>,
) -> Result<Rollout> {
    let graph = &prep.graph;
    let n = graph.num_entities();
    let steps = prep.num_steps() + 1;
    let tape = Tape::new();
    let feats = concept_features(&tape, model, prep, counter)?;
    let mut predictions = vec![
        ScenePrediction {
            mask_probs: vec![0.0; n],
            loc_probs: vec![Vec::new(); n],
        };
        steps
    ];
    let mut scenes = vec![SceneGraph::empty(graph); steps];
    for e in 0..n {
        let mut prev = SceneGraph::empty(graph);
        for t in 0..steps {
            let logits = transition(&tape, model, prep, feats, &prev, t, counter)?;
            let pred = ScenePrediction::from_logits(&tape, &logits)?;
            predictions[t].mask_probs[e] = pred.mask_probs[e];
            predictions[t].loc_probs[e] = pred.loc_probs[e].clone();
            let decoded = decode_scene(&pred, graph);
            let mut own = SceneGraph::empty(graph);
            own.mask[e] = decoded.mask[e];
            own.locate_in[e] = decoded.locate_in[e];
            scenes[t].mask[e] = own.mask[e];
            scenes[t].locate_in[e] = own.locate_in[e];
            prev = own;
        }
    }
    Ok(Rollout { predictions, scenes })
}
