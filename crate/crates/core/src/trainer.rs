//! Maximum-likelihood training with Adam and dev-set model selection.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::context_encoder::Vocab;
use crate::corpus::{PredictionRecord, ProcedureInstance, Split, Triple};
use crate::error::{Result, SgrError};
use crate::evaluator::eval_document_level;
use crate::context_encoder::EncoderConfig;
use crate::model::{build_graph, knowledge_relations, vocab_texts, ModelConfig, PreparedInstance, SgrModel};
use crate::numerics::{grad_check, GradCheckReport, ParamGrads, ParamStore, Tape, Tensor, Var};
use crate::predictor::{argmax, rollout, teacher_forced_logits, teacher_forced_logits_with, InvocationCounter, RolloutMode, ScenePrediction, StepLogits};
use crate::scene_graph::SceneGraph;
use crate::state_reasoner::{apply_constraints, emit_predictions, gold_predictions, infer_states};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate on dev every this many epochs (and after the last one).
    pub eval_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            batch_size: 16,
            epochs: 500,
            seed: 0,
            eval_every: 25,
            model: ModelConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| SgrError::Parse {
        line,
        message: format!("invalid value {value:?} for {key}"),
    })
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unmentioned keys
    /// keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut dim = None;
        let mut ffn = None;
        let mut head = None;
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| SgrError::Parse {
                line: ln,
                message: format!("expected key=value, found {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let enc = &mut cfg.model.encoder;
            match key {
                "learning_rate" => cfg.learning_rate = parse_value(ln, key, value)?,
                "batch_size" => cfg.batch_size = parse_value(ln, key, value)?,
                "epochs" => cfg.epochs = parse_value(ln, key, value)?,
                "seed" => cfg.seed = parse_value(ln, key, value)?,
                "eval_every" => cfg.eval_every = parse_value(ln, key, value)?,
                "hidden_size" => dim = Some(parse_value(ln, key, value)?),
                "ffn_dim" => ffn = Some(parse_value(ln, key, value)?),
                "head_hidden" => head = Some(parse_value(ln, key, value)?),
                "layers" => enc.layers = parse_value(ln, key, value)?,
                "heads" => enc.heads = parse_value(ln, key, value)?,
                "max_len" => enc.max_len = parse_value(ln, key, value)?,
                other => {
                    return Err(SgrError::Parse {
                        line: ln,
                        message: format!("unknown configuration key {other:?}"),
                    })
                }
            }
        }
        if let Some(d) = dim {
            let keep = cfg.model.encoder;
            cfg.model = ModelConfig::with_dim(d);
            cfg.model.encoder.layers = keep.layers;
            cfg.model.encoder.heads = keep.heads;
            cfg.model.encoder.max_len = keep.max_len;
        }
        if let Some(f) = ffn {
            cfg.model.encoder.ffn_dim = f;
        }
        if let Some(h) = head {
            cfg.model.head_hidden = h;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SgrError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.model.encoder;
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("eval_every", self.eval_every),
            ("hidden_size", e.dim),
            ("layers", e.layers),
            ("heads", e.heads),
            ("ffn_dim", e.ffn_dim),
            ("max_len", e.max_len),
            ("head_hidden", self.model.head_hidden),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(SgrError::contract(format!("{k} must be positive")));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(SgrError::contract("learning_rate must be positive"));
        }
        if !e.dim.is_multiple_of(e.heads) {
            return Err(SgrError::contract(format!(
                "hidden_size {} is not divisible by heads {}",
                e.dim, e.heads
            )));
        }
        Ok(())
    }
}

/// Gold targets of one scene: mask bits and the location column of every
/// existing entity.
fn targets(gold: &SceneGraph, entities: usize) -> (Vec<f64>, Vec<Option<usize>>) {
    let bits = (0..entities).map(|e| gold.mask[e] as u8 as f64).collect();
    (bits, gold.locate_in.clone())
}

/// Summed mask binary cross-entropy plus location cross-entropy over
/// existing entities, over all steps `0..=T`.
pub fn step_loss(tape: &Tape, logits: &[StepLogits], gold: &[SceneGraph]) -> Result<Var> {
    if logits.len() != gold.len() || logits.is_empty() {
        return Err(SgrError::contract(format!(
            "{} predicted steps for {} gold scenes",
            logits.len(),
            gold.len()
        )));
    }
    let mut terms = Vec::with_capacity(2 * logits.len());
    for (l, g) in logits.iter().zip(gold) {
        let (bits, cols) = targets(g, g.locate_in.len());
        terms.push(tape.bce_with_logits(l.mask, &bits)?);
        terms.push(tape.cross_entropy_rows(l.location, &cols)?);
    }
    let stacked = tape.concat_rows(&terms)?;
    tape.sum(stacked)
}

/// The same loss computed directly from probabilities.
pub fn probability_loss(predictions: &[ScenePrediction], gold: &[SceneGraph]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(SgrError::contract(format!(
            "{} predicted steps for {} gold scenes",
            predictions.len(),
            gold.len()
        )));
    }
    let mut loss = 0.0;
    for (p, g) in predictions.iter().zip(gold) {
        for (e, &prob) in p.mask_probs.iter().enumerate() {
            loss -= if g.mask[e] { prob.ln() } else { (1.0 - prob).ln() };
            if let Some(c) = g.locate_in[e] {
                loss -= p.loc_probs[e][c].ln();
            }
        }
    }
    Ok(loss)
}

/// Loss and parameter gradients of one paragraph.
pub fn instance_gradients(model: &SgrModel, prep: &PreparedInstance) -> Result<(f64, ParamGrads)> {
    let gold = prep.gold.as_ref().ok_or_else(|| {
        SgrError::contract(format!("{}: training needs gold annotations", prep.instance.para_id))
    })?;
    let tape = Tape::new();
    let logits = teacher_forced_logits(&tape, model, prep)?;
    let loss = step_loss(&tape, &logits, gold)?;
    let value = tape.scalar_value(loss)?;
    if !value.is_finite() {
        return Err(SgrError::NonFinite { op: "step_loss" });
    }
    let grads = tape.backward(loss)?;
    Ok((value, grads.param_grads(&model.store)))
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Autoregressive prediction rows of one paragraph (the full inference
/// pipeline: rollout, state diffing, constraint repair, rows).
pub fn predict_records(
    model: &SgrModel,
    prep: &PreparedInstance,
    counter: Option<&InvocationCounter>,
) -> Result<Vec<PredictionRecord>> {
    let out = rollout(model, prep, RolloutMode::Autoregressive, counter)?;
    let trajectories: Vec<_> = infer_states(&prep.graph, &out.scenes)?
        .iter()
        .map(apply_constraints)
        .collect();
    Ok(emit_predictions(&prep.instance.para_id, &trajectories))
}

/// Document-level F1 of autoregressive predictions over prepared paragraphs.
pub fn document_f1(model: &SgrModel, preps: &[PreparedInstance]) -> Result<f64> {
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for p in preps {
        pred.extend(predict_records(model, p, None)?);
        gold.extend(gold_predictions(&p.instance)?);
    }
    Ok(eval_document_level(&pred, &gold).overall_f1)
}

/// Share of gold mask bits and gold location argmaxes reproduced under
/// teacher forcing.
pub fn teacher_forced_match(model: &SgrModel, preps: &[PreparedInstance]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for p in preps {
        let gold = p.gold.as_ref().ok_or_else(|| SgrError::contract("gold scenes required"))?;
        let out = rollout(model, p, RolloutMode::TeacherForced, None)?;
        for (t, g) in gold.iter().enumerate() {
            for e in 0..p.graph.num_entities() {
                total += 1;
                hit += (out.scenes[t].mask[e] == g.mask[e]) as usize;
                if g.mask[e] {
                    total += 1;
                    let col = argmax(&out.predictions[t].loc_probs[e]);
                    hit += (Some(col) == g.locate_in[e]) as usize;
                }
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_doc_f1: Option<f64>,
}

pub fn format_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,dev_doc_f1\n");
    for e in log {
        let f1 = e.dev_doc_f1.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:.9},{}", e.epoch, e.train_loss, f1);
    }
    s
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: SgrModel,
    pub train: Vec<PreparedInstance>,
    pub dev: Vec<PreparedInstance>,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    /// Builds graphs, the vocabulary and a freshly initialised model.
    pub fn new(
        train: &[ProcedureInstance],
        dev: &[ProcedureInstance],
        config: TrainConfig,
        triples: &[Triple],
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(SgrError::contract("training corpus is empty"));
        }
        if let Some(bad) = train.iter().chain(dev).find(|i| !i.has_gold()) {
            return Err(SgrError::contract(format!("{}: no gold annotations", bad.para_id)));
        }
        let train_graphs = train
            .iter()
            .map(|i| build_graph(i, Split::Train, triples))
            .collect::<Result<Vec<_>>>()?;
        let dev_graphs = dev
            .iter()
            .map(|i| build_graph(i, Split::Dev, triples))
            .collect::<Result<Vec<_>>>()?;
        let vocab = Vocab::build(vocab_texts(train, &train_graphs));
        let relations = knowledge_relations(&train_graphs);
        let model = SgrModel::new(config.model, vocab, &relations, config.seed)?;
        let prep = |insts: &[ProcedureInstance], graphs: Vec<_>| {
            insts
                .iter()
                .zip(graphs)
                .map(|(i, g)| model.prepare(i, g))
                .collect::<Result<Vec<_>>>()
        };
        let train_prep = prep(train, train_graphs)?;
        let dev_prep = prep(dev, dev_graphs)?;
        Ok(Trainer {
            adam: Adam::new(&model.store, config.learning_rate),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
            config,
            model,
            train: train_prep,
            dev: dev_prep,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over the shuffled training set; returns the mean
    /// per-paragraph loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let mut acc = ParamGrads::zeros_like(&self.model.store);
            for &i in batch {
                let (loss, grads) = instance_gradients(&self.model, &self.train[i]).map_err(|e| {
                    SgrError::contract(format!(
                        "epoch {}, paragraph {}: {e}",
                        self.epoch + 1,
                        self.train[i].instance.para_id
                    ))
                })?;
                total += loss;
                acc.merge(&grads);
            }
            acc.scale(1.0 / batch.len() as f64);
            self.adam.update(&mut self.model.store, &acc);
        }
        self.epoch += 1;
        Ok(total / self.train.len() as f64)
    }

    pub fn dev_f1(&self) -> Result<f64> {
        document_f1(&self.model, &self.dev)
    }

    /// Trains for the configured epochs, keeping the parameters with the best
    /// dev document F1 (the earliest on ties). Without a dev set the final
    /// parameters are kept.
    pub fn fit(mut self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
        let mut log = Vec::with_capacity(self.config.epochs);
        let mut best: Option<(f64, usize, ParamStore)> = None;
        for _ in 0..self.config.epochs {
            let train_loss = self.run_epoch()?;
            let due = self.epoch.is_multiple_of(self.config.eval_every) || self.epoch == self.config.epochs;
            let dev_doc_f1 = if due && !self.dev.is_empty() {
                Some(self.dev_f1()?)
            } else {
                None
            };
            if let Some(f) = dev_doc_f1 {
                if best.as_ref().is_none_or(|(b, _, _)| f > *b) {
                    best = Some((f, self.epoch, self.model.store.clone()));
                }
            }
            let entry = EpochLog {
                epoch: self.epoch,
                train_loss,
                dev_doc_f1,
            };
            on_epoch(&entry);
            log.push(entry);
        }
        let final_model = self.model.clone();
        let (best_dev_f1, best_epoch, model) = match best {
            Some((f, e, store)) => {
                let mut m = self.model;
                m.store = store;
                (Some(f), e, m)
            }
            None => (None, self.epoch, self.model),
        };
        Ok(TrainOutcome {
            model,
            final_model,
            log,
            best_epoch,
            best_dev_f1,
            train: self.train,
        })
    }
}

pub struct TrainOutcome {
    /// Parameters selected on dev.
    pub model: SgrModel,
    pub final_model: SgrModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_f1: Option<f64>,
    pub train: Vec<PreparedInstance>,
}

pub fn train(
    train: &[ProcedureInstance],
    dev: &[ProcedureInstance],
    config: TrainConfig,
    triples: &[Triple],
) -> Result<TrainOutcome> {
    Trainer::new(train, dev, config, triples)?.fit(|e| {
        log::info!("epoch {} loss {:.6} dev F1 {:?}", e.epoch, e.train_loss, e.dev_doc_f1)
    })
}

/// Finite-difference check of every parameter of a freshly initialised
/// model of width `dim` on one annotated paragraph, under the training loss.
pub fn full_model_grad_check(
    instance: &ProcedureInstance,
    dim: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let graph = build_graph(instance, Split::Train, &[])?;
    let vocab = Vocab::build(vocab_texts(std::slice::from_ref(instance), std::slice::from_ref(&graph)));
    let relations = knowledge_relations(std::slice::from_ref(&graph));
    let config = ModelConfig {
        encoder: EncoderConfig {
            dim,
            ffn_dim: 2 * dim,
            max_len: 32,
            ..EncoderConfig::default()
        },
        head_hidden: dim,
    };
    let model = SgrModel::new(config, vocab, &relations, seed)?;
    let prep = model.prepare(instance, graph)?;
    let gold = prep.gold.clone().ok_or_else(|| SgrError::contract("gradient check needs gold annotations"))?;
    grad_check(
        |tape, store| {
            let logits = teacher_forced_logits_with(tape, &model, store, &prep)?;
            step_loss(tape, &logits, &gold)
        },
        &model.store,
        tolerance,
        None,
    )
}
