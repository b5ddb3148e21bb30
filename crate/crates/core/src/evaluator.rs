//! Document-level, sentence-level and recipe-style scoring of prediction
//! rows against gold rows.
//!
//! Set precision and recall use the convention that an empty denominator
//! scores 1 when the other side is empty too and 0 otherwise.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::corpus::{Action, Location, PredictionRecord};

/// Per-entity rows indexed by step, grouped per paragraph.
type Paragraphs<'a> = BTreeMap<&'a str, BTreeMap<&'a str, BTreeMap<usize, &'a PredictionRecord>>>;

fn group(rows: &[PredictionRecord]) -> Paragraphs<'_> {
    let mut out: Paragraphs<'_> = BTreeMap::new();
    for r in rows {
        out.entry(r.para_id.as_str())
            .or_default()
            .entry(r.entity.as_str())
            .or_default()
            .insert(r.step, r);
    }
    out
}

pub fn set_precision_recall<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> (f64, f64) {
    let hit = pred.intersection(gold).count() as f64;
    let ratio = |den: usize, other: usize| match (den, other) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (d, _) => hit / d as f64,
    };
    (ratio(pred.len(), gold.len()), ratio(gold.len(), pred.len()))
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        Prf {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

/// What one paragraph's rows say happened, as tuple sets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocTuples {
    pub inputs: BTreeSet<String>,
    pub outputs: BTreeSet<String>,
    /// `(step, location, destroyed, created)`.
    pub conversions: BTreeSet<(usize, Location, Vec<String>, Vec<String>)>,
    /// `(entity, step, from, to)`.
    pub moves: BTreeSet<(String, usize, Location, Location)>,
}

fn exists_before_start(rows: &BTreeMap<usize, &PredictionRecord>) -> bool {
    rows.values().next().is_some_and(|r| !r.before.is_absent())
}

fn exists_at_end(rows: &BTreeMap<usize, &PredictionRecord>) -> bool {
    rows.values().next_back().is_some_and(|r| !r.after.is_absent())
}

pub fn doc_tuples(entities: &BTreeMap<&str, BTreeMap<usize, &PredictionRecord>>) -> DocTuples {
    let mut t = DocTuples::default();
    let mut destroyed: BTreeMap<(usize, Location), Vec<String>> = BTreeMap::new();
    let mut created: BTreeMap<(usize, Location), Vec<String>> = BTreeMap::new();
    for (&entity, rows) in entities {
        let start = exists_before_start(rows);
        let end = exists_at_end(rows);
        let was_destroyed = rows.values().any(|r| r.action == Action::Destroy);
        if start && was_destroyed && !end {
            t.inputs.insert(entity.to_string());
        }
        if end && !start {
            t.outputs.insert(entity.to_string());
        }
        for (&step, r) in rows {
            match r.action {
                Action::Destroy => destroyed
                    .entry((step, r.before.clone()))
                    .or_default()
                    .push(entity.to_string()),
                Action::Create => created
                    .entry((step, r.after.clone()))
                    .or_default()
                    .push(entity.to_string()),
                Action::Move => {
                    t.moves
                        .insert((entity.to_string(), step, r.before.clone(), r.after.clone()));
                }
                Action::None => {}
            }
        }
    }
    for (key, mut d) in destroyed {
        if let Some(c) = created.get(&key) {
            let mut c = c.clone();
            d.sort();
            c.sort();
            t.conversions.insert((key.0, key.1, d, c));
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DocLevelReport {
    pub inputs: Prf,
    pub outputs: Prf,
    pub conversions: Prf,
    pub moves: Prf,
    /// Mean of the four question F1 scores.
    pub overall_f1: f64,
    pub paragraphs: usize,
}

fn warn_missing(pred: &Paragraphs<'_>, gold: &Paragraphs<'_>) {
    for (para, ents) in gold {
        for entity in ents.keys() {
            let found = pred.get(para).is_some_and(|p| p.contains_key(entity));
            if !found {
                log::warn!("{para}: no predictions for entity {entity:?}; counted as all-miss");
            }
        }
    }
}

/// Inputs, outputs, conversions and moves, each scored per paragraph by set
/// comparison; precision and recall are averaged over the gold paragraphs
/// and F1 is taken from the averages.
pub fn eval_document_level(pred_rows: &[PredictionRecord], gold_rows: &[PredictionRecord]) -> DocLevelReport {
    let pred = group(pred_rows);
    let gold = group(gold_rows);
    warn_missing(&pred, &gold);
    let empty = BTreeMap::new();
    let mut sums = [(0.0, 0.0); 4];
    for (para, gold_ents) in &gold {
        let g = doc_tuples(gold_ents);
        let p = doc_tuples(pred.get(para).unwrap_or(&empty));
        let scores = [
            set_precision_recall(&p.inputs, &g.inputs),
            set_precision_recall(&p.outputs, &g.outputs),
            set_precision_recall(&p.conversions, &g.conversions),
            set_precision_recall(&p.moves, &g.moves),
        ];
        for (s, (pp, rr)) in sums.iter_mut().zip(scores) {
            s.0 += pp;
            s.1 += rr;
        }
    }
    let n = gold.len().max(1) as f64;
    let q: Vec<Prf> = sums.iter().map(|(p, r)| Prf::new(p / n, r / n)).collect();
    DocLevelReport {
        inputs: q[0],
        outputs: q[1],
        conversions: q[2],
        moves: q[3],
        overall_f1: q.iter().map(|x| x.f1).sum::<f64>() / 4.0,
        paragraphs: gold.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub correct: usize,
    pub asked: usize,
}

impl Tally {
    fn record(&mut self, ok: bool) {
        self.asked += 1;
        self.correct += ok as usize;
    }

    /// Accuracy; a category with no questions scores 1.
    pub fn accuracy(&self) -> f64 {
        if self.asked == 0 {
            1.0
        } else {
            self.correct as f64 / self.asked as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SentLevelReport {
    pub cat1: f64,
    pub cat2: f64,
    pub cat3: f64,
    pub macro_avg: f64,
    pub micro_avg: f64,
    pub tallies: [Tally; 3],
}

const EVENTS: [Action; 3] = [Action::Create, Action::Destroy, Action::Move];

/// First event of a kind: its step and the location(s) it concerns.
fn first_event(rows: Option<&BTreeMap<usize, &PredictionRecord>>, kind: Action) -> Option<(usize, Vec<Location>)> {
    let (step, r) = rows?.iter().find(|(_, r)| r.action == kind)?;
    let locs = match kind {
        Action::Create => vec![r.after.clone()],
        Action::Destroy => vec![r.before.clone()],
        _ => vec![r.before.clone(), r.after.clone()],
    };
    Some((*step, locs))
}

/// Whether, when and where each gold entity is created, destroyed and moved.
/// "Where" is asked only when the gold location of the first event is known.
pub fn eval_sentence_level(pred_rows: &[PredictionRecord], gold_rows: &[PredictionRecord]) -> SentLevelReport {
    let pred = group(pred_rows);
    let gold = group(gold_rows);
    warn_missing(&pred, &gold);
    let mut cats = [Tally { correct: 0, asked: 0 }; 3];
    for (para, ents) in &gold {
        for (entity, gold_seq) in ents {
            let pred_seq = pred.get(para).and_then(|p| p.get(entity));
            for kind in EVENTS {
                let g = first_event(Some(gold_seq), kind);
                let p = first_event(pred_seq, kind);
                cats[0].record(g.is_some() == p.is_some());
                let Some((g_step, g_locs)) = g else { continue };
                cats[1].record(p.as_ref().is_some_and(|(s, _)| *s == g_step));
                let known = g_locs.last().is_some_and(|l| *l != Location::Unknown);
                if known {
                    cats[2].record(p.as_ref().is_some_and(|(_, l)| *l == g_locs));
                }
            }
        }
    }
    let acc: Vec<f64> = cats.iter().map(Tally::accuracy).collect();
    let asked: usize = cats.iter().map(|c| c.asked).sum();
    let correct: usize = cats.iter().map(|c| c.correct).sum();
    SentLevelReport {
        cat1: acc[0],
        cat2: acc[1],
        cat3: acc[2],
        macro_avg: acc.iter().sum::<f64>() / 3.0,
        micro_avg: if asked == 0 { 1.0 } else { correct as f64 / asked as f64 },
        tallies: cats,
    }
}

/// Location changes with their timestep: moves, plus creations at a known
/// location.
pub fn location_changes(rows: &[PredictionRecord]) -> BTreeSet<(String, String, usize, Location)> {
    rows.iter()
        .filter(|r| match r.action {
            Action::Move => true,
            Action::Create => !matches!(r.after, Location::Unknown | Location::Absent),
            _ => false,
        })
        .map(|r| (r.para_id.clone(), r.entity.clone(), r.step, r.after.clone()))
        .collect()
}

pub fn eval_recipes(pred_rows: &[PredictionRecord], gold_rows: &[PredictionRecord]) -> Prf {
    let (p, r) = set_precision_recall(&location_changes(pred_rows), &location_changes(gold_rows));
    Prf::new(p, r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub document: DocLevelReport,
    pub sentence: SentLevelReport,
    pub recipes: Prf,
}

pub fn evaluate(pred_rows: &[PredictionRecord], gold_rows: &[PredictionRecord]) -> EvaluationReport {
    EvaluationReport {
        document: eval_document_level(pred_rows, gold_rows),
        sentence: eval_sentence_level(pred_rows, gold_rows),
        recipes: eval_recipes(pred_rows, gold_rows),
    }
}

impl fmt::Display for EvaluationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = &self.document;
        writeln!(f, "{:<14}{:>10}{:>10}{:>10}", "question", "precision", "recall", "f1")?;
        for (name, q) in [
            ("inputs", d.inputs),
            ("outputs", d.outputs),
            ("conversions", d.conversions),
            ("moves", d.moves),
            ("recipes", self.recipes),
        ] {
            writeln!(f, "{name:<14}{:>10.4}{:>10.4}{:>10.4}", q.precision, q.recall, q.f1)?;
        }
        writeln!(f, "document F1   {:.4}", d.overall_f1)?;
        let s = &self.sentence;
        writeln!(
            f,
            "sentence      cat1 {:.4}  cat2 {:.4}  cat3 {:.4}  macro {:.4}  micro {:.4}",
            s.cat1, s.cat2, s.cat3, s.macro_avg, s.micro_avg
        )
    }
}
