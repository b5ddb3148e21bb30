//! Scoring against the brute-force oracle and hand-worked cases.

mod common;

use std::io::Cursor;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracle;
use sgr_core::corpus::{read_predictions, Location, PredictionRecord, StateLabel};
use sgr_core::evaluator::{evaluate, EvaluationReport};
use sgr_core::state_reasoner::{apply_constraints, emit_predictions, gold_trajectories};

const TOL: f64 = 1e-12;

const LABELS: [StateLabel; 6] = [
    StateLabel::OutBefore,
    StateLabel::Create,
    StateLabel::Exist,
    StateLabel::Move,
    StateLabel::Destroy,
    StateLabel::OutAfter,
];

/// Gold rows for a few random paragraphs, and predictions that copy each
/// gold trajectory with some steps scrambled and then repaired.
fn corpus(seed: u64, paragraphs: usize) -> (Vec<PredictionRecord>, Vec<PredictionRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut gold, mut pred) = (Vec::new(), Vec::new());
    for p in 0..paragraphs {
        let inst = common::random_annotation(&mut rng, common::Bounds::default(), p);
        let trs = gold_trajectories(&inst).unwrap();
        let noisy: Vec<_> = trs
            .iter()
            .map(|tr| {
                let mut raw = tr.clone();
                for t in 0..raw.states.len() {
                    if rng.gen_bool(0.3) {
                        raw.states[t] = *LABELS.choose(&mut rng).unwrap();
                        raw.locations[t] = match rng.gen_range(0..4) {
                            0 => Location::Absent,
                            1 => Location::Unknown,
                            _ => Location::Span(common::LOCATION_POOL.choose(&mut rng).unwrap().to_string()),
                        };
                    }
                }
                apply_constraints(&raw)
            })
            .collect();
        gold.extend(emit_predictions(&inst.para_id, &trs));
        if rng.gen_bool(0.9) {
            pred.extend(emit_predictions(&inst.para_id, &noisy));
        }
    }
    (pred, gold)
}

fn assert_matches_oracle(report: &EvaluationReport, pred: &[PredictionRecord], gold: &[PredictionRecord]) {
    let (questions, overall) = oracle::document_level(pred, gold);
    let d = &report.document;
    for (got, want) in [d.inputs, d.outputs, d.conversions, d.moves].iter().zip(questions) {
        assert!((got.precision - want.0).abs() < TOL);
        assert!((got.recall - want.1).abs() < TOL);
        assert!((got.f1 - want.2).abs() < TOL);
    }
    assert!((d.overall_f1 - overall).abs() < TOL);
    let (cats, macro_avg, micro) = oracle::sentence_level(pred, gold);
    let s = &report.sentence;
    for (got, want) in [s.cat1, s.cat2, s.cat3].iter().zip(cats) {
        assert!((got - want).abs() < TOL, "{got} vs {want}");
    }
    assert!((s.macro_avg - macro_avg).abs() < TOL);
    assert!((s.micro_avg - micro).abs() < TOL);
    let (p, r, f) = oracle::recipes(pred, gold);
    assert!((report.recipes.precision - p).abs() < TOL);
    assert!((report.recipes.recall - r).abs() < TOL);
    assert!((report.recipes.f1 - f).abs() < TOL);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_agree_with_the_oracle(seed in any::<u64>(), paragraphs in 1usize..5) {
        let (pred, gold) = corpus(seed, paragraphs);
        assert_matches_oracle(&evaluate(&pred, &gold), &pred, &gold);
    }

    #[test]
    fn row_order_does_not_matter(seed in any::<u64>()) {
        let (mut pred, mut gold) = corpus(seed, 3);
        let before = evaluate(&pred, &gold);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        pred.shuffle(&mut rng);
        gold.shuffle(&mut rng);
        prop_assert_eq!(evaluate(&pred, &gold), before);
    }

    #[test]
    fn gold_scores_perfectly_against_itself(seed in any::<u64>()) {
        let (_, gold) = corpus(seed, 3);
        let r = evaluate(&gold, &gold);
        prop_assert_eq!(r.document.overall_f1, 1.0);
        prop_assert_eq!(r.sentence.macro_avg, 1.0);
        prop_assert_eq!(r.sentence.micro_avg, 1.0);
        prop_assert_eq!(r.recipes.f1, 1.0);
        for k in [r.document.inputs, r.document.outputs, r.document.conversions, r.document.moves] {
            prop_assert_eq!((k.precision, k.recall), (1.0, 1.0));
        }
    }

    #[test]
    fn scores_are_probabilities(seed in any::<u64>()) {
        let (pred, gold) = corpus(seed, 2);
        let r = evaluate(&pred, &gold);
        let d = &r.document;
        for v in [d.overall_f1, r.sentence.cat1, r.sentence.cat2, r.sentence.cat3, r.recipes.f1, d.moves.precision, d.inputs.recall] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

fn rows(tsv: &str) -> Vec<PredictionRecord> {
    read_predictions(Cursor::new(tsv)).unwrap()
}

#[test]
fn fixture_matches_the_oracle() {
    let (pred, gold) = (rows(oracle::PRED_TSV), rows(oracle::GOLD_TSV));
    assert_matches_oracle(&evaluate(&pred, &gold), &pred, &gold);
}

#[test]
fn recipe_location_changes_by_hand() {
    let gold = rows(
        "r\t1\tegg\tMOVE\tfridge\tbowl\n\
         r\t2\tegg\tMOVE\tbowl\tpan\n\
         r\t1\tbatter\tNONE\t-\t-\n\
         r\t2\tbatter\tCREATE\t-\tbowl\n",
    );
    let pred = rows(
        "r\t1\tegg\tMOVE\tfridge\tbowl\n\
         r\t2\tegg\tMOVE\tbowl\tplate\n\
         r\t1\tbatter\tNONE\t-\t-\n\
         r\t2\tbatter\tCREATE\t-\tbowl\n",
    );
    let r = evaluate(&pred, &gold).recipes;
    assert!((r.precision - 2.0 / 3.0).abs() < TOL);
    assert!((r.recall - 2.0 / 3.0).abs() < TOL);
    assert!((r.f1 - 2.0 / 3.0).abs() < TOL);
}

#[test]
fn right_step_wrong_place_scores_when_but_not_where() {
    let gold = rows("s\t1\tice\tNONE\tlake\tlake\ns\t2\tice\tMOVE\tlake\triver\n");
    let pred = rows("s\t1\tice\tNONE\tlake\tlake\ns\t2\tice\tMOVE\tlake\tocean\n");
    let s = evaluate(&pred, &gold).sentence;
    assert_eq!([s.tallies[0].asked, s.tallies[1].asked, s.tallies[2].asked], [3, 1, 1]);
    assert_eq!([s.tallies[0].correct, s.tallies[1].correct, s.tallies[2].correct], [3, 1, 0]);
    assert_eq!((s.cat1, s.cat2, s.cat3), (1.0, 1.0, 0.0));
    assert!((s.micro_avg - 0.8).abs() < TOL);
}

#[test]
fn unknown_gold_location_is_not_asked_where() {
    let gold = rows("u\t1\tgas\tCREATE\t-\t?\n");
    let pred = rows("u\t1\tgas\tCREATE\t-\tair\n");
    let s = evaluate(&pred, &gold).sentence;
    assert_eq!(s.tallies[2].asked, 0);
    assert_eq!(s.cat3, 1.0);
}

#[test]
fn missing_paragraph_counts_as_all_miss() {
    let gold = rows("m\t1\tsalt\tDESTROY\tpot\t-\n");
    let r = evaluate(&[], &gold);
    assert_eq!(r.document.inputs.recall, 0.0);
    assert_eq!(r.document.inputs.f1, 0.0);
    assert_eq!(r.sentence.cat1, 2.0 / 3.0);
}
