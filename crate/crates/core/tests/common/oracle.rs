//! Brute-force scoring written straight from the metric definitions, with
//! flat row scans and string keys instead of the evaluator's grouped maps.

use sgr_core::corpus::{Action, Location, PredictionRecord};

fn paragraphs(rows: &[PredictionRecord]) -> Vec<String> {
    let mut ids: Vec<String> = rows.iter().map(|r| r.para_id.clone()).collect();
    ids.sort();
    ids.dedup();
    ids
}

fn entities(rows: &[PredictionRecord], para: &str) -> Vec<String> {
    let mut names: Vec<String> = rows
        .iter()
        .filter(|r| r.para_id == para)
        .map(|r| r.entity.clone())
        .collect();
    names.sort();
    names.dedup();
    names
}

fn history<'a>(rows: &'a [PredictionRecord], para: &str, entity: &str) -> Vec<&'a PredictionRecord> {
    let mut h: Vec<&PredictionRecord> = rows
        .iter()
        .filter(|r| r.para_id == para && r.entity == entity)
        .collect();
    h.sort_by_key(|r| r.step);
    h
}

fn ratio(hit: usize, den: usize, other: usize) -> f64 {
    if den == 0 {
        if other == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        hit as f64 / den as f64
    }
}

fn pr(pred: &[String], gold: &[String]) -> (f64, f64) {
    let hit = pred.iter().filter(|p| gold.contains(p)).count();
    (ratio(hit, pred.len(), gold.len()), ratio(hit, gold.len(), pred.len()))
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// The four tuple sets of one paragraph, each sorted and deduplicated.
fn questions(rows: &[PredictionRecord], para: &str) -> [Vec<String>; 4] {
    let mut q: [Vec<String>; 4] = Default::default();
    let mut events: Vec<(usize, Action, Location, String)> = Vec::new();
    for e in entities(rows, para) {
        let h = history(rows, para, &e);
        let before = !h[0].before.is_absent();
        let after = !h[h.len() - 1].after.is_absent();
        if before && !after {
            q[0].push(e.clone());
        }
        if after && !before {
            q[1].push(e.clone());
        }
        for r in &h {
            match r.action {
                Action::Move => q[3].push(format!("{e}|{}|{}|{}", r.step, r.before, r.after)),
                Action::Destroy => events.push((r.step, Action::Destroy, r.before.clone(), e.clone())),
                Action::Create => events.push((r.step, Action::Create, r.after.clone(), e.clone())),
                Action::None => {}
            }
        }
    }
    for (step, kind, loc, _) in &events {
        if *kind != Action::Destroy {
            continue;
        }
        let who = |k: Action| {
            let mut v: Vec<String> = events
                .iter()
                .filter(|(s, a, l, _)| s == step && *a == k && l == loc)
                .map(|x| x.3.clone())
                .collect();
            v.sort();
            v
        };
        let created = who(Action::Create);
        if !created.is_empty() {
            q[2].push(format!("{step}|{loc}|{}|{}", who(Action::Destroy).join(","), created.join(",")));
        }
    }
    for set in q.iter_mut() {
        set.sort();
        set.dedup();
    }
    q
}

/// Per-question (precision, recall, f1) and the overall F1.
pub fn document_level(pred: &[PredictionRecord], gold: &[PredictionRecord]) -> ([(f64, f64, f64); 4], f64) {
    let paras = paragraphs(gold);
    let mut p_sum = [0.0; 4];
    let mut r_sum = [0.0; 4];
    for para in &paras {
        let g = questions(gold, para);
        let p = questions(pred, para);
        for k in 0..4 {
            let (pp, rr) = pr(&p[k], &g[k]);
            p_sum[k] += pp;
            r_sum[k] += rr;
        }
    }
    let n = paras.len() as f64;
    let mut out = [(0.0, 0.0, 0.0); 4];
    for k in 0..4 {
        let (p, r) = (p_sum[k] / n, r_sum[k] / n);
        out[k] = (p, r, f1(p, r));
    }
    let overall = out.iter().map(|x| x.2).sum::<f64>() / 4.0;
    (out, overall)
}

/// Every question asked, as `(category, correct)`.
pub fn sentence_questions(pred: &[PredictionRecord], gold: &[PredictionRecord]) -> Vec<(usize, bool)> {
    let mut asked = Vec::new();
    for para in paragraphs(gold) {
        for e in entities(gold, &para) {
            let g = history(gold, &para, &e);
            let p = history(pred, &para, &e);
            for kind in [Action::Create, Action::Destroy, Action::Move] {
                let first_g = g.iter().find(|r| r.action == kind);
                let first_p = p.iter().find(|r| r.action == kind);
                asked.push((1, first_g.is_some() == first_p.is_some()));
                let Some(gr) = first_g else { continue };
                asked.push((2, first_p.map(|r| r.step) == Some(gr.step)));
                let place = |r: &PredictionRecord| match kind {
                    Action::Create => format!("{}", r.after),
                    Action::Destroy => format!("{}", r.before),
                    _ => format!("{}>{}", r.before, r.after),
                };
                let target = if kind == Action::Destroy { &gr.before } else { &gr.after };
                if *target != Location::Unknown {
                    asked.push((3, first_p.map(|r| place(r)) == Some(place(gr))));
                }
            }
        }
    }
    asked
}

/// Cat-1..3 accuracies, macro and micro averages.
pub fn sentence_level(pred: &[PredictionRecord], gold: &[PredictionRecord]) -> ([f64; 3], f64, f64) {
    let qs = sentence_questions(pred, gold);
    let mut acc = [1.0; 3];
    for (c, slot) in acc.iter_mut().enumerate() {
        let of_c: Vec<bool> = qs.iter().filter(|q| q.0 == c + 1).map(|q| q.1).collect();
        if !of_c.is_empty() {
            *slot = of_c.iter().filter(|&&b| b).count() as f64 / of_c.len() as f64;
        }
    }
    let micro = if qs.is_empty() {
        1.0
    } else {
        qs.iter().filter(|q| q.1).count() as f64 / qs.len() as f64
    };
    (acc, acc.iter().sum::<f64>() / 3.0, micro)
}

/// Location-change precision, recall and F1 over the whole corpus.
pub fn recipes(pred: &[PredictionRecord], gold: &[PredictionRecord]) -> (f64, f64, f64) {
    let changes = |rows: &[PredictionRecord]| {
        let mut v: Vec<String> = rows
            .iter()
            .filter(|r| {
                r.action == Action::Move || (r.action == Action::Create && matches!(r.after, Location::Span(_)))
            })
            .map(|r| format!("{}|{}|{}|{}", r.para_id, r.entity, r.step, r.after))
            .collect();
        v.sort();
        v.dedup();
        v
    };
    let (p, r) = pr(&changes(pred), &changes(gold));
    (p, r, f1(p, r))
}

/// Three hand-built paragraphs: a move/destroy/create chain, a two-to-one
/// conversion, and an entity created at an unknown place.
pub const GOLD_TSV: &str = "\
a\t1\twater\tMOVE\tsoil\troot
a\t2\twater\tDESTROY\troot\t-
a\t3\twater\tNONE\t-\t-
a\t1\tsugar\tNONE\t-\t-
a\t2\tsugar\tCREATE\t-\troot
a\t3\tsugar\tMOVE\troot\tleaf
b\t1\tflour\tNONE\tbowl\tbowl
b\t2\tflour\tDESTROY\tbowl\t-
b\t1\tegg\tNONE\tbowl\tbowl
b\t2\tegg\tDESTROY\tbowl\t-
b\t1\tdough\tNONE\t-\t-
b\t2\tdough\tCREATE\t-\tbowl
c\t1\trock\tCREATE\t-\t?
c\t2\trock\tMOVE\t?\triver
";

/// Predictions for the same paragraphs: a wrong creation site and a missed
/// move in `a`, an early destruction in `b`, nothing at all for `c`.
pub const PRED_TSV: &str = "\
a\t1\twater\tMOVE\tsoil\troot
a\t2\twater\tDESTROY\troot\t-
a\t3\twater\tNONE\t-\t-
a\t1\tsugar\tNONE\t-\t-
a\t2\tsugar\tCREATE\t-\tleaf
a\t3\tsugar\tNONE\tleaf\tleaf
b\t1\tflour\tDESTROY\tbowl\t-
b\t2\tflour\tNONE\t-\t-
b\t1\tegg\tNONE\tbowl\tbowl
b\t2\tegg\tDESTROY\tbowl\t-
b\t1\tdough\tNONE\t-\t-
b\t2\tdough\tCREATE\t-\tbowl
";
