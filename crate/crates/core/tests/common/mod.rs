//! Fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod oracle;

use rand::seq::SliceRandom;
use rand::Rng;

use sgr_core::corpus::{Location, ProcedureInstance, StateLabel};

pub const ENTITY_POOL: &[&str] = &["water", "sugar", "seed", "rock", "salt", "ice", "oxygen", "egg"];
pub const LOCATION_POOL: &[&str] = &["soil", "root", "stem", "leaf", "cloud", "river", "ocean", "lake"];

/// Bounds for [`random_annotation`].
#[derive(Debug, Clone, Copy)]
pub struct Bounds {
    pub max_steps: usize,
    pub max_entities: usize,
    pub max_locations: usize,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            max_steps: 10,
            max_entities: 6,
            max_locations: 8,
        }
    }
}

/// A random annotated paragraph whose labels obey every transition rule.
/// Entities may be destroyed and created again, and may sit at `?`.
pub fn random_annotation<R: Rng>(rng: &mut R, bounds: Bounds, index: usize) -> ProcedureInstance {
    let t_max = rng.gen_range(1..=bounds.max_steps);
    let n = rng.gen_range(1..=bounds.max_entities);
    let l = rng.gen_range(1..=bounds.max_locations);
    let ents: Vec<&str> = ENTITY_POOL.choose_multiple(rng, n).copied().collect();
    let locs: Vec<&str> = LOCATION_POOL.choose_multiple(rng, l).copied().collect();
    let span = |rng: &mut R| Location::Span(locs[rng.gen_range(0..l)].to_string());

    let mut states = Vec::with_capacity(n);
    let mut locations = Vec::with_capacity(n);
    let mut initial = Vec::with_capacity(n);
    for _ in 0..n {
        let mut cur = match rng.gen_range(0..10) {
            0..=3 => Location::Absent,
            4 => Location::Unknown,
            _ => span(rng),
        };
        initial.push(cur.clone());
        let mut existed = !cur.is_absent();
        let (mut s_row, mut l_row) = (Vec::with_capacity(t_max), Vec::with_capacity(t_max));
        for _ in 0..t_max {
            let (s, next) = if cur.is_absent() {
                if rng.gen_bool(0.4) {
                    let at = if rng.gen_bool(0.15) { Location::Unknown } else { span(rng) };
                    (StateLabel::Create, at)
                } else if existed {
                    (StateLabel::OutAfter, Location::Absent)
                } else {
                    (StateLabel::OutBefore, Location::Absent)
                }
            } else {
                let others: Vec<&str> = locs
                    .iter()
                    .copied()
                    .filter(|x| cur != Location::Span(x.to_string()))
                    .collect();
                match rng.gen_range(0..10) {
                    0..=1 => (StateLabel::Destroy, Location::Absent),
                    2..=5 if !others.is_empty() => (
                        StateLabel::Move,
                        Location::Span(others.choose(rng).expect("non-empty").to_string()),
                    ),
                    _ => (StateLabel::Exist, cur.clone()),
                }
            };
            existed |= !next.is_absent();
            cur = next.clone();
            s_row.push(s);
            l_row.push(next);
        }
        states.push(s_row);
        locations.push(l_row);
    }
    let sentences = (0..t_max)
        .map(|t| format!("in step {t} something happens near the {} .", locs[t % l]))
        .collect();
    ProcedureInstance {
        para_id: format!("rand-{index:04}"),
        prompt: Some(format!("a story about the {} .", ents.join(" and the "))),
        sentences,
        entities: ents.iter().map(|s| s.to_string()).collect(),
        gold_states: Some(states),
        gold_locations: Some(locations),
        initial_locations: Some(initial),
        location_candidates: None,
        knowledge_triples: None,
        entity_mentions: None,
    }
}

/// One entity that exists at every step, one location candidate.
pub fn single_entity_instance(steps: usize) -> ProcedureInstance {
    ProcedureInstance {
        para_id: "single".into(),
        prompt: Some("the stone lies in the field .".into()),
        sentences: (0..steps).map(|_| "the stone lies in the field .".to_string()).collect(),
        entities: vec!["stone".into()],
        gold_states: Some(vec![vec![StateLabel::Exist; steps]]),
        gold_locations: Some(vec![vec![Location::Span("field".into()); steps]]),
        initial_locations: Some(vec![Location::Span("field".into())]),
        location_candidates: Some(vec!["field".into()]),
        knowledge_triples: None,
        entity_mentions: None,
    }
}
