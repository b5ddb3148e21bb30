//! Rule-grammar procedural corpus with exact gold annotations.
//!
//! Each paragraph tracks a few entities over a handful of locations. Every
//! sentence realises one event (a move, creation, destruction, conversion
//! or nothing at all) from a fixed template, so the gold states follow by
//! construction. The prompt states where the entities start out.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Location, ProcedureInstance, StateLabel, Triple};

const ENTITIES: &[&str] = &[
    "water", "sugar", "seed", "rock", "salt", "ice", "oxygen", "egg", "flour", "butter", "dough",
    "sand", "clay", "steam", "oil", "wax", "pollen", "honey",
];

const LOCATIONS: &[&str] = &[
    "soil", "root", "stem", "leaf", "cloud", "river", "ocean", "lake", "field", "barn", "kitchen",
    "oven", "bowl", "jar", "pan", "cave", "valley", "forest", "garden", "shelf",
];

/// Background knowledge; a triple is attached to a paragraph when one of
/// its endpoints is a location of that paragraph.
const KNOWLEDGE: &[(&str, &str, &str)] = &[
    ("plant", "HasA", "root"),
    ("plant", "HasA", "stem"),
    ("plant", "HasA", "leaf"),
    ("oven", "PartOf", "kitchen"),
    ("river", "AtLocation", "valley"),
    ("lake", "AtLocation", "forest"),
    ("bowl", "AtLocation", "shelf"),
    ("jar", "AtLocation", "shelf"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub paragraphs: usize,
    pub seed: u64,
    pub min_steps: usize,
    pub max_steps: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    pub min_locations: usize,
    pub max_locations: usize,
}

impl SyntheticConfig {
    pub fn new(paragraphs: usize, seed: u64) -> Self {
        SyntheticConfig {
            paragraphs,
            seed,
            min_steps: 3,
            max_steps: 6,
            min_entities: 2,
            max_entities: 4,
            min_locations: 3,
            max_locations: 5,
        }
    }
}

#[derive(Clone, Copy)]
enum Event {
    Move { e: usize, to: usize },
    Create { e: usize, at: usize },
    Destroy { e: usize },
    Convert { from: usize, to: usize },
    Nothing,
}

fn pick<'a, R: Rng>(rng: &mut R, options: &[&'a str]) -> &'a str {
    options[rng.gen_range(0..options.len())]
}

fn realise<R: Rng>(rng: &mut R, event: Event, ents: &[&str], locs: &[&str], at: &[Option<usize>]) -> String {
    match event {
        Event::Move { e, to } => {
            let (a, b) = (locs[at[e].expect("moving entity exists")], locs[to]);
            let t = pick(rng, &["the {e} moves from the {a} to the {b} .", "the {e} travels from the {a} into the {b} ."]);
            t.replace("{e}", ents[e]).replace("{a}", a).replace("{b}", b)
        }
        Event::Create { e, at: l } => {
            let t = pick(rng, &["{e} forms in the {l} .", "new {e} appears in the {l} ."]);
            t.replace("{e}", ents[e]).replace("{l}", locs[l])
        }
        Event::Destroy { e } => {
            let l = locs[at[e].expect("destroyed entity exists")];
            let t = pick(rng, &["the {e} disappears from the {l} .", "the {e} vanishes in the {l} ."]);
            t.replace("{e}", ents[e]).replace("{l}", l)
        }
        Event::Convert { from, to } => {
            let l = locs[at[from].expect("converted entity exists")];
            format!("the {} becomes {} in the {l} .", ents[from], ents[to])
        }
        Event::Nothing => pick(rng, &["nothing changes .", "everything stays still ."]).to_string(),
    }
}

fn choose_event<R: Rng>(rng: &mut R, at: &[Option<usize>], num_locs: usize) -> Event {
    let existing: Vec<usize> = (0..at.len()).filter(|&e| at[e].is_some()).collect();
    let absent: Vec<usize> = (0..at.len()).filter(|&e| at[e].is_none()).collect();
    let mut options = vec![0u8, 0, 4];
    if !existing.is_empty() {
        options.extend([0, 0, 0, 2]);
    }
    if !absent.is_empty() {
        options.extend([1, 1]);
    }
    if !existing.is_empty() && !absent.is_empty() {
        options.push(3);
    }
    // Moves need an existing entity.
    if existing.is_empty() {
        options.retain(|&o| o != 0);
    }
    match *options.choose(rng).expect("nothing is always possible") {
        0 => {
            let e = *existing.choose(rng).expect("existing entity");
            let here = at[e].expect("existing entity has a location");
            let others: Vec<usize> = (0..num_locs).filter(|&l| l != here).collect();
            Event::Move {
                e,
                to: *others.choose(rng).expect("at least two locations"),
            }
        }
        1 => Event::Create {
            e: *absent.choose(rng).expect("absent entity"),
            at: rng.gen_range(0..num_locs),
        },
        2 => Event::Destroy {
            e: *existing.choose(rng).expect("existing entity"),
        },
        3 => Event::Convert {
            from: *existing.choose(rng).expect("existing entity"),
            to: *absent.choose(rng).expect("absent entity"),
        },
        _ => Event::Nothing,
    }
}

fn paragraph<R: Rng>(rng: &mut R, cfg: &SyntheticConfig, index: usize) -> ProcedureInstance {
    let n = rng.gen_range(cfg.min_entities..=cfg.max_entities);
    let l = rng.gen_range(cfg.min_locations.max(2)..=cfg.max_locations);
    let t_max = rng.gen_range(cfg.min_steps..=cfg.max_steps);
    let ents: Vec<&str> = ENTITIES.choose_multiple(rng, n).copied().collect();
    let locs: Vec<&str> = LOCATIONS.choose_multiple(rng, l).copied().collect();

    let mut at: Vec<Option<usize>> = (0..n)
        .map(|_| rng.gen_bool(0.6).then(|| rng.gen_range(0..l)))
        .collect();
    let initial: Vec<Location> = at
        .iter()
        .map(|a| a.map_or(Location::Absent, |i| Location::Span(locs[i].to_string())))
        .collect();
    let mut facts: Vec<String> = (0..n)
        .filter_map(|e| at[e].map(|i| format!("the {} is in the {}", ents[e], locs[i])))
        .collect();
    if facts.is_empty() {
        facts.push("nothing is there yet".into());
    }
    let prompt = format!("at first {} .", facts.join(" and "));

    let mut existed: Vec<bool> = at.iter().map(Option::is_some).collect();
    let mut states = vec![Vec::with_capacity(t_max); n];
    let mut locations = vec![Vec::with_capacity(t_max); n];
    let mut sentences = Vec::with_capacity(t_max);
    for _ in 0..t_max {
        let event = choose_event(rng, &at, l);
        sentences.push(realise(rng, event, &ents, &locs, &at));
        let mut label: Vec<Option<StateLabel>> = vec![None; n];
        match event {
            Event::Move { e, to } => {
                at[e] = Some(to);
                label[e] = Some(StateLabel::Move);
            }
            Event::Create { e, at: loc } => {
                at[e] = Some(loc);
                label[e] = Some(StateLabel::Create);
            }
            Event::Destroy { e } => {
                at[e] = None;
                label[e] = Some(StateLabel::Destroy);
            }
            Event::Convert { from, to } => {
                at[to] = at[from];
                at[from] = None;
                label[from] = Some(StateLabel::Destroy);
                label[to] = Some(StateLabel::Create);
            }
            Event::Nothing => {}
        }
        for e in 0..n {
            let s = label[e].unwrap_or(match (at[e], existed[e]) {
                (Some(_), _) => StateLabel::Exist,
                (None, true) => StateLabel::OutAfter,
                (None, false) => StateLabel::OutBefore,
            });
            existed[e] |= at[e].is_some();
            states[e].push(s);
            locations[e].push(at[e].map_or(Location::Absent, |i| Location::Span(locs[i].to_string())));
        }
    }

    let knowledge: Vec<Triple> = KNOWLEDGE
        .iter()
        .filter(|(h, _, t)| locs.contains(h) || locs.contains(t))
        .map(|(h, r, t)| Triple::new(h, r, t))
        .collect();
    ProcedureInstance {
        para_id: format!("syn-{index:04}"),
        prompt: Some(prompt),
        sentences,
        entities: ents.iter().map(|s| s.to_string()).collect(),
        gold_states: Some(states),
        gold_locations: Some(locations),
        initial_locations: Some(initial),
        location_candidates: None,
        knowledge_triples: (!knowledge.is_empty()).then_some(knowledge),
        entity_mentions: None,
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Vec<ProcedureInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.paragraphs).map(|i| paragraph(&mut rng, cfg, i)).collect()
}

/// A tiny annotated paragraph: two entities, three locations and one
/// knowledge concept (eight graph nodes), three steps.
pub fn toy_instance() -> ProcedureInstance {
    let loc = Location::parse;
    ProcedureInstance {
        para_id: "toy".into(),
        prompt: Some("at first the water is in the soil .".into()),
        sentences: vec![
            "the water moves from the soil to the root .".into(),
            "the water becomes sugar in the root .".into(),
            "the sugar travels from the root into the leaf .".into(),
        ],
        entities: vec!["water".into(), "sugar".into()],
        gold_states: Some(vec![
            vec![StateLabel::Move, StateLabel::Destroy, StateLabel::OutAfter],
            vec![StateLabel::OutBefore, StateLabel::Create, StateLabel::Move],
        ]),
        gold_locations: Some(vec![
            vec![loc("root"), loc("-"), loc("-")],
            vec![loc("-"), loc("root"), loc("leaf")],
        ]),
        initial_locations: Some(vec![loc("soil"), loc("-")]),
        location_candidates: None,
        knowledge_triples: Some(vec![Triple::new("plant", "HasA", "root")]),
        entity_mentions: None,
    }
}
