//! The dynamic world model.
//!
//! A [`CompleteGraph`] fixes the concept universe of one paragraph. Node
//! indices follow a stable layout:
//!
//! ```text
//! [0, N)            entities
//! [N, N+L)          location candidates
//! N+L               unknown location ("?")
//! [N+L+1, M-1)      knowledge concepts
//! M-1               global node
//! ```
//!
//! A [`SceneGraph`] is one timestep's view over it: which entities exist and
//! which location column each existing entity is in. Location columns are
//! numbered `0..=L`, column `L` being the unknown location.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::corpus::{
    contains_span, entity_aliases, match_entities, normalize, tokenize, Location, ProcedureInstance,
    StateLabel, Triple,
};
use crate::error::{Result, SgrError};

pub const LOCATE_IN: &str = "LocateIn";
pub const ENT_ENT: &str = "EntEnt";
pub const LOC_LOC: &str = "LocLoc";

/// Relation indices of the built-in relations in every relation vocabulary.
pub const LOCATE_IN_REL: usize = 0;
pub const ENT_ENT_REL: usize = 1;
pub const LOC_LOC_REL: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ConceptKind {
    Entity,
    Location,
    Knowledge,
    Global,
    UnkLoc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConceptNode {
    pub id: usize,
    pub surface: String,
    pub kind: ConceptKind,
}

/// Static concept universe of one paragraph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompleteGraph {
    nodes: Vec<ConceptNode>,
    relation_vocab: Vec<String>,
    static_edges: BTreeSet<(usize, usize, usize)>,
    num_entities: usize,
    num_locations: usize,
}

pub const GLOBAL_SURFACE: &str = "[GLOBAL]";
pub const UNK_LOC_SURFACE: &str = "[UNKLOC]";

impl CompleteGraph {
    pub fn nodes(&self) -> &[ConceptNode] {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_locations(&self) -> usize {
        self.num_locations
    }

    /// Location columns including the unknown location.
    pub fn num_columns(&self) -> usize {
        self.num_locations + 1
    }

    pub fn relation_vocab(&self) -> &[String] {
        &self.relation_vocab
    }

    pub fn static_edges(&self) -> &BTreeSet<(usize, usize, usize)> {
        &self.static_edges
    }

    pub fn unk_loc_index(&self) -> usize {
        self.num_entities + self.num_locations
    }

    pub fn unk_loc_column(&self) -> usize {
        self.num_locations
    }

    pub fn global_index(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn column_node(&self, column: usize) -> usize {
        self.num_entities + column
    }

    pub fn entity_surface(&self, entity: usize) -> &str {
        &self.nodes[entity].surface
    }

    /// Surface of a location column; the last column is `?`.
    pub fn column_location(&self, column: usize) -> Location {
        if column == self.unk_loc_column() {
            Location::Unknown
        } else {
            Location::Span(self.nodes[self.column_node(column)].surface.clone())
        }
    }

    /// Column for a gold location (`?` maps to the unknown column).
    pub fn location_column(&self, loc: &Location) -> Option<usize> {
        match loc {
            Location::Unknown => Some(self.unk_loc_column()),
            Location::Absent => None,
            Location::Span(s) => {
                let norm = normalize(s);
                (0..self.num_locations).find(|&c| self.nodes[self.column_node(c)].surface == norm)
            }
        }
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relation_vocab.iter().position(|r| r == name)
    }

    /// Undirected static relations between two nodes.
    pub fn relations_between(&self, a: usize, b: usize) -> Vec<usize> {
        self.static_edges
            .iter()
            .filter(|(i, j, _)| (*i == a && *j == b) || (*i == b && *j == a))
            .map(|(_, _, r)| *r)
            .collect()
    }

    fn add_relation(&mut self, name: &str) -> usize {
        match self.relation_index(name) {
            Some(i) => i,
            None => {
                self.relation_vocab.push(name.to_string());
                self.relation_vocab.len() - 1
            }
        }
    }

    fn add_knowledge_node(&mut self, surface: String) -> usize {
        let global = self.nodes.pop().expect("global node present");
        let id = self.nodes.len();
        self.nodes.push(ConceptNode {
            id,
            surface,
            kind: ConceptKind::Knowledge,
        });
        self.nodes.push(ConceptNode {
            id: id + 1,
            ..global
        });
        id
    }

    /// Node whose surface (or any entity alias) equals `surface`.
    fn find_node(&self, surface: &str) -> Option<usize> {
        self.nodes.iter().position(|n| match n.kind {
            ConceptKind::Entity => {
                n.surface == surface
                    || entity_aliases(&n.surface).iter().any(|a| a.join(" ") == surface)
            }
            ConceptKind::Location | ConceptKind::Knowledge => n.surface == surface,
            ConceptKind::Global | ConceptKind::UnkLoc => false,
        })
    }
}

/// Builds the complete graph from entities and location candidates, with
/// entity-entity and location-location edges for sentence co-mentions.
pub fn build_complete_graph(
    instance: &ProcedureInstance,
    candidates: &[String],
) -> Result<CompleteGraph> {
    if instance.entities.is_empty() {
        return Err(SgrError::contract(format!(
            "{}: cannot build a graph without tracked entities",
            instance.para_id
        )));
    }
    let mut nodes = Vec::new();
    for e in &instance.entities {
        nodes.push(ConceptNode {
            id: nodes.len(),
            surface: e.to_lowercase(),
            kind: ConceptKind::Entity,
        });
    }
    let mut locations: Vec<String> = Vec::new();
    for c in candidates {
        let norm = normalize(c);
        if !norm.is_empty() && !locations.contains(&norm) {
            locations.push(norm);
        }
    }
    for l in &locations {
        nodes.push(ConceptNode {
            id: nodes.len(),
            surface: l.clone(),
            kind: ConceptKind::Location,
        });
    }
    nodes.push(ConceptNode {
        id: nodes.len(),
        surface: UNK_LOC_SURFACE.into(),
        kind: ConceptKind::UnkLoc,
    });
    nodes.push(ConceptNode {
        id: nodes.len(),
        surface: GLOBAL_SURFACE.into(),
        kind: ConceptKind::Global,
    });

    let n = instance.entities.len();
    let loc_tokens: Vec<Vec<String>> = locations.iter().map(|l| tokenize(l)).collect();
    let mut edges = BTreeSet::new();
    for sentence in &instance.sentences {
        let toks = tokenize(sentence);
        let mut ents: Vec<usize> = match_entities(&toks, &instance.entities)
            .iter()
            .map(|m| m.entity)
            .collect();
        ents.sort_unstable();
        ents.dedup();
        for (a, &i) in ents.iter().enumerate() {
            for &j in &ents[a + 1..] {
                edges.insert((i, j, ENT_ENT_REL));
            }
        }
        let locs: Vec<usize> = (0..locations.len())
            .filter(|&c| contains_span(&toks, &loc_tokens[c]))
            .collect();
        for (a, &i) in locs.iter().enumerate() {
            for &j in &locs[a + 1..] {
                edges.insert((n + i, n + j, LOC_LOC_REL));
            }
        }
    }

    Ok(CompleteGraph {
        nodes,
        relation_vocab: vec![LOCATE_IN.into(), ENT_ENT.into(), LOC_LOC.into()],
        static_edges: edges,
        num_entities: n,
        num_locations: locations.len(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeReport {
    pub added_nodes: usize,
    pub added_edges: usize,
    pub skipped_malformed: usize,
    pub ignored_unanchored: usize,
}

/// Adds knowledge concepts one hop away from the paragraph's own concepts.
///
/// A triple is applied when at least one endpoint matches an entity or
/// location node; the other endpoint either matches an existing node or
/// becomes a new knowledge node. Triples whose relation is `EntEnt` or
/// `LocLoc` act as explicit co-mention edges and never add nodes.
pub fn enhance_with_knowledge(
    graph: &CompleteGraph,
    triples: &[Triple],
) -> (CompleteGraph, KnowledgeReport) {
    let mut g = graph.clone();
    let mut report = KnowledgeReport::default();
    for t in triples {
        let head = normalize(&t.head);
        let tail = normalize(&t.tail);
        let rel = t.relation.trim();
        if head.is_empty() || tail.is_empty() || rel.is_empty() || rel == LOCATE_IN || head == tail {
            report.skipped_malformed += 1;
            continue;
        }
        let anchored = |idx: Option<usize>| {
            idx.is_some_and(|i| {
                matches!(g.nodes[i].kind, ConceptKind::Entity | ConceptKind::Location)
            })
        };
        let (h, tl) = (g.find_node(&head), g.find_node(&tail));
        let builtin = rel == ENT_ENT || rel == LOC_LOC;
        let (hi, ti) = match (h, tl) {
            (Some(a), Some(b)) if anchored(h) || anchored(tl) => (a, b),
            (Some(a), None) if anchored(h) && !builtin => {
                report.added_nodes += 1;
                (a, g.add_knowledge_node(tail))
            }
            (None, Some(b)) if anchored(tl) && !builtin => {
                report.added_nodes += 1;
                (g.add_knowledge_node(head), b)
            }
            _ => {
                report.ignored_unanchored += 1;
                continue;
            }
        };
        let r = g.add_relation(rel);
        let edge = if builtin { (hi.min(ti), hi.max(ti), r) } else { (hi, ti, r) };
        if g.static_edges.insert(edge) {
            report.added_edges += 1;
        }
    }
    if report.skipped_malformed > 0 {
        log::warn!("skipped {} malformed knowledge triple(s)", report.skipped_malformed);
    }
    (g, report)
}

/// One timestep's world: entity existence and entity locations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SceneGraph {
    /// Presence bit for every node; only entity bits can be 0.
    pub mask: Vec<bool>,
    /// Location column of each entity, `None` when it does not exist.
    pub locate_in: Vec<Option<usize>>,
}

impl SceneGraph {
    /// The scene before anything is known: no entity exists.
    pub fn empty(graph: &CompleteGraph) -> Self {
        let mut mask = vec![true; graph.num_nodes()];
        mask[..graph.num_entities()].iter_mut().for_each(|b| *b = false);
        SceneGraph {
            mask,
            locate_in: vec![None; graph.num_entities()],
        }
    }

    pub fn entity_exists(&self, entity: usize) -> bool {
        self.mask[entity]
    }

    /// The LocateIn slice as a dense `N × (L+1)` 0/1 matrix.
    pub fn locate_in_matrix(&self, graph: &CompleteGraph) -> Vec<Vec<u8>> {
        self.locate_in
            .iter()
            .map(|col| {
                let mut row = vec![0u8; graph.num_columns()];
                if let Some(c) = col {
                    row[*c] = 1;
                }
                row
            })
            .collect()
    }

    pub fn entity_location(&self, graph: &CompleteGraph, entity: usize) -> Location {
        match self.locate_in[entity] {
            Some(c) => graph.column_location(c),
            None => Location::Absent,
        }
    }

    pub fn validate(&self, graph: &CompleteGraph) -> Result<()> {
        let n = graph.num_entities();
        if self.mask.len() != graph.num_nodes() || self.locate_in.len() != n {
            return Err(SgrError::contract(format!(
                "scene graph sized for {} nodes / {} entities, graph has {} / {n}",
                self.mask.len(),
                self.locate_in.len(),
                graph.num_nodes()
            )));
        }
        if let Some(i) = (n..self.mask.len()).find(|&i| !self.mask[i]) {
            return Err(SgrError::contract(format!("non-entity node {i} is masked")));
        }
        for e in 0..n {
            match self.locate_in[e] {
                Some(c) if c >= graph.num_columns() => {
                    return Err(SgrError::contract(format!(
                        "entity {e} located in column {c} of {}",
                        graph.num_columns()
                    )))
                }
                loc if loc.is_some() != self.mask[e] => {
                    return Err(SgrError::contract(format!(
                        "entity {e}: mask bit {} but LocateIn row sum {}",
                        self.mask[e] as u8,
                        loc.is_some() as u8
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Debug dump of a scene sequence.
#[derive(Debug, Clone, Serialize)]
pub struct SceneDump {
    pub step: usize,
    pub mask: Vec<u8>,
    pub locate_in: Vec<[usize; 2]>,
}

pub fn dump_scenes(scenes: &[SceneGraph]) -> Vec<SceneDump> {
    scenes
        .iter()
        .enumerate()
        .map(|(step, s)| SceneDump {
            step,
            mask: s.mask.iter().map(|b| *b as u8).collect(),
            locate_in: s
                .locate_in
                .iter()
                .enumerate()
                .filter_map(|(e, c)| c.map(|c| [e, c]))
                .collect(),
        })
        .collect()
}

/// Location before step 1 implied by the annotations of one entity.
///
/// An explicit initial location wins. Otherwise an entity that already exists
/// keeps its step-1 location when step 1 is `Exist` and is at `?` for any
/// other existing-before label; a non-existing entity is at `-`.
pub fn initial_location(
    states: &[StateLabel],
    locations: &[Location],
    provided: Option<&Location>,
) -> Location {
    let exists = states.first().is_some_and(|s| s.exists_before());
    match provided {
        Some(loc) if !(exists && loc.is_absent()) => normalize_location(loc),
        _ if !exists => Location::Absent,
        _ if states[0] == StateLabel::Exist => normalize_location(&locations[0]),
        _ => Location::Unknown,
    }
}

pub fn normalize_location(loc: &Location) -> Location {
    match loc {
        Location::Span(s) => Location::Span(normalize(s)),
        other => other.clone(),
    }
}

/// Checks one entity's annotation sequence for label validity and
/// state/location consistency.
pub fn check_annotation(
    entity: &str,
    initial: &Location,
    states: &[StateLabel],
    locations: &[Location],
) -> Result<()> {
    let err = |step: usize, what: String| {
        Err(SgrError::contract(format!("entity {entity:?}, step {step}: {what}")))
    };
    let mut existed = !initial.is_absent();
    let mut prev_loc = initial.clone();
    let mut prev_state: Option<StateLabel> = None;
    for (t, (&s, loc)) in states.iter().zip(locations).enumerate() {
        let step = t + 1;
        let loc = normalize_location(loc);
        if s.exists_before() != existed {
            return err(step, format!("state {s} but entity {} exist before this step", if existed { "did" } else { "did not" }));
        }
        if let Some(p) = prev_state {
            if !p.can_follow(s) {
                return err(step, format!("invalid transition {p} -> {s}"));
            }
        } else if s == StateLabel::OutAfter {
            return err(step, "O_B before any Destroy".into());
        }
        if s.exists_after() == loc.is_absent() {
            return err(step, format!("state {s} with location {loc}"));
        }
        match s {
            StateLabel::Exist if loc != prev_loc => {
                return err(step, format!("Exist but location changes {prev_loc} -> {loc}"))
            }
            StateLabel::Move if loc == prev_loc => {
                return err(step, format!("Move but location stays {loc}"))
            }
            _ => {}
        }
        existed = s.exists_after();
        prev_loc = loc;
        prev_state = Some(s);
    }
    Ok(())
}

/// Converts gold state/location annotations into the scene sequence
/// `y_0 .. y_T`.
pub fn construct_gold_graphs(
    instance: &ProcedureInstance,
    graph: &CompleteGraph,
) -> Result<Vec<SceneGraph>> {
    let (Some(states), Some(locations)) = (&instance.gold_states, &instance.gold_locations) else {
        return Err(SgrError::contract(format!(
            "{}: gold states and locations required",
            instance.para_id
        )));
    };
    instance.validate()?;
    let t_max = instance.num_steps();
    let n = graph.num_entities();
    if n != instance.num_entities() {
        return Err(SgrError::contract("graph and instance disagree on entity count"));
    }
    let mut scenes = vec![
        SceneGraph {
            mask: vec![true; graph.num_nodes()],
            locate_in: vec![None; n],
        };
        t_max + 1
    ];
    for e in 0..n {
        let provided = instance.initial_locations.as_ref().map(|v| &v[e]);
        let init = initial_location(&states[e], &locations[e], provided);
        let name = &instance.entities[e];
        check_annotation(name, &init, &states[e], &locations[e])?;
        let seq = std::iter::once(init).chain(locations[e].iter().map(normalize_location));
        for (t, loc) in seq.enumerate() {
            let column = match &loc {
                Location::Absent => None,
                other => Some(graph.location_column(other).ok_or_else(|| {
                    SgrError::contract(format!(
                        "{}: entity {name:?}, step {t}: gold location {other} is not a candidate",
                        instance.para_id
                    ))
                })?),
            };
            scenes[t].mask[e] = column.is_some();
            scenes[t].locate_in[e] = column;
        }
    }
    Ok(scenes)
}
