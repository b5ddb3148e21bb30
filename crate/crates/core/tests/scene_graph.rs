//! Graph construction, knowledge enhancement and the gold scene round trip.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sgr_core::corpus::{Location, Split, StateLabel, Triple};
use sgr_core::model::build_graph;
use sgr_core::scene_graph::{
    build_complete_graph, construct_gold_graphs, enhance_with_knowledge, ConceptKind, ENT_ENT_REL, LOC_LOC_REL,
};
use sgr_core::state_reasoner::{gold_trajectories, infer_states, round_trip_mismatches};

fn annotation(seed: u64) -> sgr_core::corpus::ProcedureInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    common::random_annotation(&mut rng, common::Bounds::default(), seed as usize)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gold_scenes_read_back_as_the_annotation(seed in any::<u64>()) {
        let inst = annotation(seed);
        let graph = build_graph(&inst, Split::Train, &[]).unwrap();
        let scenes = construct_gold_graphs(&inst, &graph).unwrap();
        prop_assert_eq!(scenes.len(), inst.num_steps() + 1);
        for s in &scenes {
            prop_assert!(s.validate(&graph).is_ok());
        }
        prop_assert!(round_trip_mismatches(&inst, &graph).unwrap().is_empty());
        prop_assert_eq!(infer_states(&graph, &scenes).unwrap(), gold_trajectories(&inst).unwrap());
    }

    #[test]
    fn complete_graph_layout(seed in any::<u64>()) {
        let inst = annotation(seed);
        let graph = build_graph(&inst, Split::Train, &[]).unwrap();
        let (n, l) = (graph.num_entities(), graph.num_locations());
        prop_assert_eq!(n, inst.num_entities());
        prop_assert_eq!(graph.num_nodes(), n + l + 2);
        prop_assert_eq!(graph.num_columns(), l + 1);
        let kinds: Vec<ConceptKind> = graph.nodes().iter().map(|c| c.kind).collect();
        prop_assert!(kinds[..n].iter().all(|k| *k == ConceptKind::Entity));
        prop_assert!(kinds[n..n + l].iter().all(|k| *k == ConceptKind::Location));
        prop_assert_eq!(kinds[graph.unk_loc_index()], ConceptKind::UnkLoc);
        prop_assert_eq!(kinds[graph.global_index()], ConceptKind::Global);
        for (i, node) in graph.nodes().iter().enumerate() {
            prop_assert_eq!(node.id, i);
        }
        for &(a, b, r) in graph.static_edges() {
            prop_assert!(a < b);
            match r {
                ENT_ENT_REL => prop_assert!(b < n),
                LOC_LOC_REL => prop_assert!(a >= n && b < n + l),
                other => prop_assert!(false, "unexpected relation {}", other),
            }
        }
        for c in 0..graph.num_columns() {
            prop_assert_eq!(graph.location_column(&graph.column_location(c)), Some(c));
        }
    }

    #[test]
    fn knowledge_is_idempotent_and_anchored(seed in any::<u64>(), extra in prop::collection::vec(("[a-e]{1,3}", "[A-C][a-z]{2}"), 0..6)) {
        let inst = annotation(seed);
        let base = build_graph(&inst, Split::Train, &[]).unwrap();
        let anchor = inst.entities[0].clone();
        let triples: Vec<Triple> = extra.iter().map(|(t, r)| Triple::new(&anchor, r, t)).collect();
        let (once, _) = enhance_with_knowledge(&base, &triples);
        let (twice, report) = enhance_with_knowledge(&once, &triples);
        prop_assert_eq!(report.added_nodes + report.added_edges, 0);
        prop_assert_eq!(once.nodes(), twice.nodes());
        prop_assert_eq!(&once.nodes()[..base.num_entities() + base.num_locations() + 1], &base.nodes()[..base.num_entities() + base.num_locations() + 1]);
        let added = &once.nodes()[base.num_nodes() - 1..once.num_nodes() - 1];
        prop_assert!(added.iter().all(|c| c.kind == ConceptKind::Knowledge));
        for &(a, b, r) in once.static_edges().difference(base.static_edges()) {
            prop_assert!(r >= 3);
            prop_assert!(a == 0 || b == 0, "edge {}-{} is not anchored", a, b);
        }
    }
}

#[test]
fn knowledge_report_counts_each_outcome() {
    let inst = common::single_entity_instance(1);
    let graph = build_complete_graph(&inst, &["field".to_string()]).unwrap();
    let triples = [
        Triple::new("stone", "HasProperty", "hard"),
        Triple::new("hard", "RelatedTo", "field"),
        Triple::new("moon", "RelatedTo", "sky"),
        Triple::new("stone", "", "field"),
        Triple::new("stone", "LocateIn", "field"),
        Triple::new("stone", "EntEnt", "pebble"),
    ];
    let (g, report) = enhance_with_knowledge(&graph, &triples);
    assert_eq!(report.added_nodes, 1);
    assert_eq!(report.added_edges, 2);
    assert_eq!(report.skipped_malformed, 2);
    assert_eq!(report.ignored_unanchored, 2);
    assert_eq!(g.nodes()[3].surface, "hard");
    assert_eq!(g.nodes()[4].kind, ConceptKind::Global);
    assert_eq!(g.relation_vocab()[3..], ["HasProperty".to_string(), "RelatedTo".to_string()]);
}

#[test]
fn co_mentions_create_static_edges() {
    let mut inst = common::single_entity_instance(2);
    inst.entities = vec!["stone".into(), "moss".into()];
    inst.sentences = vec!["the moss covers the stone in the field .".into(), "rain falls on the field and the hill .".into()];
    let graph = build_complete_graph(&inst, &["field".into(), "hill".into(), "cave".into()]).unwrap();
    let edges: Vec<_> = graph.static_edges().iter().copied().collect();
    assert_eq!(edges, vec![(0, 1, ENT_ENT_REL), (2, 3, LOC_LOC_REL)]);
}

#[test]
fn gold_location_outside_the_candidates_is_a_contract_error() {
    let mut inst = common::single_entity_instance(2);
    inst.gold_states = Some(vec![vec![StateLabel::Exist, StateLabel::Move]]);
    inst.gold_locations = Some(vec![vec![Location::Span("field".into()), Location::Span("quarry".into())]]);
    inst.location_candidates = None;
    let test_graph = build_graph(&inst, Split::Test, &[]).unwrap();
    assert!(construct_gold_graphs(&inst, &test_graph).is_err());
    let train_graph = build_graph(&inst, Split::Train, &[]).unwrap();
    assert!(construct_gold_graphs(&inst, &train_graph).is_ok());
}

#[test]
fn invalid_annotations_are_rejected() {
    let mut inst = common::single_entity_instance(2);
    let graph = build_graph(&inst, Split::Train, &[]).unwrap();
    inst.gold_states = Some(vec![vec![StateLabel::Destroy, StateLabel::Create]]);
    inst.gold_locations = Some(vec![vec![Location::Absent, Location::Span("field".into())]]);
    assert!(construct_gold_graphs(&inst, &graph).is_ok());
    inst.gold_states = Some(vec![vec![StateLabel::Destroy, StateLabel::Move]]);
    assert!(construct_gold_graphs(&inst, &graph).is_err());
    inst.gold_states = Some(vec![vec![StateLabel::Exist, StateLabel::Move]]);
    inst.gold_locations = Some(vec![vec![Location::Span("field".into()); 2]]);
    assert!(construct_gold_graphs(&inst, &graph).is_err());
}
