//! Instance ingestion, tokenization, entity matching and location candidates.

mod candidates;
mod io;
mod matching;
mod tokenize;
mod types;

pub use candidates::{generate_location_candidates, gold_spans, sentence_candidates, LOCATIVE_PREPOSITIONS};
pub use io::{
    load_instances, load_predictions, load_triples, read_instances, read_predictions, read_triples,
    save_instances, save_predictions, write_instances, write_predictions, Action, PredictionRecord,
};
pub use matching::{contains_span, entity_aliases, match_entities, mentioned_entities};
pub use tokenize::{normalize, tokenize};
pub use types::{Location, Mention, ProcedureInstance, Split, StateLabel, Triple};

/// Fills `location_candidates` and `entity_mentions` for one instance.
pub fn preprocess(instance: &ProcedureInstance, split: Split) -> ProcedureInstance {
    let mut out = instance.clone();
    out.location_candidates = Some(generate_location_candidates(instance, split));
    out.entity_mentions = Some(
        instance
            .sentences
            .iter()
            .map(|s| match_entities(&tokenize(s), &instance.entities))
            .collect(),
    );
    out
}
