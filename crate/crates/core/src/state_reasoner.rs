//! Reading state changes off a scene sequence.
//!
//! Adjacent scenes are diffed per entity: appearing is a Create, vanishing a
//! Destroy, staying with a new location a Move and staying put an Exist.
//! Every entity is handled independently of the others.

use crate::corpus::{Action, Location, PredictionRecord, ProcedureInstance, StateLabel};
use crate::error::{Result, SgrError};
use crate::scene_graph::{
    check_annotation, construct_gold_graphs, initial_location, normalize_location, CompleteGraph, SceneGraph,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityTrajectory {
    pub entity: String,
    /// Location before the first step (`-` when the entity does not exist).
    pub initial_location: Location,
    pub states: Vec<StateLabel>,
    /// Location after each step.
    pub locations: Vec<Location>,
}

impl EntityTrajectory {
    pub fn is_valid(&self) -> bool {
        check_annotation(&self.entity, &self.initial_location, &self.states, &self.locations).is_ok()
    }

    /// Location before step `t` (1-based).
    pub fn before(&self, t: usize) -> &Location {
        if t == 1 {
            &self.initial_location
        } else {
            &self.locations[t - 2]
        }
    }
}

/// Labels implied by an existence/location sequence of length `T+1`.
fn derive_labels(locations: &[Location]) -> Vec<StateLabel> {
    let mut existed = !locations[0].is_absent();
    let mut labels = Vec::with_capacity(locations.len() - 1);
    for w in locations.windows(2) {
        let (was, is) = (!w[0].is_absent(), !w[1].is_absent());
        labels.push(match (was, is) {
            (false, true) => StateLabel::Create,
            (true, false) => StateLabel::Destroy,
            (true, true) if w[0] != w[1] => StateLabel::Move,
            (true, true) => StateLabel::Exist,
            (false, false) if existed => StateLabel::OutAfter,
            (false, false) => StateLabel::OutBefore,
        });
        existed |= is;
    }
    labels
}

fn trajectory(entity: &str, seq: Vec<Location>) -> EntityTrajectory {
    EntityTrajectory {
        entity: entity.to_string(),
        states: derive_labels(&seq),
        initial_location: seq[0].clone(),
        locations: seq[1..].to_vec(),
    }
}

/// Trajectories of all entities from scenes `y_0 .. y_T`.
pub fn infer_states(graph: &CompleteGraph, scenes: &[SceneGraph]) -> Result<Vec<EntityTrajectory>> {
    if scenes.len() < 2 {
        return Err(SgrError::contract(format!(
            "need at least two scenes to infer states, got {}",
            scenes.len()
        )));
    }
    for (t, s) in scenes.iter().enumerate() {
        s.validate(graph)
            .map_err(|e| SgrError::contract(format!("scene {t}: {e}")))?;
    }
    Ok((0..graph.num_entities())
        .map(|e| {
            let seq = scenes.iter().map(|s| s.entity_location(graph, e)).collect();
            trajectory(graph.entity_surface(e), seq)
        })
        .collect())
}

/// Repairs a possibly invalid trajectory.
///
/// Existence after each step is taken from the label, existence before step
/// 1 from the initial location. Locations are made consistent with that
/// (an existing entity without a location keeps its previous one, or `?`),
/// and every label is re-derived from the resulting sequence. Valid
/// trajectories come back unchanged.
pub fn apply_constraints(raw: &EntityTrajectory) -> EntityTrajectory {
    let mut seq = Vec::with_capacity(raw.states.len() + 1);
    seq.push(raw.initial_location.clone());
    for (s, loc) in raw.states.iter().zip(&raw.locations) {
        let prev = seq.last().cloned().unwrap_or(Location::Absent);
        seq.push(match (s.exists_after(), loc.is_absent()) {
            (false, _) => Location::Absent,
            (true, false) => loc.clone(),
            (true, true) if prev.is_absent() => Location::Unknown,
            (true, true) => prev,
        });
    }
    trajectory(&raw.entity, seq)
}

pub fn action_of(state: StateLabel) -> Action {
    match state {
        StateLabel::Create => Action::Create,
        StateLabel::Destroy => Action::Destroy,
        StateLabel::Move => Action::Move,
        StateLabel::Exist | StateLabel::OutBefore | StateLabel::OutAfter => Action::None,
    }
}

/// Prediction rows, step-major, one per step and entity.
pub fn emit_predictions(para_id: &str, trajectories: &[EntityTrajectory]) -> Vec<PredictionRecord> {
    let steps = trajectories.first().map_or(0, |t| t.states.len());
    let mut rows = Vec::with_capacity(steps * trajectories.len());
    for t in 1..=steps {
        for tr in trajectories {
            rows.push(PredictionRecord {
                para_id: para_id.to_string(),
                step: t,
                entity: tr.entity.clone(),
                action: action_of(tr.states[t - 1]),
                before: tr.before(t).clone(),
                after: tr.locations[t - 1].clone(),
            });
        }
    }
    rows
}

/// Trajectories of the gold annotations, locations normalised.
pub fn gold_trajectories(instance: &ProcedureInstance) -> Result<Vec<EntityTrajectory>> {
    let (Some(states), Some(locations)) = (&instance.gold_states, &instance.gold_locations) else {
        return Err(SgrError::contract(format!("{}: no gold annotations", instance.para_id)));
    };
    instance.validate()?;
    instance
        .entities
        .iter()
        .enumerate()
        .map(|(e, name)| {
            let provided = instance.initial_locations.as_ref().map(|v| &v[e]);
            let init = initial_location(&states[e], &locations[e], provided);
            check_annotation(name, &init, &states[e], &locations[e])?;
            Ok(EntityTrajectory {
                entity: name.to_lowercase(),
                initial_location: init,
                states: states[e].clone(),
                locations: locations[e].iter().map(normalize_location).collect(),
            })
        })
        .collect()
}

/// Gold rows of one instance.
pub fn gold_predictions(instance: &ProcedureInstance) -> Result<Vec<PredictionRecord>> {
    Ok(emit_predictions(&instance.para_id, &gold_trajectories(instance)?))
}

/// Builds the gold scenes of `instance`, reads the states back off them and
/// lists every disagreement with the annotation (empty when the two agree).
pub fn round_trip_mismatches(instance: &ProcedureInstance, graph: &CompleteGraph) -> Result<Vec<String>> {
    let gold = gold_trajectories(instance)?;
    let scenes = construct_gold_graphs(instance, graph)?;
    let inferred = infer_states(graph, &scenes)?;
    let mut out = Vec::new();
    for (g, i) in gold.iter().zip(&inferred) {
        if g.initial_location != i.initial_location {
            out.push(format!(
                "{}: initial location {} read back as {}",
                g.entity, g.initial_location, i.initial_location
            ));
        }
        for t in 0..g.states.len() {
            if g.states[t] != i.states[t] || g.locations[t] != i.locations[t] {
                out.push(format!(
                    "{}: step {} annotated {} {} read back as {} {}",
                    g.entity,
                    t + 1,
                    g.states[t].code(),
                    g.locations[t],
                    i.states[t].code(),
                    i.locations[t]
                ));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use StateLabel::*;

    fn loc(s: &str) -> Location {
        Location::parse(s)
    }

    fn traj(init: &str, states: Vec<StateLabel>, locs: &[&str]) -> EntityTrajectory {
        EntityTrajectory {
            entity: "water".into(),
            initial_location: loc(init),
            states,
            locations: locs.iter().map(|s| loc(s)).collect(),
        }
    }

    #[test]
    fn move_move_from_locations() {
        let t = trajectory("water", vec![loc("soil"), loc("root"), loc("leaf")]);
        assert_eq!(t.states, vec![Move, Move]);
    }

    #[test]
    fn destroy_then_out_after() {
        let t = trajectory("water", vec![loc("root"), loc("-"), loc("-")]);
        assert_eq!(t.states, vec![Destroy, OutAfter]);
        let t = trajectory("water", vec![loc("-"), loc("-"), loc("leaf")]);
        assert_eq!(t.states, vec![OutBefore, Create]);
    }

    #[test]
    fn constraint_repairs() {
        let fixed = apply_constraints(&traj("-", vec![Exist, Exist], &["leaf", "leaf"]));
        assert_eq!(fixed.states, vec![Create, Exist]);
        let fixed = apply_constraints(&traj("-", vec![Create, Create], &["leaf", "leaf"]));
        assert_eq!(fixed.states, vec![Create, Exist]);
        let valid = traj("soil", vec![Move, Destroy], &["root", "-"]);
        assert_eq!(apply_constraints(&valid), valid);
    }

    #[test]
    fn emitted_rows() {
        let rows = emit_predictions(
            "p",
            &[
                traj("soil", vec![Move], &["root"]),
                traj("-", vec![OutBefore], &["-"]),
                traj("-", vec![Create], &["?"]),
            ],
        );
        let text: Vec<String> = rows.iter().map(ToString::to_string).collect();
        assert_eq!(text[0], "p\t1\twater\tMOVE\tsoil\troot");
        assert!(text[1].ends_with("NONE\t-\t-"));
        assert!(text[2].ends_with("CREATE\t-\t?"));
    }
}
