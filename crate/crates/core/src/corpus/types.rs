use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::SgrError;

/// Per-step state of one entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateLabel {
    /// Not yet existing.
    #[serde(rename = "O_A")]
    OutBefore,
    /// No longer existing.
    #[serde(rename = "O_B")]
    OutAfter,
    #[serde(rename = "E")]
    Exist,
    #[serde(rename = "M")]
    Move,
    #[serde(rename = "C")]
    Create,
    #[serde(rename = "D")]
    Destroy,
}

impl StateLabel {
    /// Whether the entity exists after a step carrying this label.
    pub fn exists_after(self) -> bool {
        matches!(self, StateLabel::Exist | StateLabel::Move | StateLabel::Create)
    }

    /// Whether the entity must have existed before a step carrying this label.
    pub fn exists_before(self) -> bool {
        matches!(self, StateLabel::Exist | StateLabel::Move | StateLabel::Destroy)
    }

    pub fn code(self) -> &'static str {
        match self {
            StateLabel::OutBefore => "O_A",
            StateLabel::OutAfter => "O_B",
            StateLabel::Exist => "E",
            StateLabel::Move => "M",
            StateLabel::Create => "C",
            StateLabel::Destroy => "D",
        }
    }

    /// Allowed successor labels.
    pub fn can_follow(self, next: StateLabel) -> bool {
        use StateLabel::*;
        match self {
            OutBefore => matches!(next, OutBefore | Create),
            Create | Exist | Move => matches!(next, Exist | Move | Destroy),
            Destroy | OutAfter => matches!(next, OutAfter | Create),
        }
    }
}

impl fmt::Display for StateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for StateLabel {
    type Err = SgrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "O_A" => StateLabel::OutBefore,
            "O_B" => StateLabel::OutAfter,
            "E" => StateLabel::Exist,
            "M" => StateLabel::Move,
            "C" => StateLabel::Create,
            "D" => StateLabel::Destroy,
            other => return Err(SgrError::contract(format!("unknown state label {other:?}"))),
        })
    }
}

/// An entity location: a text span, unknown (`?`), or non-existent (`-`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Location {
    Span(String),
    Unknown,
    Absent,
}

impl Location {
    pub fn parse(s: &str) -> Self {
        match s.trim() {
            "?" => Location::Unknown,
            "-" | "" => Location::Absent,
            span => Location::Span(span.to_string()),
        }
    }

    pub fn is_absent(&self) -> bool {
        matches!(self, Location::Absent)
    }

    pub fn as_str(&self) -> &str {
        match self {
            Location::Span(s) => s,
            Location::Unknown => "?",
            Location::Absent => "-",
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Location {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Location {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Location::parse(&s))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        Triple {
            head: head.to_string(),
            relation: relation.to_string(),
            tail: tail.to_string(),
        }
    }
}

/// A tracked-entity mention: token span `[start, end)` in one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mention {
    pub entity: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    /// Gold locations are injected into the candidate set only when gold
    /// annotations may legitimately be consulted.
    pub fn injects_gold(self) -> bool {
        !matches!(self, Split::Test)
    }
}

impl FromStr for Split {
    type Err = SgrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(SgrError::contract(format!(
                "unknown split {other:?} (expected train, dev or test)"
            ))),
        }
    }
}

/// One paragraph with its tracked entities and optional gold annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureInstance {
    pub para_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub sentences: Vec<String>,
    pub entities: Vec<String>,
    /// Per entity, one label per sentence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_states: Option<Vec<Vec<StateLabel>>>,
    /// Per entity, the location after each sentence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_locations: Option<Vec<Vec<Location>>>,
    /// Per entity, the location before the first sentence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_locations: Option<Vec<Location>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location_candidates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_triples: Option<Vec<Triple>>,
    /// Per sentence, the tracked-entity mentions (filled by preprocessing).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_mentions: Option<Vec<Vec<Mention>>>,
}

impl ProcedureInstance {
    pub fn num_steps(&self) -> usize {
        self.sentences.len()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn has_gold(&self) -> bool {
        self.gold_states.is_some() && self.gold_locations.is_some()
    }

    /// Checks the structural contract: at least one sentence and entity, and
    /// gold sequences of length T for each of the N entities.
    pub fn validate(&self) -> crate::Result<()> {
        let t = self.num_steps();
        let n = self.num_entities();
        if t == 0 {
            return Err(SgrError::contract(format!("{}: paragraph has no sentences", self.para_id)));
        }
        if n == 0 {
            return Err(SgrError::contract(format!("{}: no tracked entities", self.para_id)));
        }
        let check = |name: &str, lens: Vec<usize>| -> crate::Result<()> {
            if lens.len() != n {
                return Err(SgrError::contract(format!(
                    "{}: {name} has {} rows for {n} entities",
                    self.para_id,
                    lens.len()
                )));
            }
            if let Some(bad) = lens.iter().position(|&l| l != t) {
                return Err(SgrError::contract(format!(
                    "{}: {name} for entity {:?} has length {} (expected {t})",
                    self.para_id, self.entities[bad], lens[bad]
                )));
            }
            Ok(())
        };
        if let Some(states) = &self.gold_states {
            check("gold_states", states.iter().map(Vec::len).collect())?;
        }
        if let Some(locs) = &self.gold_locations {
            check("gold_locations", locs.iter().map(Vec::len).collect())?;
        }
        if let Some(init) = &self.initial_locations {
            if init.len() != n {
                return Err(SgrError::contract(format!(
                    "{}: initial_locations has {} entries for {n} entities",
                    self.para_id,
                    init.len()
                )));
            }
        }
        if let Some(mentions) = &self.entity_mentions {
            if mentions.len() != t {
                return Err(SgrError::contract(format!(
                    "{}: entity_mentions has {} sentences (expected {t})",
                    self.para_id,
                    mentions.len()
                )));
            }
        }
        Ok(())
    }
}
