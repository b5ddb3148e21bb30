use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde_json::Value;

use super::types::{Location, ProcedureInstance, Triple};
use crate::error::{Result, SgrError};

/// Action column of the prediction TSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    None,
    Create,
    Destroy,
    Move,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::None => "NONE",
            Action::Create => "CREATE",
            Action::Destroy => "DESTROY",
            Action::Move => "MOVE",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = SgrError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "NONE" => Action::None,
            "CREATE" => Action::Create,
            "DESTROY" => Action::Destroy,
            "MOVE" => Action::Move,
            other => return Err(SgrError::contract(format!("unknown action {other:?}"))),
        })
    }
}

/// One row of the prediction TSV: what happened to `entity` at `step`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PredictionRecord {
    pub para_id: String,
    /// 1-based sentence index.
    pub step: usize,
    pub entity: String,
    pub action: Action,
    pub before: Location,
    pub after: Location,
}

impl fmt::Display for PredictionRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.para_id, self.step, self.entity, self.action, self.before, self.after
        )
    }
}

fn parse_json_line(line_no: usize, line: &str) -> Result<ProcedureInstance> {
    let value: Value = serde_json::from_str(line).map_err(|e| SgrError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| SgrError::Parse {
        line: line_no,
        message: "expected a JSON object".into(),
    })?;
    for field in ["para_id", "sentences", "entities"] {
        if !obj.contains_key(field) {
            return Err(SgrError::MissingField {
                line: line_no,
                field,
            });
        }
    }
    let inst: ProcedureInstance = serde_json::from_value(value).map_err(|e| SgrError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    inst.validate().map_err(|e| SgrError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    Ok(inst)
}

/// Parses instance JSONL; blank lines are skipped.
pub fn read_instances<R: BufRead>(reader: R) -> Result<Vec<ProcedureInstance>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SgrError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_json_line(i + 1, &line)?);
    }
    Ok(out)
}

pub fn load_instances(path: &Path) -> Result<Vec<ProcedureInstance>> {
    let file = File::open(path).map_err(|e| SgrError::io(path, e))?;
    read_instances(BufReader::new(file))
}

pub fn write_instances<W: Write>(mut w: W, instances: &[ProcedureInstance]) -> std::io::Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn save_instances(instances: &[ProcedureInstance], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| SgrError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_instances(&mut w, instances)
        .and_then(|_| w.flush())
        .map_err(|e| SgrError::io(path, e))
}

pub fn write_predictions<W: Write>(mut w: W, records: &[PredictionRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{r}")?;
    }
    Ok(())
}

pub fn save_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| SgrError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_predictions(&mut w, records)
        .and_then(|_| w.flush())
        .map_err(|e| SgrError::io(path, e))
}

pub fn read_predictions<R: BufRead>(reader: R) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| SgrError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(SgrError::Parse {
                line: line_no,
                message: format!("expected 6 tab-separated columns, found {}", cols.len()),
            });
        }
        let step = cols[1].parse().map_err(|_| SgrError::Parse {
            line: line_no,
            message: format!("bad step index {:?}", cols[1]),
        })?;
        let action = cols[3].parse().map_err(|e: SgrError| SgrError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(PredictionRecord {
            para_id: cols[0].to_string(),
            step,
            entity: cols[2].to_string(),
            action,
            before: Location::parse(cols[4]),
            after: Location::parse(cols[5]),
        });
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = File::open(path).map_err(|e| SgrError::io(path, e))?;
    read_predictions(BufReader::new(file))
}

/// Parses a `head<TAB>relation<TAB>tail` file. Returns the well-formed
/// triples (lowercased) and the number of malformed lines skipped.
pub fn read_triples<R: BufRead>(reader: R) -> Result<(Vec<Triple>, usize)> {
    let mut triples = Vec::new();
    let mut skipped = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SgrError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() != 3 || cols.iter().any(|c| c.is_empty()) {
            skipped += 1;
            continue;
        }
        triples.push(Triple::new(
            &cols[0].to_lowercase(),
            cols[1],
            &cols[2].to_lowercase(),
        ));
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} malformed knowledge triple line(s)");
    }
    Ok((triples, skipped))
}

pub fn load_triples(path: &Path) -> Result<(Vec<Triple>, usize)> {
    let file = File::open(path).map_err(|e| SgrError::io(path, e))?;
    read_triples(BufReader::new(file))
}
