//! Versioned text checkpoint: metadata, string lists and named tensors.
//!
//! ```text
//! SGR-CKPT-1
//! meta <key> <value>
//! list <name> <count>
//! <one entry per line>
//! tensor <name> <rank> <dim>...
//! <space-separated values>
//! end
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use super::{ParamStore, Tensor};
use crate::error::{Result, SgrError};

pub const MAGIC: &str = "SGR-CKPT-1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub lists: Vec<(String, Vec<String>)>,
    pub tensors: ParamStore,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn list(&self, name: &str) -> Option<&[String]> {
        self.lists
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{MAGIC}")?;
        for (k, v) in &self.meta {
            writeln!(w, "meta {k} {v}")?;
        }
        for (name, entries) in &self.lists {
            writeln!(w, "list {name} {}", entries.len())?;
            for e in entries {
                writeln!(w, "{e}")?;
            }
        }
        let mut line = String::new();
        for (_, name, t) in self.tensors.iter() {
            let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
            writeln!(w, "tensor {name} {} {}", t.shape().len(), dims.join(" "))?;
            line.clear();
            for (i, v) in t.data().iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{v:?}");
            }
            writeln!(w, "{line}")?;
        }
        writeln!(w, "end")
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(SgrError::Checkpoint(format!("line {}: {e}", i + 1))),
                None => Err(SgrError::Checkpoint(format!("unexpected end of file, expected {what}"))),
            }
        };
        let (_, header) = next("header")?;
        if header.trim_end() != MAGIC {
            return Err(SgrError::Checkpoint(format!(
                "bad magic header {header:?}, expected {MAGIC}"
            )));
        }
        let mut ck = Checkpoint::default();
        loop {
            let (ln, line) = next("section")?;
            let bad = |m: &str| SgrError::Checkpoint(format!("line {ln}: {m}"));
            let mut parts = line.split(' ');
            match parts.next() {
                Some("end") => break,
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| bad("meta without key"))?;
                    let value: Vec<&str> = parts.collect();
                    ck.meta.push((key.to_string(), value.join(" ")));
                }
                Some("list") => {
                    let name = parts.next().ok_or_else(|| bad("list without name"))?.to_string();
                    let count: usize = parts
                        .next()
                        .and_then(|c| c.parse().ok())
                        .ok_or_else(|| bad("list without count"))?;
                    let mut entries = Vec::with_capacity(count);
                    for _ in 0..count {
                        entries.push(next("list entry")?.1);
                    }
                    ck.lists.push((name, entries));
                }
                Some("tensor") => {
                    let name = parts.next().ok_or_else(|| bad("tensor without name"))?.to_string();
                    let rank: usize = parts
                        .next()
                        .and_then(|c| c.parse().ok())
                        .ok_or_else(|| bad("tensor without rank"))?;
                    let dims: Vec<usize> = parts.filter_map(|d| d.parse().ok()).collect();
                    if dims.len() != rank {
                        return Err(bad("tensor rank does not match dims"));
                    }
                    let (vln, values) = next("tensor values")?;
                    let data = values
                        .split_ascii_whitespace()
                        .map(str::parse::<f64>)
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| SgrError::Checkpoint(format!("line {vln}: {e}")))?;
                    let t = Tensor::new(dims, data)
                        .map_err(|e| SgrError::Checkpoint(format!("line {vln}: {e}")))?;
                    ck.tensors.insert(name, t)?;
                }
                _ => return Err(bad("unknown section")),
            }
        }
        Ok(ck)
    }
}
