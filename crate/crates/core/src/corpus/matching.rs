use super::tokenize::tokenize;
use super::types::Mention;

/// Token sequences of each slash-separated alias of an entity.
pub fn entity_aliases(entity: &str) -> Vec<Vec<String>> {
    entity
        .split('/')
        .map(tokenize)
        .filter(|t| !t.is_empty())
        .collect()
}

/// Finds tracked-entity mentions by exact token-sequence matching.
///
/// Scans left to right and takes the longest alias (over all entities)
/// starting at each position, so matches never overlap. Ties in length go to
/// the entity listed first.
pub fn match_entities(tokens: &[String], entities: &[String]) -> Vec<Mention> {
    let aliases: Vec<Vec<Vec<String>>> = entities.iter().map(|e| entity_aliases(e)).collect();
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < tokens.len() {
        let mut best: Option<(usize, usize)> = None;
        for (e, alias_list) in aliases.iter().enumerate() {
            for alias in alias_list {
                let len = alias.len();
                if pos + len <= tokens.len()
                    && tokens[pos..pos + len] == alias[..]
                    && best.is_none_or(|(_, l)| len > l)
                {
                    best = Some((e, len));
                }
            }
        }
        match best {
            Some((entity, len)) => {
                out.push(Mention {
                    entity,
                    start: pos,
                    end: pos + len,
                });
                pos += len;
            }
            None => pos += 1,
        }
    }
    out
}

/// Entities mentioned in a sentence, deduplicated, in first-mention order.
pub fn mentioned_entities(mentions: &[Mention]) -> Vec<usize> {
    let mut seen = Vec::new();
    for m in mentions {
        if !seen.contains(&m.entity) {
            seen.push(m.entity);
        }
    }
    seen
}

/// Whether the token sequence `needle` occurs in `haystack`.
pub fn contains_span(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}
