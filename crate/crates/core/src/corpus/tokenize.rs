/// Lowercases and splits text into word, clitic and punctuation tokens.
///
/// Words are alphanumeric runs, optionally joined by single inner hyphens
/// (`well-known`). An apostrophe followed by letters forms a clitic token
/// (`leaf's` gives `leaf`, `'s`). Every other non-space character is its own
/// token.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_alphanumeric() {
            let start = i;
            while i < chars.len() {
                let inner_hyphen = chars[i] == '-' && i > start && chars.get(i + 1).is_some_and(|c| c.is_alphanumeric());
                if !(chars[i].is_alphanumeric() || inner_hyphen) {
                    break;
                }
                i += 1;
            }
            tokens.push(chars[start..i].iter().collect());
        } else if c == '\'' && i + 1 < chars.len() && chars[i + 1].is_alphabetic() {
            let start = i;
            i += 1;
            while i < chars.len() && chars[i].is_alphabetic() {
                i += 1;
            }
            tokens.push(chars[start..i].iter().collect());
        } else {
            tokens.push(c.to_string());
            i += 1;
        }
    }
    tokens
}

/// Canonical surface of a span: its tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}
