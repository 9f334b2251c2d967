//! Small text helpers shared by the concept engine, the mock backends and the
//! store: dedup normalization and stable identifiers derived from text.

/// Dedup key: lowercase, punctuation stripped, whitespace collapsed.
/// `-`, `_` and `/` separate words.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text
        .split(|c: char| c.is_whitespace() || matches!(c, '-' | '_' | '/'))
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
    {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&word);
    }
    out
}

/// Identifier form of a text: the normalized words joined by `_`.
///
/// `"Contains tuna!"` and `"contains  TUNA"` map to the same slug,
/// `contains_tuna`.
pub fn slug(text: &str) -> String {
    normalize(text).replace(' ', "_")
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}
