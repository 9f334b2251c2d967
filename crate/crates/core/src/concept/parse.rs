//! Parser for the XML-ish tagged lists the prompts ask the LLM to emit.
//! It is deliberately forgiving about surrounding prose and code fences and
//! strict about tag balance.

use super::ConceptError;

/// Returns the trimmed inner text of every well-formed, outermost
/// `<tag>…</tag>` occurrence in document order. An opening tag without a
/// matching close is skipped. Fails when nothing well-formed is found.
pub fn parse_tagged_list(text: &str, tag: &str) -> Result<Vec<String>, ConceptError> {
    if tag.is_empty() {
        return Err(ConceptError::Unparseable("empty tag name".into()));
    }
    let items = tagged_occurrences(text, tag);
    if items.is_empty() {
        return Err(ConceptError::Unparseable(format!("no well-formed <{tag}> element")));
    }
    Ok(items)
}

/// Same scan as [`parse_tagged_list`] but an absent tag yields an empty list.
pub fn tagged_occurrences(text: &str, tag: &str) -> Vec<String> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let mut out = Vec::new();
    let mut cursor = 0;
    while let Some(rel) = text[cursor..].find(&open) {
        let start = cursor + rel;
        let inner_start = start + open.len();
        match matching_close(text, inner_start, &open, &close) {
            Some(inner_end) => {
                out.push(text[inner_start..inner_end].trim().to_string());
                cursor = inner_end + close.len();
            }
            None => cursor = inner_start,
        }
    }
    out
}

/// Byte offset of the close tag balancing an open tag that ends at `from`.
fn matching_close(text: &str, from: usize, open: &str, close: &str) -> Option<usize> {
    let mut depth = 1usize;
    let mut pos = from;
    loop {
        let next_close = text[pos..].find(close).map(|i| pos + i)?;
        match text[pos..].find(open).map(|i| pos + i) {
            Some(o) if o < next_close => {
                depth += 1;
                pos = o + open.len();
            }
            _ => {
                depth -= 1;
                if depth == 0 {
                    return Some(next_close);
                }
                pos = next_close + close.len();
            }
        }
    }
}

/// Serializes a list in the tagged format the parser reads.
pub fn render_tagged_list(outer: &str, tag: &str, items: &[String]) -> String {
    let mut out = format!("```xml\n<{outer}>\n");
    for item in items {
        out.push_str(&format!("  <{tag}>{item}</{tag}>\n"));
    }
    out.push_str(&format!("</{outer}>\n```"));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fenced_list_with_trimming() {
        let text = "```xml <k><keyword>a</keyword><keyword> b </keyword></k>```";
        assert_eq!(parse_tagged_list(text, "keyword").unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn nested_same_tag_keeps_outermost() {
        let text = "<a>x<a>y</a>z</a> <a>w</a>";
        assert_eq!(parse_tagged_list(text, "a").unwrap(), vec!["x<a>y</a>z", "w"]);
    }

    #[test]
    fn no_occurrence_is_an_error() {
        assert!(parse_tagged_list("nothing here", "keyword").is_err());
        assert!(parse_tagged_list("<keyword>open only", "keyword").is_err());
        assert!(parse_tagged_list("<keyword>x</keyword>", "").is_err());
    }

    #[test]
    fn unbalanced_occurrence_skipped() {
        let text = "<t>dangling <t>ok</t>";
        // the first open has no balancing close once the inner pair is consumed
        assert_eq!(tagged_occurrences(text, "t"), vec!["ok"]);
    }

    #[test]
    fn prose_around_is_ignored() {
        let text = "Sure! Here you go:\n<positiveAttributes><attribute>contains tuna</attribute></positiveAttributes>\nThanks";
        assert_eq!(parse_tagged_list(text, "attribute").unwrap(), vec!["contains tuna"]);
    }

    proptest! {
        #[test]
        fn never_panics(text in ".{0,200}", tag in "[a-z]{1,6}") {
            let _ = parse_tagged_list(&text, &tag);
        }

        #[test]
        fn render_then_parse_round_trips(items in prop::collection::vec("[a-zA-Z0-9 ,.'-]{1,30}", 1..12)) {
            let items: Vec<String> = items
                .into_iter()
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            prop_assume!(!items.is_empty());
            let text = render_tagged_list("google_search_keywords", "keyword", &items);
            prop_assert_eq!(parse_tagged_list(&text, "keyword").unwrap(), items);
        }
    }
}
