use std::collections::BTreeSet;

use super::{normalize_answer, AnnotateError, Answer, Decision};
use crate::concept::{parse_question_text, tagged_occurrences, Polarity};
use crate::gateway::Responder;

/// Reference decision rules: any carve-out present is negative, all
/// required attributes present is positive, anything else is negative.
pub fn decision_oracle(
    required_in_scope: &BTreeSet<String>,
    in_scope_present: &BTreeSet<String>,
    out_of_scope_present: &BTreeSet<String>,
) -> Decision {
    debug_assert!(in_scope_present.is_subset(required_in_scope));
    if !out_of_scope_present.is_empty() {
        Decision::Negative
    } else if in_scope_present == required_in_scope {
        Decision::Positive
    } else {
        Decision::Negative
    }
}

fn strip_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let t = line.trim().trim_start_matches(['*', '#', '-', ' ']);
    let head = t.get(..label.len())?;
    if !head.eq_ignore_ascii_case(label) {
        return None;
    }
    let rest = t[label.len()..].trim_start_matches(['*', ' ']);
    rest.strip_prefix(':').map(|r| r.trim_start_matches('*').trim())
}

fn decision_value(value: &str) -> Option<Decision> {
    let word: String = value
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    match word.as_str() {
        "positive" => Some(Decision::Positive),
        "negative" => Some(Decision::Negative),
        _ => None,
    }
}

fn strip_bullet(line: &str) -> &str {
    let t = line.trim();
    let t = t.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        if let Some(rest) = t[digits..].strip_prefix(['.', ')']) {
            return rest.trim_start();
        }
    }
    t
}

/// Reads the `Decision:` line and the reason items after `Reasons:`.
/// Several Decision lines are accepted only when they agree.
pub fn parse_decision(text: &str) -> Result<(Decision, Vec<String>), AnnotateError> {
    let mut decisions = BTreeSet::new();
    let mut reasons = Vec::new();
    let mut in_reasons = false;
    for line in text.lines() {
        if let Some(value) = strip_label(line, "decision") {
            let d = decision_value(value)
                .ok_or_else(|| AnnotateError::DecisionParse(format!("unrecognized decision {value:?}")))?;
            decisions.insert(d);
            in_reasons = false;
        } else if let Some(rest) = strip_label(line, "reasons") {
            in_reasons = true;
            let first = strip_bullet(rest);
            if !first.is_empty() {
                reasons.push(first.to_string());
            }
        } else if in_reasons {
            let item = strip_bullet(line);
            if !item.is_empty() {
                reasons.push(item.to_string());
            }
        }
    }
    let mut it = decisions.into_iter();
    match (it.next(), it.next()) {
        (Some(d), None) => Ok((d, reasons)),
        (None, _) => Err(AnnotateError::DecisionParse("no Decision line".into())),
        (Some(_), Some(_)) => Err(AnnotateError::DecisionParse("conflicting Decision lines".into())),
    }
}

/// Decision LLM stand-in that applies the classification rules to the Q/A
/// pairs in a final-decision prompt. Question polarity is read from the
/// question phrasing; questions it cannot read are ignored.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockDecisionLlm;

impl MockDecisionLlm {
    pub fn decide(&self, prompt: &str) -> Option<String> {
        if !prompt.contains("<classificationRules>") {
            return None;
        }
        let responses = tagged_occurrences(prompt, "raterResponses").pop()?;
        let mut required = BTreeSet::new();
        let mut present = BTreeSet::new();
        let mut carve_outs = BTreeSet::new();
        let mut pending: Option<(Polarity, String)> = None;
        for line in responses.lines() {
            if let Some(q) = line.strip_prefix("Q: ") {
                pending = parse_question_text(q);
                if let Some((Polarity::InScope, text)) = &pending {
                    required.insert(text.clone());
                }
            } else if let Some(a) = line.strip_prefix("A: ") {
                if let Some((polarity, text)) = pending.take() {
                    if normalize_answer(a) == Answer::Yes {
                        match polarity {
                            Polarity::InScope => present.insert(text),
                            Polarity::OutOfScope => carve_outs.insert(text),
                        };
                    }
                }
            }
        }
        let decision = if required.is_empty() && carve_outs.is_empty() {
            Decision::Negative
        } else {
            decision_oracle(&required, &present, &carve_outs)
        };
        let mut reasons: Vec<String> =
            carve_outs.iter().map(|c| format!("out-of-scope attribute present: {c}")).collect();
        if carve_outs.is_empty() {
            if decision == Decision::Positive {
                reasons.push("all required in-scope attributes are present".into());
            } else {
                reasons.extend(required.difference(&present).map(|m| format!("in-scope attribute missing: {m}")));
                if required.is_empty() {
                    reasons.push("no in-scope attribute was checked".into());
                }
            }
        }
        let label = if decision.is_positive() { "Positive" } else { "Negative" };
        let mut out = format!("Decision: {label}\nReasons:\n");
        for r in reasons {
            out.push_str(&format!("- {r}\n"));
        }
        Some(out)
    }
}

impl Responder for MockDecisionLlm {
    fn respond(&self, prompt: &str) -> Option<String> {
        self.decide(prompt)
    }
}
