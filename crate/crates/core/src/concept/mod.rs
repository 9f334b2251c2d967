//! Concept engine: turns a concept name and description into structured
//! artifacts (description, in-scope attributes, carve-outs, VQA questions,
//! search queries) by rendering prompt templates and parsing the tagged
//! responses.

mod parse;
mod templates;

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::AnnotatorConfig;
use crate::gateway::{Backend, GatewayError};
use crate::text;

pub use parse::{parse_tagged_list, render_tagged_list, tagged_occurrences};
pub use templates::{PromptTemplates, TemplateName, TEMPLATE_VERSION};

pub const DEFAULT_MAX_TOKENS: usize = 1024;
pub const MAX_SEARCH_QUERIES: usize = 20;
pub const MAX_QUERY_WORDS: usize = 6;
pub const NOT_FOUND: &str = "NOT_FOUND";
const DESCRIPTION_MARKER: &str = "visual concept definition:";

#[derive(Debug, Error)]
pub enum ConceptError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("unparseable response: {0}")]
    Unparseable(String),
    #[error("response listed no items: {0}")]
    EmptyList(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("no attributes available to generate questions from")]
    NoAttributesAvailable,
    #[error("template error: {0}")]
    Template(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    InScope,
    OutOfScope,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub id: String,
    pub text: String,
    pub polarity: Polarity,
    pub atomic: bool,
}

impl Attribute {
    /// The id is the slug of the text, so equal texts (after dedup
    /// normalization) share an id.
    pub fn new(text: impl Into<String>, polarity: Polarity, atomic: bool) -> Self {
        let text = text.into().trim().to_string();
        Self { id: text::slug(&text), text, polarity, atomic }
    }

    pub fn in_scope(text: impl Into<String>) -> Self {
        Self::new(text, Polarity::InScope, true)
    }

    pub fn carve_out(text: impl Into<String>) -> Self {
        Self::new(text, Polarity::OutOfScope, true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub name: String,
    pub description: String,
    pub positive_attributes: Vec<Attribute>,
    pub carve_outs: Vec<Attribute>,
}

impl Concept {
    pub fn new(name: &str, description: &str) -> Result<Self, ConceptError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(ConceptError::Precondition("concept name is empty".into()));
        }
        Ok(Self {
            id: text::slug(name),
            name: name.to_string(),
            description: description.trim().to_string(),
            positive_attributes: Vec::new(),
            carve_outs: Vec::new(),
        })
    }

    pub fn with_attributes(mut self, positives: Vec<Attribute>, carve_outs: Vec<Attribute>) -> Self {
        self.positive_attributes = dedup_attributes(positives);
        self.carve_outs = dedup_attributes(carve_outs);
        self
    }

    pub fn required_ids(&self) -> BTreeSet<String> {
        self.positive_attributes.iter().map(|a| a.id.clone()).collect()
    }

    pub fn carve_out_ids(&self) -> BTreeSet<String> {
        self.carve_outs.iter().map(|a| a.id.clone()).collect()
    }

    /// Identifier the VQA baseline binds "Is this an image of …?" to.
    pub fn name_attribute_id(&self) -> String {
        text::slug(&self.name)
    }
}

/// Keeps the first occurrence of each normalized text.
pub fn dedup_attributes(attrs: Vec<Attribute>) -> Vec<Attribute> {
    let mut seen = HashSet::new();
    attrs.into_iter().filter(|a| !a.text.is_empty() && seen.insert(text::normalize(&a.text))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPolarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    Broader,
    Narrower,
    Variation,
}

impl Mutation {
    pub const ALL: [Mutation; 3] = [Mutation::Broader, Mutation::Narrower, Mutation::Variation];

    pub fn instruction(self) -> &'static str {
        match self {
            Mutation::Broader => {
                "Write a broader version of the search query that covers a wider range of related images."
            }
            Mutation::Narrower => {
                "Write a narrower, more specific version of the search query that targets a particular kind of image."
            }
            Mutation::Variation => {
                "Write a variation of the search query that changes one specific part of it while keeping its intent."
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub text: String,
    pub polarity: QueryPolarity,
    pub lineage: Vec<Mutation>,
    pub word_count: usize,
}

impl SearchQuery {
    pub fn seed(text: &str, polarity: QueryPolarity) -> Self {
        let text = text.trim().to_string();
        Self { word_count: text::word_count(&text), text, polarity, lineage: Vec::new() }
    }
}

/// A VQA question bound to the attribute it checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundQuestion {
    pub text: String,
    pub bound_attribute: String,
    pub attribute_text: String,
    pub expected_polarity: Polarity,
}

impl BoundQuestion {
    pub fn for_attribute(attr: &Attribute) -> Self {
        Self {
            text: question_text(attr),
            bound_attribute: attr.id.clone(),
            attribute_text: attr.text.clone(),
            expected_polarity: attr.polarity,
        }
    }

    pub fn to_vqa(&self) -> crate::gateway::VqaQuestion {
        crate::gateway::VqaQuestion::bound(self.text.clone(), self.bound_attribute.clone())
    }
}

const IN_SCOPE_QUESTION: &str = "Is the following true of the image: ";
const OUT_OF_SCOPE_QUESTION: &str = "Is the following out-of-scope condition true of the image: ";

/// Question phrasing for an attribute.
pub fn question_text(attr: &Attribute) -> String {
    let prefix = match attr.polarity {
        Polarity::InScope => IN_SCOPE_QUESTION,
        Polarity::OutOfScope => OUT_OF_SCOPE_QUESTION,
    };
    format!("{prefix}{}?", attr.text)
}

/// Inverse of [`question_text`]: recovers polarity and attribute text.
pub fn parse_question_text(question: &str) -> Option<(Polarity, String)> {
    let q = question.trim();
    let (polarity, rest) = match q.strip_prefix(OUT_OF_SCOPE_QUESTION) {
        Some(rest) => (Polarity::OutOfScope, rest),
        None => (Polarity::InScope, q.strip_prefix(IN_SCOPE_QUESTION)?),
    };
    Some((polarity, rest.strip_suffix('?').unwrap_or(rest).to_string()))
}

/// Items plus the warnings recorded while producing them.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated<T> {
    pub items: Vec<T>,
    pub warnings: Vec<String>,
}

impl<T> Default for Generated<T> {
    fn default() -> Self {
        Self { items: Vec::new(), warnings: Vec::new() }
    }
}

impl<T> Generated<T> {
    fn warn(&mut self, message: String) {
        log::warn!("{message}");
        self.warnings.push(message);
    }
}

impl PromptTemplates {
    pub fn description_prompt(&self, name: &str) -> Result<String, ConceptError> {
        self.render(TemplateName::ConceptDescription, &[("CONCEPT_NAME", name)])
    }

    fn concept_prompt(&self, name: TemplateName, concept: &Concept) -> Result<String, ConceptError> {
        self.render(
            name,
            &[("CONCEPT_NAME", &concept.name), ("CONCEPT_DESCRIPTION", &concept.description)],
        )
    }

    pub fn positive_attributes_prompt(&self, concept: &Concept) -> Result<String, ConceptError> {
        self.concept_prompt(TemplateName::PositiveAttributes, concept)
    }

    /// Also used for negative search queries: the hard-negative query
    /// prompt is the carve-out extraction prompt.
    pub fn carve_outs_prompt(&self, concept: &Concept) -> Result<String, ConceptError> {
        self.concept_prompt(TemplateName::CarveOuts, concept)
    }

    pub fn positive_queries_prompt(&self, concept: &Concept) -> Result<String, ConceptError> {
        self.concept_prompt(TemplateName::PositiveQueries, concept)
    }

    pub fn questions_prompt(&self, concept: &Concept) -> Result<String, ConceptError> {
        self.concept_prompt(TemplateName::QuestionsFromDescription, concept)
    }

    pub fn decompose_prompt(&self, concept: &Concept, attr: &Attribute) -> Result<String, ConceptError> {
        self.render(
            TemplateName::DecomposeAttribute,
            &[
                ("CONCEPT_NAME", &concept.name),
                ("CONCEPT_DESCRIPTION", &concept.description),
                ("ATTRIBUTE", &attr.text),
            ],
        )
    }

    pub fn mutate_prompt(&self, concept: &Concept, query: &str, mutation: Mutation) -> Result<String, ConceptError> {
        self.render(
            TemplateName::MutateQuery,
            &[
                ("CONCEPT_NAME", &concept.name),
                ("QUERY", query),
                ("MUTATION_INSTRUCTION", mutation.instruction()),
            ],
        )
    }
}

/// Parses a description response; the text from the definition marker on
/// is kept, code fences removed.
pub fn parse_description(response: &str) -> Result<String, ConceptError> {
    let cleaned = response.replace("```", "");
    let lower = cleaned.to_lowercase();
    let start = lower
        .find(DESCRIPTION_MARKER)
        .ok_or_else(|| ConceptError::Unparseable("description lacks \"Visual concept definition:\"".into()))?;
    let text = cleaned[start..].trim().to_string();
    if text.len() <= DESCRIPTION_MARKER.len() {
        return Err(ConceptError::Unparseable("description body is empty".into()));
    }
    Ok(text)
}

/// Parses the `<positiveAttributes>` list into in-scope attributes.
pub fn parse_positive_attributes(response: &str) -> Result<Vec<Attribute>, ConceptError> {
    let items: Vec<String> =
        tagged_occurrences(response, "attribute").into_iter().filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(if response.contains("<positiveAttributes>") {
            ConceptError::EmptyList("positiveAttributes".into())
        } else {
            ConceptError::Unparseable("no well-formed <attribute> element".into())
        });
    }
    Ok(dedup_attributes(items.into_iter().map(|t| Attribute::new(t, Polarity::InScope, false)).collect()))
}

/// Parses a `<carveOutsInDescription>` list; the lone sentinel means none.
pub fn parse_carve_outs(response: &str) -> Result<Vec<String>, ConceptError> {
    let items: Vec<String> =
        parse_tagged_list(response, "carveOut")?.into_iter().filter(|s| !s.is_empty()).collect();
    let sentinels = items.iter().filter(|s| s.as_str() == NOT_FOUND).count();
    match (sentinels, items.len()) {
        (0, _) => Ok(items),
        (1, 1) => Ok(Vec::new()),
        _ => Err(ConceptError::Unparseable(format!("{NOT_FOUND} mixed with carve-outs"))),
    }
}

pub struct ConceptEngine {
    llm: Arc<Backend>,
    templates: PromptTemplates,
    max_tokens: usize,
    decompose: bool,
}

impl ConceptEngine {
    pub fn new(llm: Arc<Backend>) -> Self {
        Self { llm, templates: PromptTemplates::default(), max_tokens: DEFAULT_MAX_TOKENS, decompose: true }
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    /// Whether `initialize` decomposes extracted attributes (default on).
    pub fn with_decomposition(mut self, on: bool) -> Self {
        self.decompose = on;
        self
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    fn ask(&self, prompt: &str) -> Result<String, ConceptError> {
        Ok(self.llm.complete(prompt, self.max_tokens)?)
    }

    pub fn generate_description(&self, name: &str) -> Result<String, ConceptError> {
        if name.trim().is_empty() {
            return Err(ConceptError::Precondition("concept name is empty".into()));
        }
        parse_description(&self.ask(&self.templates.description_prompt(name.trim())?)?)
    }

    /// A user-supplied description passes through unchanged.
    pub fn describe(&self, name: &str, description: Option<&str>) -> Result<String, ConceptError> {
        match description.map(str::trim).filter(|d| !d.is_empty()) {
            Some(d) => Ok(d.to_string()),
            None => self.generate_description(name),
        }
    }

    fn require_description(concept: &Concept) -> Result<(), ConceptError> {
        if concept.description.trim().is_empty() {
            return Err(ConceptError::Precondition("concept description is empty".into()));
        }
        Ok(())
    }

    pub fn extract_positive_attributes(&self, concept: &Concept) -> Result<Vec<Attribute>, ConceptError> {
        Self::require_description(concept)?;
        parse_positive_attributes(&self.ask(&self.templates.positive_attributes_prompt(concept)?)?)
    }

    pub fn extract_carveouts(&self, concept: &Concept) -> Result<Vec<Attribute>, ConceptError> {
        Self::require_description(concept)?;
        let texts = parse_carve_outs(&self.ask(&self.templates.carve_outs_prompt(concept)?)?)?;
        Ok(dedup_attributes(texts.into_iter().map(Attribute::carve_out).collect()))
    }

    /// Splits a compound attribute into atomic children with the parent's
    /// polarity.
    pub fn decompose_attribute(&self, concept: &Concept, attr: &Attribute) -> Result<Vec<Attribute>, ConceptError> {
        if attr.atomic {
            return Err(ConceptError::Precondition(format!("attribute {:?} is already atomic", attr.text)));
        }
        let response = self.ask(&self.templates.decompose_prompt(concept, attr)?)?;
        let items: Vec<String> =
            parse_tagged_list(&response, "attribute")?.into_iter().filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(ConceptError::Unparseable("decomposition returned only empty attributes".into()));
        }
        Ok(dedup_attributes(items.into_iter().map(|t| Attribute::new(t, attr.polarity, true)).collect()))
    }

    /// Runs attribute extraction on the concept's current description.
    /// In-scope attributes are decomposed into atomic ones; carve-outs are
    /// kept whole because splitting a conjunction such as "tuna sandwich"
    /// would veto every image sharing one of its parts.
    pub fn extract_attributes(&self, concept: &Concept) -> Result<Concept, ConceptError> {
        let positives = self.extract_positive_attributes(concept)?;
        let carve_outs = self.extract_carveouts(concept)?;
        let positives = if self.decompose {
            let mut atomic = Vec::new();
            for attr in positives {
                atomic.extend(self.decompose_attribute(concept, &attr)?);
            }
            atomic
        } else {
            positives.into_iter().map(|a| Attribute { atomic: true, ..a }).collect()
        };
        Ok(concept.clone().with_attributes(positives, carve_outs))
    }

    /// Concept initialization: description (generated when absent), then
    /// attribute extraction.
    pub fn initialize(&self, name: &str, description: Option<&str>) -> Result<Concept, ConceptError> {
        let description = self.describe(name, description)?;
        let concept = Concept::new(name, &description)?;
        self.extract_attributes(&concept)
    }

    pub fn generate_questions(
        &self,
        concept: &Concept,
        config: &AnnotatorConfig,
    ) -> Result<Vec<BoundQuestion>, ConceptError> {
        config.validate().map_err(|e| ConceptError::Precondition(e.to_string()))?;
        let mut questions = if config.use_positive_attributes_for_questions {
            concept
                .positive_attributes
                .iter()
                .chain(&concept.carve_outs)
                .map(BoundQuestion::for_attribute)
                .collect::<Vec<_>>()
        } else {
            Self::require_description(concept)?;
            parse_description_questions(&self.ask(&self.templates.questions_prompt(concept)?)?)?
        };
        if !config.generate_negative_questions {
            questions.retain(|q| q.expected_polarity == Polarity::InScope);
        }
        if let Some(k) = config.question_limit() {
            questions.truncate(k);
        }
        if questions.is_empty() {
            return Err(ConceptError::NoAttributesAvailable);
        }
        Ok(questions)
    }

    pub fn generate_search_queries(
        &self,
        concept: &Concept,
        polarity: QueryPolarity,
    ) -> Result<Generated<SearchQuery>, ConceptError> {
        Self::require_description(concept)?;
        let raw = match polarity {
            QueryPolarity::Positive => {
                let response = self.ask(&self.templates.positive_queries_prompt(concept)?)?;
                parse_tagged_list(&response, "keyword")?
            }
            QueryPolarity::Negative => {
                parse_carve_outs(&self.ask(&self.templates.carve_outs_prompt(concept)?)?)?
            }
        };
        let mut out = Generated::default();
        let mut seen = HashSet::new();
        for text in raw.into_iter().filter(|t| !t.is_empty()) {
            let q = SearchQuery::seed(&text, polarity);
            if q.word_count > MAX_QUERY_WORDS {
                out.warn(format!("dropped {}-word query {:?}", q.word_count, q.text));
                continue;
            }
            if !seen.insert(text::normalize(&q.text)) {
                continue;
            }
            out.items.push(q);
        }
        if out.items.len() > MAX_SEARCH_QUERIES {
            out.warn(format!("truncated {} queries to {MAX_SEARCH_QUERIES}", out.items.len()));
            out.items.truncate(MAX_SEARCH_QUERIES);
        }
        Ok(out)
    }

    /// Expands queries with broader / narrower / variation rewrites. Each
    /// round mutates the variants produced by the previous one; variants that
    /// fail to generate or parse are skipped with a warning.
    pub fn mutate_queries(
        &self,
        concept: &Concept,
        queries: &[SearchQuery],
        rounds: usize,
    ) -> Result<Generated<SearchQuery>, ConceptError> {
        if queries.is_empty() {
            return Err(ConceptError::Precondition("no queries to mutate".into()));
        }
        let mut out = Generated { items: queries.to_vec(), warnings: Vec::new() };
        let mut seen: HashSet<String> = queries.iter().map(|q| text::normalize(&q.text)).collect();
        let mut frontier = queries.to_vec();
        for _ in 0..rounds {
            let jobs: Vec<(&SearchQuery, Mutation)> =
                frontier.iter().flat_map(|q| Mutation::ALL.map(|m| (q, m))).collect();
            let replies: Vec<Result<Vec<String>, ConceptError>> = jobs
                .par_iter()
                .map(|(q, m)| {
                    let prompt = self.templates.mutate_prompt(concept, &q.text, *m)?;
                    parse_tagged_list(&self.ask(&prompt)?, "query")
                })
                .collect();
            let mut next = Vec::new();
            for ((parent, mutation), reply) in jobs.into_iter().zip(replies) {
                let texts = match reply {
                    Ok(t) => t,
                    Err(e) => {
                        out.warn(format!("{mutation:?} of {:?} skipped: {e}", parent.text));
                        continue;
                    }
                };
                for text in texts.into_iter().filter(|t| !t.is_empty()) {
                    let mut child = SearchQuery::seed(&text, parent.polarity);
                    if child.word_count > MAX_QUERY_WORDS {
                        out.warn(format!("dropped {}-word variant {:?}", child.word_count, child.text));
                        continue;
                    }
                    if !seen.insert(text::normalize(&child.text)) {
                        continue;
                    }
                    child.lineage = parent.lineage.clone();
                    child.lineage.push(mutation);
                    next.push(child);
                }
            }
            out.items.extend(next.iter().cloned());
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        Ok(out)
    }
}

/// Parses the description-driven question response. Every item names the
/// fact it checks; that fact becomes the question's synthetic binding.
pub fn parse_description_questions(response: &str) -> Result<Vec<BoundQuestion>, ConceptError> {
    let in_blocks = parse_tagged_list(response, "inScopeQuestions")?;
    let out_blocks = tagged_occurrences(response, "outOfScopeQuestions");
    let mut questions = Vec::new();
    for (blocks, polarity) in [(in_blocks, Polarity::InScope), (out_blocks, Polarity::OutOfScope)] {
        for block in blocks {
            for item in tagged_occurrences(&block, "item") {
                let attr = single_tag(&item, "attribute")?;
                let text = single_tag(&item, "question")?;
                let attr = Attribute::new(attr, polarity, true);
                questions.push(BoundQuestion {
                    text,
                    bound_attribute: attr.id,
                    attribute_text: attr.text,
                    expected_polarity: polarity,
                });
            }
        }
    }
    let mut seen = HashSet::new();
    questions.retain(|q| seen.insert(q.bound_attribute.clone()));
    Ok(questions)
}

fn single_tag(text: &str, tag: &str) -> Result<String, ConceptError> {
    let mut items = parse_tagged_list(text, tag)?;
    if items.len() != 1 || items[0].is_empty() {
        return Err(ConceptError::Unparseable(format!("expected exactly one non-empty <{tag}>")));
    }
    Ok(items.remove(0))
}

/// Renders a description-question response in the format
/// [`parse_description_questions`] reads.
pub fn render_description_questions(in_scope: &[(String, String)], out_of_scope: &[(String, String)]) -> String {
    let block = |tag: &str, items: &[(String, String)]| {
        let mut s = format!("<{tag}>\n");
        for (attr, q) in items {
            s.push_str(&format!("  <item><attribute>{attr}</attribute><question>{q}</question></item>\n"));
        }
        s.push_str(&format!("</{tag}>\n"));
        s
    };
    format!(
        "```xml\n{}{}```",
        block("inScopeQuestions", in_scope),
        block("outOfScopeQuestions", out_of_scope)
    )
}

#[cfg(test)]
mod tests;
