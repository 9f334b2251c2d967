//! The teacher: asks VQA questions about one image, optionally captions it,
//! and lets the LLM decide positive/negative with a rationale.

mod config;
mod decision;

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept::{BoundQuestion, Concept, ConceptEngine, ConceptError, Polarity, PromptTemplates, TemplateName};
use crate::corpus::ImageRecord;
use crate::gateway::{Gateway, GatewayError, VqaExchange};

pub use config::{AnnotatorConfig, ConfigError, StrategyTable, DEFAULT_FIXED_QUESTION_COUNT, STRATEGY_COUNT};
pub use decision::{decision_oracle, parse_decision, MockDecisionLlm};

pub const ANNOTATION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Positive,
    Negative,
}

impl Decision {
    pub fn is_positive(self) -> bool {
        self == Decision::Positive
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Decision::Positive
        } else {
            Decision::Negative
        }
    }
}

/// Normalized reading of a free-text VQA answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Answer {
    Yes,
    No,
    Other,
}

/// Classifies an answer by its first token; anything but yes/no is `Other`.
pub fn normalize_answer(answer: &str) -> Answer {
    let first = answer.split_whitespace().next().unwrap_or("");
    let token: String = first.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect();
    match token.as_str() {
        "yes" => Answer::Yes,
        "no" => Answer::No,
        _ => Answer::Other,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub image_id: String,
    pub decision: Decision,
    pub reasons: Vec<String>,
    pub exchanges: Vec<VqaExchange>,
    pub caption: Option<String>,
    pub config_used: usize,
    pub in_scope_present: Vec<String>,
    pub in_scope_missing: Vec<String>,
    pub out_of_scope_present: Vec<String>,
}

/// Pipeline stage an annotation failed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Questions,
    Vqa,
    Caption,
    FinalPrompt,
    Decision,
}

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("question generation failed: {0}")]
    Questions(ConceptError),
    #[error("VQA failed on {question:?}: {source}")]
    Vqa { question: String, source: GatewayError },
    #[error("captioning failed: {0}")]
    Caption(GatewayError),
    #[error("final prompt: {0}")]
    FinalPrompt(ConceptError),
    #[error("decision call failed: {0}")]
    DecisionCall(GatewayError),
    #[error("unparseable decision: {0}")]
    DecisionParse(String),
}

impl AnnotateError {
    pub fn stage(&self) -> Stage {
        match self {
            AnnotateError::Precondition(_) | AnnotateError::Questions(_) => Stage::Questions,
            AnnotateError::Vqa { .. } => Stage::Vqa,
            AnnotateError::Caption(_) => Stage::Caption,
            AnnotateError::FinalPrompt(_) => Stage::FinalPrompt,
            AnnotateError::DecisionCall(_) | AnnotateError::DecisionParse(_) => Stage::Decision,
        }
    }

    fn from_questions(e: ConceptError) -> Self {
        match e {
            ConceptError::Precondition(m) => AnnotateError::Precondition(m),
            ConceptError::NoAttributesAvailable => AnnotateError::Precondition(e.to_string()),
            other => AnnotateError::Questions(other),
        }
    }
}

/// One entry of a batch: a result or the error that stopped that image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AnnotationOutcome {
    Ok(AnnotationResult),
    Failed { image_id: String, stage: Stage, error: String },
}

impl AnnotationOutcome {
    pub fn image_id(&self) -> &str {
        match self {
            AnnotationOutcome::Ok(r) => &r.image_id,
            AnnotationOutcome::Failed { image_id, .. } => image_id,
        }
    }

    pub fn result(&self) -> Option<&AnnotationResult> {
        match self {
            AnnotationOutcome::Ok(r) => Some(r),
            AnnotationOutcome::Failed { .. } => None,
        }
    }

    fn failed(image_id: &str, e: &AnnotateError) -> Self {
        AnnotationOutcome::Failed { image_id: image_id.to_string(), stage: e.stage(), error: e.to_string() }
    }
}

/// Canonical `Q: …\nA: …` serialization of the rater responses, with an
/// optional trailing caption line.
pub fn serialize_exchanges(exchanges: &[VqaExchange], caption: Option<&str>) -> String {
    let mut out = String::from("\n");
    for e in exchanges {
        out.push_str(&format!("Q: {}\nA: {}\n", e.question.trim(), e.answer.trim()));
    }
    if let Some(c) = caption {
        out.push_str(&format!("Caption: {}\n", c.trim()));
    }
    out
}

fn attribute_block(tag: &str, texts: &[&str]) -> String {
    let mut out = format!("<{tag}>");
    for t in texts {
        out.push_str(&format!("<attribute>{t}</attribute>"));
    }
    out.push_str(&format!("</{tag}>\n"));
    out
}

/// Instantiates the final-decision template. Attribute lists name the
/// attributes behind the questions that were asked and are left out when
/// the config rates without attributes.
pub fn build_final_prompt(
    templates: &PromptTemplates,
    concept: &Concept,
    questions: &[BoundQuestion],
    exchanges: &[VqaExchange],
    caption: Option<&str>,
    config: &AnnotatorConfig,
) -> Result<String, ConceptError> {
    let attributes = if config.final_rating_without_attributes {
        String::new()
    } else {
        let texts = |p: Polarity| -> Vec<&str> {
            questions.iter().filter(|q| q.expected_polarity == p).map(|q| q.attribute_text.as_str()).collect()
        };
        attribute_block("inScopeAttributes", &texts(Polarity::InScope))
            + &attribute_block("outOfScopeAttributes", &texts(Polarity::OutOfScope))
    };
    let caption = if config.use_captioning_questions { caption } else { None };
    templates.render(
        TemplateName::FinalDecision,
        &[
            ("CONCEPT_NAME", &concept.name),
            ("CONCEPT_DESCRIPTION", &concept.description),
            ("CONCEPT_ATTRIBUTES", &attributes),
            ("PALI_QUESTIONS_AND_ANSWERS", &serialize_exchanges(exchanges, caption)),
        ],
    )
}

pub struct Annotator {
    engine: ConceptEngine,
    gateway: Gateway,
}

impl Annotator {
    pub fn new(gateway: Gateway, templates: PromptTemplates) -> Self {
        let engine = ConceptEngine::new(gateway.llm.clone()).with_templates(templates);
        Self { engine, gateway }
    }

    pub fn templates(&self) -> &PromptTemplates {
        self.engine.templates()
    }

    pub fn questions(&self, concept: &Concept, config: &AnnotatorConfig) -> Result<Vec<BoundQuestion>, AnnotateError> {
        config.validate().map_err(|e| AnnotateError::Precondition(e.to_string()))?;
        self.engine.generate_questions(concept, config).map_err(AnnotateError::from_questions)
    }

    pub fn annotate(
        &self,
        image: &ImageRecord,
        concept: &Concept,
        config: &AnnotatorConfig,
    ) -> Result<AnnotationResult, AnnotateError> {
        let questions = self.questions(concept, config)?;
        self.annotate_with_questions(image, concept, config, &questions)
    }

    /// Runs the per-image stages with a precomputed question set.
    pub fn annotate_with_questions(
        &self,
        image: &ImageRecord,
        concept: &Concept,
        config: &AnnotatorConfig,
        questions: &[BoundQuestion],
    ) -> Result<AnnotationResult, AnnotateError> {
        if questions.is_empty() {
            return Err(AnnotateError::Precondition("no questions to ask".into()));
        }
        let exchanges = questions
            .par_iter()
            .map(|q| {
                self.gateway
                    .vqa
                    .vqa_answer(image, &q.to_vqa())
                    .map_err(|source| AnnotateError::Vqa { question: q.text.clone(), source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let caption = if config.use_captioning_questions {
            Some(self.gateway.captioner.caption(image).map_err(AnnotateError::Caption)?)
        } else {
            None
        };
        let prompt =
            build_final_prompt(self.templates(), concept, questions, &exchanges, caption.as_deref(), config)
                .map_err(AnnotateError::FinalPrompt)?;
        let response =
            self.gateway.llm.complete(&prompt, crate::concept::DEFAULT_MAX_TOKENS).map_err(AnnotateError::DecisionCall)?;
        let (decision, reasons) = parse_decision(&response)?;

        let mut in_present = BTreeSet::new();
        let mut in_missing = BTreeSet::new();
        let mut out_present = BTreeSet::new();
        for (q, e) in questions.iter().zip(&exchanges) {
            let yes = normalize_answer(&e.answer) == Answer::Yes;
            match (q.expected_polarity, yes) {
                (Polarity::InScope, true) => in_present.insert(q.bound_attribute.clone()),
                (Polarity::InScope, false) => in_missing.insert(q.bound_attribute.clone()),
                (Polarity::OutOfScope, true) => out_present.insert(q.bound_attribute.clone()),
                (Polarity::OutOfScope, false) => false,
            };
        }
        Ok(AnnotationResult {
            image_id: image.id.clone(),
            decision,
            reasons,
            exchanges,
            caption,
            config_used: config.strategy_index,
            in_scope_present: in_present.into_iter().collect(),
            in_scope_missing: in_missing.into_iter().collect(),
            out_of_scope_present: out_present.into_iter().collect(),
        })
    }

    /// Annotates many images in parallel. Questions are generated once;
    /// failures are recorded per image and never abort the batch.
    pub fn annotate_batch(
        &self,
        images: &[ImageRecord],
        concept: &Concept,
        config: &AnnotatorConfig,
    ) -> Result<Vec<AnnotationOutcome>, AnnotateError> {
        if images.is_empty() {
            return Err(AnnotateError::Precondition("empty image batch".into()));
        }
        let questions = match self.questions(concept, config) {
            Ok(q) => q,
            Err(e) => return Ok(images.iter().map(|img| AnnotationOutcome::failed(&img.id, &e)).collect()),
        };
        Ok(images
            .par_iter()
            .map(|img| match self.annotate_with_questions(img, concept, config, &questions) {
                Ok(r) => AnnotationOutcome::Ok(r),
                Err(e) => {
                    log::warn!("annotation of {} failed: {e}", img.id);
                    AnnotationOutcome::failed(&img.id, &e)
                }
            })
            .collect())
    }
}

#[derive(Serialize, Deserialize)]
struct SchemaHeader {
    schema: String,
    version: u32,
}

/// Writes outcomes as one JSON record per line after a schema header line.
pub fn write_outcomes(mut w: impl Write, outcomes: &[AnnotationOutcome]) -> std::io::Result<()> {
    let header = SchemaHeader { schema: "annotation".into(), version: ANNOTATION_SCHEMA_VERSION };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for o in outcomes {
        writeln!(w, "{}", serde_json::to_string(o)?)?;
    }
    Ok(())
}

pub fn read_outcomes(r: impl BufRead) -> std::io::Result<Vec<AnnotationOutcome>> {
    let invalid = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidData, m);
    let mut lines = r.lines();
    let header: SchemaHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?).map_err(|e| invalid(e.to_string()))?,
        None => return Err(invalid("missing schema header".into())),
    };
    if header.schema != "annotation" || header.version > ANNOTATION_SCHEMA_VERSION {
        return Err(invalid(format!("unsupported schema {} v{}", header.schema, header.version)));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?);
        }
    }
    Ok(out)
}
