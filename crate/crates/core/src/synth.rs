//! Synthetic worlds for the demo, the designed experiments and benches: a
//! concept with known attributes, a mock-embedded corpus whose ground truth
//! follows the decision rule, and a scripted LLM that answers every prompt
//! the pipeline issues for that concept.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotator::MockDecisionLlm;
use crate::concept::{
    question_text, render_description_questions, render_tagged_list, Attribute, Concept, Mutation, PromptTemplates,
    NOT_FOUND,
};
use crate::corpus::{CorpusError, CorpusIndex, ImageRecord};
use crate::gateway::{GatewayError, MockEmbedder, MockLlm};
use crate::text;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConcept {
    pub name: String,
    pub description: String,
    pub required: Vec<String>,
    pub carve_outs: Vec<String>,
    pub distractors: Vec<String>,
}

impl SynthConcept {
    pub fn stop_sign() -> Self {
        Self {
            name: "stop sign".into(),
            description: "Visual concept definition: a physical stop sign standing in real traffic. \
                          Printed advertisements and toy signs do not count."
                .into(),
            required: vec!["stop sign".into(), "traffic".into()],
            carve_outs: vec!["advertisement".into(), "toy".into()],
            distractors: default_distractors(),
        }
    }

    pub fn gourmet_tuna() -> Self {
        Self {
            name: "gourmet tuna".into(),
            description: "Visual concept definition: plated tuna prepared as a gourmet dish. \
                          Canned tuna and tuna sandwiches are excluded."
                .into(),
            required: vec!["tuna".into(), "gourmet dish".into()],
            carve_outs: vec!["canned".into(), "sandwich".into()],
            distractors: default_distractors(),
        }
    }

    pub fn required_ids(&self) -> Vec<String> {
        self.required.iter().map(|s| text::slug(s)).collect()
    }

    pub fn carve_out_ids(&self) -> Vec<String> {
        self.carve_outs.iter().map(|s| text::slug(s)).collect()
    }

    /// The concept as the engine produces it from the scripted LLM.
    pub fn concept(&self) -> Concept {
        Concept::new(&self.name, &self.description)
            .expect("synthetic concept has a name")
            .with_attributes(
                self.required.iter().map(Attribute::in_scope).collect(),
                self.carve_outs.iter().map(Attribute::carve_out).collect(),
            )
    }

    /// Ground truth: every required attribute present and no carve-out.
    pub fn label(&self, attrs: &BTreeSet<String>) -> bool {
        self.required_ids().iter().all(|a| attrs.contains(a)) && !self.carve_out_ids().iter().any(|a| attrs.contains(a))
    }

    pub fn positive_queries(&self) -> Vec<String> {
        let mut q = vec![self.name.clone(), self.required.join(" ")];
        q.extend(self.required.iter().cloned());
        q
    }

    /// Scripted LLM covering description, attribute extraction,
    /// decomposition, search queries, one mutation round, description
    /// questions and final decisions.
    /// Mock LLM with every prompt of the concept pipeline scripted, plus the
    /// structured decision responder for annotation prompts.
    pub fn llm(&self, templates: &PromptTemplates, seed: u64) -> MockLlm {
        let mut llm = MockLlm::new(seed).with_responder(Arc::new(MockDecisionLlm));
        for (prompt, response) in self.script_entries(templates) {
            llm.script(&prompt, response);
        }
        llm
    }

    /// `(prompt, response)` pairs for concept initialization, query
    /// generation, mutation and question generation.
    pub fn script_entries(&self, templates: &PromptTemplates) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let c = self.concept();
        let blank = Concept::new(&self.name, &self.description).expect("named");
        let mut script = |prompt: Result<String, _>, response: String| {
            out.push((prompt.expect("built-in templates render"), response));
        };
        script(templates.description_prompt(&self.name), format!("Here is the definition.\n{}", self.description));
        script(
            templates.positive_attributes_prompt(&blank),
            render_tagged_list("positiveAttributes", "attribute", &self.required),
        );
        let carve = if self.carve_outs.is_empty() { vec![NOT_FOUND.to_string()] } else { self.carve_outs.clone() };
        script(templates.carve_outs_prompt(&blank), render_tagged_list("carveOutsInDescription", "carveOut", &carve));
        // identity decomposition: every extracted attribute is already atomic
        for text in &self.required {
            let attr = Attribute::in_scope(text.as_str());
            script(
                templates.decompose_prompt(&blank, &attr),
                render_tagged_list("atomicAttributes", "attribute", std::slice::from_ref(text)),
            );
        }
        // the engine asks for queries with the extracted concept
        script(
            templates.positive_queries_prompt(&c),
            render_tagged_list("google_search_keywords", "keyword", &self.positive_queries()),
        );
        script(templates.carve_outs_prompt(&c), render_tagged_list("carveOutsInDescription", "carveOut", &carve));
        let seeds: Vec<String> = self.positive_queries().into_iter().chain(self.carve_outs.iter().cloned()).collect();
        for q in &seeds {
            for m in Mutation::ALL {
                script(templates.mutate_prompt(&c, q, m), format!("<query>{}</query>", self.mutate(q, m)));
            }
        }
        let pairs = |attrs: &[Attribute]| -> Vec<(String, String)> {
            attrs.iter().map(|a| (a.text.clone(), question_text(a))).collect()
        };
        script(
            templates.questions_prompt(&c),
            render_description_questions(&pairs(&c.positive_attributes), &pairs(&c.carve_outs)),
        );
        out
    }

    fn mutate(&self, query: &str, m: Mutation) -> String {
        let words: Vec<&str> = query.split_whitespace().collect();
        match m {
            Mutation::Broader if words.len() > 1 => words[words.len() - 1].to_string(),
            Mutation::Broader => format!("{query} scene"),
            Mutation::Narrower => format!("{query} close up"),
            Mutation::Variation => format!("photo of {query}"),
        }
    }
}

fn default_distractors() -> Vec<String> {
    [
        "tree", "car", "building", "sky", "person", "dog", "bicycle", "bus", "street lamp", "bench", "grass", "cloud",
        "window", "fence", "bird", "truck", "sidewalk", "mountain", "river", "table", "chair", "plate", "cup", "flower",
        "boat", "bridge", "crowd", "night", "snow", "rain", "shadow", "wall", "door", "poster", "screen", "logo",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Mixture of record kinds. Fractions are of the whole corpus; the rest are
/// easy negatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldSpec {
    pub records: usize,
    pub dim: usize,
    pub positive_fraction: f64,
    /// Records that miss one required attribute or add one carve-out.
    pub hard_negative_fraction: f64,
    pub max_distractors: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self { records: 5000, dim: 64, positive_fraction: 0.1, hard_negative_fraction: 0.3, max_distractors: 6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Positive,
    MissingRequired,
    CarveOut,
    Easy,
}

pub struct SynthWorld {
    pub concept: SynthConcept,
    pub corpus: CorpusIndex,
    pub truth: BTreeMap<String, bool>,
    pub kinds: BTreeMap<String, RecordKind>,
    pub embedder: MockEmbedder,
}

impl SynthWorld {
    /// Generates the corpus; records carry both their attribute set and the
    /// mock embedding of that set.
    pub fn generate(concept: SynthConcept, spec: WorldSpec, seed: u64) -> Result<Self, SynthError> {
        let embedder = MockEmbedder::new(spec.dim, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let required = concept.required_ids();
        let carve = concept.carve_out_ids();
        let distractors: Vec<String> = concept.distractors.iter().map(|d| text::slug(d)).collect();
        let mut records = Vec::with_capacity(spec.records);
        let mut truth = BTreeMap::new();
        let mut kinds = BTreeMap::new();
        for i in 0..spec.records {
            let id = format!("img-{i:05}");
            let u: f64 = rng.gen();
            let kind = if u < spec.positive_fraction {
                RecordKind::Positive
            } else if u < spec.positive_fraction + spec.hard_negative_fraction {
                if carve.is_empty() || rng.gen_bool(0.5) {
                    RecordKind::MissingRequired
                } else {
                    RecordKind::CarveOut
                }
            } else {
                RecordKind::Easy
            };
            let mut attrs: BTreeSet<String> = BTreeSet::new();
            match kind {
                RecordKind::Positive => attrs.extend(required.iter().cloned()),
                RecordKind::MissingRequired => {
                    let skip = rng.gen_range(0..required.len());
                    attrs.extend(required.iter().enumerate().filter(|(j, _)| *j != skip).map(|(_, a)| a.clone()));
                }
                RecordKind::CarveOut => {
                    attrs.extend(required.iter().cloned());
                    attrs.insert(carve.choose(&mut rng).expect("carve-outs exist").clone());
                }
                RecordKind::Easy => {}
            }
            let n = rng.gen_range(usize::from(attrs.is_empty())..=spec.max_distractors);
            attrs.extend(distractors.choose_multiple(&mut rng, n).cloned());
            let embedding = embedder.embed_features(attrs.iter().map(String::as_str));
            truth.insert(id.clone(), concept.label(&attrs));
            kinds.insert(id.clone(), kind);
            records.push(ImageRecord {
                uri: format!("mem://synth/{id}"),
                id,
                embedding: Some(embedding),
                mock_attributes: Some(attrs),
                metadata: BTreeMap::new(),
            });
        }
        let corpus = CorpusIndex::from_records("synthetic", spec.dim, records)?;
        Ok(Self { concept, corpus, truth, kinds, embedder })
    }

    pub fn ids(&self) -> Vec<String> {
        self.truth.keys().cloned().collect()
    }

    /// Seeded disjoint partition of the corpus ids into slices of the given
    /// sizes; the remainder is returned last.
    pub fn split(&self, sizes: &[usize], seed: u64) -> Vec<Vec<String>> {
        let mut ids = self.ids();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut out = Vec::with_capacity(sizes.len() + 1);
        let mut rest = ids.as_slice();
        for &n in sizes {
            let (head, tail) = rest.split_at(n.min(rest.len()));
            out.push(head.to_vec());
            rest = tail;
        }
        out.push(rest.to_vec());
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}
