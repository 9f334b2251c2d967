//! Core library: model gateway, concept engine, annotator, corpus index,
//! candidate miner, distilled classifier, active learning, evaluation and
//! the project service.

pub mod active_learning;
pub mod annotator;
pub mod concept;
pub mod corpus;
pub mod evaluation;
pub mod gateway;
pub mod miner;
pub mod service;
pub mod synth;
pub mod text;
pub mod trainer;

pub use annotator::{AnnotationResult, Annotator, AnnotatorConfig, Decision};
pub use concept::{Attribute, BoundQuestion, Concept, ConceptEngine, Polarity, SearchQuery};
pub use corpus::{CorpusIndex, ImageRecord};
pub use gateway::{EmbeddingVector, Gateway, VqaExchange};
