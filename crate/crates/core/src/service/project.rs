//! Project state and its on-disk form: versioned line-delimited record
//! files, one header line each, plus binary model files.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::store::{Content, FileWrite, ProjectStore, StoreError};
use crate::active_learning::RoundRecord;
use crate::annotator::{AnnotationOutcome, AnnotatorConfig};
use crate::concept::Concept;
use crate::evaluation::StrategySelection;
use crate::miner::MiningRun;
use crate::trainer::{model_bytes, model_from_bytes, DistilledModel, Label, LabelSource, TrainConfig, TrainProvenance};

pub const PROJECT_SCHEMA_VERSION: u32 = 1;

pub const META_FILE: &str = "project.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const MINING_FILE: &str = "mining.jsonl";
pub const STRATEGY_FILE: &str = "strategy.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const MODELS_FILE: &str = "models.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectMeta {
    pub id: String,
    pub name: String,
    pub seed: u64,
    pub corpus: String,
    pub concept: Concept,
    pub selected_strategy: Option<AnnotatorConfig>,
    pub train_config: TrainConfig,
    pub active_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationLabel {
    pub image_id: String,
    pub positive: bool,
}

/// A training label; the embedding is read from the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolLabel {
    pub image_id: String,
    pub label: Label,
    pub source: LabelSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_ref: String,
    pub train_size: usize,
    /// Kept here because the model file format carries weights only.
    pub provenance: Option<TrainProvenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Project {
    pub meta: ProjectMeta,
    pub validation: BTreeMap<String, bool>,
    pub labels: BTreeMap<String, PoolLabel>,
    pub mining: Option<MiningRun>,
    pub strategy: Option<StrategySelection>,
    pub annotations: Vec<AnnotationOutcome>,
    pub rounds: Vec<RoundRecord>,
    pub model_history: Vec<ModelRecord>,
    pub models: BTreeMap<String, DistilledModel>,
}

#[derive(Debug, thiserror::Error)]
pub enum ProjectFileError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{file}: {message}")]
    Format { file: String, message: String },
    #[error("{file}: schema version {found} is not supported (expected {PROJECT_SCHEMA_VERSION})")]
    Version { file: String, found: u32 },
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

fn schema_name(file: &str) -> &str {
    file.trim_end_matches(".jsonl")
}

fn render<T: Serialize>(file: &str, items: impl IntoIterator<Item = T>) -> FileWrite {
    let header = Header { schema: schema_name(file).to_string(), version: PROJECT_SCHEMA_VERSION };
    let mut out = serde_json::to_string(&header).expect("header serializes") + "\n";
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("record serializes"));
        out.push('\n');
    }
    FileWrite { path: file.to_string(), content: Content::Text(out) }
}

fn parse<T: DeserializeOwned>(file: &str, bytes: &[u8]) -> Result<Vec<T>, ProjectFileError> {
    let fmt = |message: String| ProjectFileError::Format { file: file.to_string(), message };
    let text = std::str::from_utf8(bytes).map_err(|e| fmt(e.to_string()))?;
    let mut lines = text.lines();
    let header: Header = serde_json::from_str(lines.next().ok_or_else(|| fmt("empty file".into()))?)
        .map_err(|e| fmt(format!("header: {e}")))?;
    if header.schema != schema_name(file) {
        return Err(fmt(format!("schema {:?}", header.schema)));
    }
    if header.version != PROJECT_SCHEMA_VERSION {
        return Err(ProjectFileError::Version { file: file.to_string(), found: header.version });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| fmt(format!("line {}: {e}", i + 2))))
        .collect()
}

pub fn model_path(model_ref: &str) -> String {
    format!("models/{model_ref}.mcdm")
}

impl Project {
    pub fn new(meta: ProjectMeta) -> Self {
        Self {
            meta,
            validation: BTreeMap::new(),
            labels: BTreeMap::new(),
            mining: None,
            strategy: None,
            annotations: Vec::new(),
            rounds: Vec::new(),
            model_history: Vec::new(),
            models: BTreeMap::new(),
        }
    }

    pub fn active_model(&self) -> Option<&DistilledModel> {
        self.meta.active_model.as_ref().and_then(|r| self.models.get(r))
    }

    /// Every file of the project in canonical form.
    pub fn files(&self) -> Vec<FileWrite> {
        let mut out = vec![
            render(META_FILE, [&self.meta]),
            render(
                VALIDATION_FILE,
                self.validation.iter().map(|(id, &p)| ValidationLabel { image_id: id.clone(), positive: p }),
            ),
            render(LABELS_FILE, self.labels.values()),
            render(MINING_FILE, self.mining.iter()),
            render(STRATEGY_FILE, self.strategy.iter()),
            render(ANNOTATIONS_FILE, self.annotations.iter()),
            render(ROUNDS_FILE, self.rounds.iter()),
            render(MODELS_FILE, self.model_history.iter()),
        ];
        for (r, m) in &self.models {
            out.push(FileWrite { path: model_path(r), content: Content::bytes(&model_bytes(m)) });
        }
        out
    }

    /// Files whose content differs from `before`.
    pub fn changed_files(&self, before: Option<&Project>) -> Vec<FileWrite> {
        let old: BTreeMap<String, Content> =
            before.map(|p| p.files().into_iter().map(|w| (w.path, w.content)).collect()).unwrap_or_default();
        self.files().into_iter().filter(|w| old.get(&w.path) != Some(&w.content)).collect()
    }

    pub fn load(store: &ProjectStore) -> Result<Self, ProjectFileError> {
        let read = |file: &str| -> Result<Vec<u8>, ProjectFileError> {
            store.read(file)?.ok_or_else(|| ProjectFileError::Format { file: file.into(), message: "missing".into() })
        };
        let meta: ProjectMeta = parse::<ProjectMeta>(META_FILE, &read(META_FILE)?)?
            .pop()
            .ok_or_else(|| ProjectFileError::Format { file: META_FILE.into(), message: "no record".into() })?;
        let validation = parse::<ValidationLabel>(VALIDATION_FILE, &read(VALIDATION_FILE)?)?
            .into_iter()
            .map(|v| (v.image_id, v.positive))
            .collect();
        let labels = parse::<PoolLabel>(LABELS_FILE, &read(LABELS_FILE)?)?
            .into_iter()
            .map(|l| (l.image_id.clone(), l))
            .collect();
        let model_history: Vec<ModelRecord> = parse(MODELS_FILE, &read(MODELS_FILE)?)?;
        let mut models = BTreeMap::new();
        for rec in &model_history {
            let path = model_path(&rec.model_ref);
            let model = model_from_bytes(&read(&path)?)
                .map_err(|e| ProjectFileError::Format { file: path.clone(), message: e.to_string() })?;
            models.insert(rec.model_ref.clone(), model);
        }
        Ok(Self {
            meta,
            validation,
            labels,
            mining: parse(MINING_FILE, &read(MINING_FILE)?)?.pop(),
            strategy: parse(STRATEGY_FILE, &read(STRATEGY_FILE)?)?.pop(),
            annotations: parse(ANNOTATIONS_FILE, &read(ANNOTATIONS_FILE)?)?,
            rounds: parse(ROUNDS_FILE, &read(ROUNDS_FILE)?)?,
            model_history,
            models,
        })
    }
}
