//! Project lifecycle service. Every workflow step is a [`Request`] handled
//! by [`Api::handle`]; the CLI and the HTTP server both go through it.
//!
//! Store layout under the home directory:
//! `corpora/<name>/` holds ingested corpora and `projects/<id>/` holds one
//! journaled project (see [`store`]).

pub mod config;
pub mod demo;
pub mod project;
pub mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::active_learning::{
    example_from_corpus, rounds_table, AlError, AlState, RoundContext, Sampler, DEFAULT_STRATA,
};
use crate::annotator::{AnnotateError, AnnotationOutcome, Annotator, StrategyTable};
use crate::concept::{ConceptEngine, ConceptError, PromptTemplates};
use crate::corpus::{CorpusError, CorpusIndex};
use crate::evaluation::{select_strategy, EvalError};
use crate::gateway::Gateway;
use crate::miner::{mine, MineError, DEFAULT_MUTATION_ROUNDS, DEFAULT_PER_QUERY_K};
use crate::text;
use crate::trainer::{model_bytes, model_from_bytes, Label, LabelSource, LabeledExample, TrainConfig, TrainError};

pub use project::{ModelRecord, PoolLabel, Project, ProjectMeta, ValidationLabel};
pub use store::{CrashPhase, CrashPoint, ProjectStore, StoreError};

pub const API_SCHEMA: &str = "mc.api";
pub const API_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    Precondition,
    InvalidInput,
    Conflict,
    Backend,
    Storage,
    Internal,
}

impl ErrorCode {
    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::NotFound => 404,
            ErrorCode::Precondition => 412,
            ErrorCode::InvalidInput => 400,
            ErrorCode::Conflict => 409,
            ErrorCode::Backend => 502,
            ErrorCode::Storage | ErrorCode::Internal => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {message}")]
pub struct ServiceError {
    pub code: ErrorCode,
    pub message: String,
}

impl ServiceError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    fn precondition(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Precondition, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::InvalidInput, message)
    }
}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        Self::new(ErrorCode::Storage, e.to_string())
    }
}

impl From<project::ProjectFileError> for ServiceError {
    fn from(e: project::ProjectFileError) -> Self {
        Self::new(ErrorCode::Storage, e.to_string())
    }
}

impl From<ConceptError> for ServiceError {
    fn from(e: ConceptError) -> Self {
        let code = match e {
            ConceptError::Gateway(_) => ErrorCode::Backend,
            ConceptError::Precondition(_) | ConceptError::NoAttributesAvailable => ErrorCode::Precondition,
            _ => ErrorCode::InvalidInput,
        };
        Self::new(code, e.to_string())
    }
}

impl From<CorpusError> for ServiceError {
    fn from(e: CorpusError) -> Self {
        let code = match e {
            CorpusError::Io { .. } | CorpusError::ChecksumMismatch { .. } => ErrorCode::Storage,
            _ => ErrorCode::InvalidInput,
        };
        Self::new(code, e.to_string())
    }
}

impl From<MineError> for ServiceError {
    fn from(e: MineError) -> Self {
        match e {
            MineError::Concept(c) => c.into(),
            MineError::Corpus(c) => c.into(),
            MineError::Embed { .. } => Self::new(ErrorCode::Backend, e.to_string()),
            MineError::ZeroK => Self::invalid(e.to_string()),
        }
    }
}

impl From<AnnotateError> for ServiceError {
    fn from(e: AnnotateError) -> Self {
        let code = match e {
            AnnotateError::Precondition(_) => ErrorCode::Precondition,
            _ => ErrorCode::Backend,
        };
        Self::new(code, e.to_string())
    }
}

impl From<EvalError> for ServiceError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Annotate(a) => a.into(),
            EvalError::Gateway(_) => Self::new(ErrorCode::Backend, e.to_string()),
            _ => Self::invalid(e.to_string()),
        }
    }
}

impl From<TrainError> for ServiceError {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::Empty | TrainError::SingleClass(_) | TrainError::Precondition(_) => ErrorCode::Precondition,
            TrainError::Io { .. } => ErrorCode::Storage,
            TrainError::NonFiniteLoss { .. } => ErrorCode::Internal,
            _ => ErrorCode::InvalidInput,
        };
        Self::new(code, e.to_string())
    }
}

impl From<AlError> for ServiceError {
    fn from(e: AlError) -> Self {
        match e {
            AlError::Train(t) => t.into(),
            AlError::Eval(v) => v.into(),
            AlError::Annotate(a) => a.into(),
            AlError::Teacher { .. } => Self::new(ErrorCode::Backend, e.to_string()),
            AlError::Precondition(_) => Self::precondition(e.to_string()),
            AlError::InvalidScore { .. } => Self::new(ErrorCode::Internal, e.to_string()),
        }
    }
}

fn default_k() -> usize {
    DEFAULT_PER_QUERY_K
}

fn default_rounds() -> usize {
    DEFAULT_MUTATION_ROUNDS
}

fn default_strata() -> usize {
    DEFAULT_STRATA
}

fn default_limit() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    IngestCorpus {
        name: String,
        path: PathBuf,
    },
    ListProjects,
    CreateProject {
        name: String,
        #[serde(default)]
        description: Option<String>,
        corpus: String,
        #[serde(default)]
        seed: u64,
    },
    GetProject {
        project: String,
    },
    SetDescription {
        project: String,
        text: String,
    },
    RunMining {
        project: String,
        #[serde(default = "default_k")]
        per_query_k: usize,
        #[serde(default = "default_rounds")]
        mutation_rounds: usize,
    },
    ValidationQueue {
        project: String,
        n: usize,
    },
    SubmitValidationLabels {
        project: String,
        labels: Vec<ValidationLabel>,
    },
    RunStrategySelection {
        project: String,
    },
    RunTeacherAnnotation {
        project: String,
        n: usize,
    },
    GetAnnotations {
        project: String,
        #[serde(default)]
        offset: usize,
        #[serde(default = "default_limit")]
        limit: usize,
    },
    TrainStudent {
        project: String,
        #[serde(default)]
        config: Option<TrainConfig>,
    },
    RunAlRound {
        project: String,
        sampler: Sampler,
        n: usize,
        #[serde(default = "default_strata")]
        strata: usize,
    },
    GetMetrics {
        project: String,
    },
    ExportModel {
        project: String,
    },
    ImportModel {
        project: String,
        model_hex: String,
    },
}

impl Request {
    pub fn is_mutation(&self) -> bool {
        !matches!(
            self,
            Request::ListProjects
                | Request::GetProject { .. }
                | Request::ValidationQueue { .. }
                | Request::GetAnnotations { .. }
                | Request::GetMetrics { .. }
                | Request::ExportModel { .. }
        )
    }
}

/// Versioned response document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub schema: String,
    pub version: u32,
    #[serde(flatten)]
    pub body: ResponseBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ResponseBody {
    Ok { result: Value },
    Error { error: ServiceError },
}

impl Response {
    pub fn from_result(r: Result<Value, ServiceError>) -> Self {
        let body = match r {
            Ok(result) => ResponseBody::Ok { result },
            Err(error) => ResponseBody::Error { error },
        };
        Self { schema: API_SCHEMA.into(), version: API_VERSION, body }
    }

    pub fn into_result(self) -> Result<Value, ServiceError> {
        match self.body {
            ResponseBody::Ok { result } => Ok(result),
            ResponseBody::Error { error } => Err(error),
        }
    }

    pub fn http_status(&self) -> u16 {
        match &self.body {
            ResponseBody::Ok { .. } => 200,
            ResponseBody::Error { error } => error.code.http_status(),
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("response serializes")
}

pub struct Api {
    home: PathBuf,
    gateway: Gateway,
    templates: PromptTemplates,
    locks: Mutex<BTreeMap<String, Arc<Mutex<()>>>>,
    corpora: Mutex<BTreeMap<String, Arc<CorpusIndex>>>,
    crash: Mutex<Option<CrashPoint>>,
}

impl Api {
    pub fn new(home: &Path, gateway: Gateway) -> Self {
        Self {
            home: home.to_path_buf(),
            gateway,
            templates: PromptTemplates::default(),
            locks: Mutex::new(BTreeMap::new()),
            corpora: Mutex::new(BTreeMap::new()),
            crash: Mutex::new(None),
        }
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn home(&self) -> &Path {
        &self.home
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    /// Interrupts the matching commit of any project (for crash tests).
    pub fn inject_crash(&self, crash: Option<CrashPoint>) {
        *self.crash.lock().expect("crash lock") = crash;
    }

    pub fn project_dir(&self, id: &str) -> PathBuf {
        self.home.join("projects").join(id)
    }

    pub fn corpus_dir(&self, name: &str) -> PathBuf {
        self.home.join("corpora").join(name)
    }

    pub fn handle(&self, request: Request) -> Response {
        Response::from_result(self.dispatch(request))
    }

    /// Routes a path-style HTTP request. The JSON body, the path parameters
    /// and numeric query parameters are merged into one [`Request`].
    pub fn route(&self, method: &str, path: &str, body: &str) -> Response {
        Response::from_result(route_request(method, path, body).and_then(|r| self.dispatch(r)))
    }

    fn dispatch(&self, request: Request) -> Result<Value, ServiceError> {
        match request {
            Request::IngestCorpus { name, path } => self.ingest_corpus(&name, &path),
            Request::ListProjects => self.list_projects(),
            Request::CreateProject { name, description, corpus, seed } => {
                self.create_project(&name, description.as_deref(), &corpus, seed)
            }
            Request::GetProject { project } => self.get_project(&project),
            Request::SetDescription { project, text } => self.set_description(&project, &text),
            Request::RunMining { project, per_query_k, mutation_rounds } => {
                self.run_mining(&project, per_query_k, mutation_rounds)
            }
            Request::ValidationQueue { project, n } => self.validation_queue(&project, n),
            Request::SubmitValidationLabels { project, labels } => self.submit_validation_labels(&project, labels),
            Request::RunStrategySelection { project } => self.run_strategy_selection(&project),
            Request::RunTeacherAnnotation { project, n } => self.run_teacher_annotation(&project, n),
            Request::GetAnnotations { project, offset, limit } => self.get_annotations(&project, offset, limit),
            Request::TrainStudent { project, config } => self.train_student(&project, config),
            Request::RunAlRound { project, sampler, n, strata } => self.run_al_round(&project, sampler, n, strata),
            Request::GetMetrics { project } => self.get_metrics(&project),
            Request::ExportModel { project } => self.export_model(&project),
            Request::ImportModel { project, model_hex } => self.import_model(&project, &model_hex),
        }
    }

    fn lock(&self, id: &str) -> Arc<Mutex<()>> {
        self.locks.lock().expect("lock table").entry(id.to_string()).or_default().clone()
    }

    pub fn corpus(&self, name: &str) -> Result<Arc<CorpusIndex>, ServiceError> {
        if let Some(c) = self.corpora.lock().expect("corpus cache").get(name) {
            return Ok(c.clone());
        }
        let dir = self.corpus_dir(name);
        if !dir.join("manifest.json").exists() {
            return Err(ServiceError::not_found(format!("corpus {name:?} is not ingested")));
        }
        let index = Arc::new(CorpusIndex::load(&dir)?);
        self.corpora.lock().expect("corpus cache").insert(name.to_string(), index.clone());
        Ok(index)
    }

    fn engine(&self) -> ConceptEngine {
        ConceptEngine::new(self.gateway.llm.clone()).with_templates(self.templates.clone())
    }

    fn annotator(&self) -> Annotator {
        Annotator::new(self.gateway.clone(), self.templates.clone())
    }

    /// Loads a snapshot of a project.
    pub fn load_project(&self, id: &str) -> Result<Project, ServiceError> {
        let dir = self.project_dir(id);
        if !dir.exists() {
            return Err(ServiceError::not_found(format!("project {id:?} does not exist")));
        }
        let _guard = self.lock(id);
        let store = ProjectStore::open(&dir)?;
        if store.read(project::META_FILE)?.is_none() {
            return Err(ServiceError::not_found(format!("project {id:?} does not exist")));
        }
        Ok(Project::load(&store)?)
    }

    /// Runs `f` on a copy of the project under the project lock and commits
    /// the changed files as one journal entry. Nothing is written when `f`
    /// fails.
    fn mutate<T>(
        &self,
        id: &str,
        op: &str,
        f: impl FnOnce(&mut Project) -> Result<T, ServiceError>,
    ) -> Result<T, ServiceError> {
        let lock = self.lock(id);
        let _held = lock.lock().expect("project lock");
        let dir = self.project_dir(id);
        if !dir.join(project::META_FILE).exists() {
            return Err(ServiceError::not_found(format!("project {id:?} does not exist")));
        }
        let mut store = ProjectStore::open(&dir)?;
        store.inject_crash(*self.crash.lock().expect("crash lock"));
        let before = Project::load(&store)?;
        let mut after = before.clone();
        let out = f(&mut after)?;
        let writes = after.changed_files(Some(&before));
        if !writes.is_empty() {
            store.commit(op, writes)?;
        }
        Ok(out)
    }

    fn ingest_corpus(&self, name: &str, path: &Path) -> Result<Value, ServiceError> {
        if text::slug(name) != name || name.is_empty() {
            return Err(ServiceError::invalid(format!("corpus name {name:?} must be a lowercase slug")));
        }
        let index = CorpusIndex::ingest(path)?;
        let dir = self.corpus_dir(name);
        let staging = self.home.join("corpora").join(format!(".{name}.staging"));
        if staging.exists() {
            std::fs::remove_dir_all(&staging)
                .map_err(|e| ServiceError::new(ErrorCode::Storage, format!("{}: {e}", staging.display())))?;
        }
        index.persist(&staging)?;
        if dir.exists() {
            let existing = CorpusIndex::load(&dir)?;
            if existing.manifest().checksum != index.manifest().checksum {
                return Err(ServiceError::new(
                    ErrorCode::Conflict,
                    format!("corpus {name:?} already exists with different content"),
                ));
            }
            std::fs::remove_dir_all(&staging).ok();
        } else {
            std::fs::rename(&staging, &dir)
                .map_err(|e| ServiceError::new(ErrorCode::Storage, format!("{}: {e}", dir.display())))?;
        }
        let m = index.manifest().clone();
        self.corpora.lock().expect("corpus cache").insert(name.to_string(), Arc::new(CorpusIndex::load(&dir)?));
        Ok(json!({ "corpus": name, "records": m.record_count, "dim": m.dim, "checksum": m.checksum }))
    }

    fn list_projects(&self) -> Result<Value, ServiceError> {
        let dir = self.home.join("projects");
        let mut ids = Vec::new();
        if let Ok(entries) = std::fs::read_dir(&dir) {
            for e in entries.flatten() {
                if e.path().join(project::META_FILE).exists() {
                    ids.push(e.file_name().to_string_lossy().into_owned());
                }
            }
        }
        ids.sort();
        Ok(json!({ "projects": ids }))
    }

    fn create_project(&self, name: &str, description: Option<&str>, corpus: &str, seed: u64) -> Result<Value, ServiceError> {
        let id = text::slug(name);
        if id.is_empty() {
            return Err(ServiceError::invalid("project name must contain a letter or digit"));
        }
        self.corpus(corpus)?;
        let lock = self.lock(&id);
        let _held = lock.lock().expect("project lock");
        let dir = self.project_dir(&id);
        if dir.join(project::META_FILE).exists() {
            return Err(ServiceError::new(ErrorCode::Conflict, format!("project {id:?} already exists")));
        }
        let concept = self.engine().initialize(name, description)?;
        let meta = ProjectMeta {
            id: id.clone(),
            name: name.to_string(),
            seed,
            corpus: corpus.to_string(),
            concept,
            selected_strategy: None,
            train_config: TrainConfig { seed, ..Default::default() },
            active_model: None,
        };
        let project = Project::new(meta);
        let mut store = ProjectStore::open(&dir)?;
        store.inject_crash(*self.crash.lock().expect("crash lock"));
        store.commit("create_project", project.changed_files(None))?;
        Ok(json!({ "project": id, "concept": project.meta.concept }))
    }

    fn get_project(&self, id: &str) -> Result<Value, ServiceError> {
        let p = self.load_project(id)?;
        let positives = p.validation.values().filter(|&&v| v).count();
        Ok(json!({
            "meta": p.meta,
            "validation": { "total": p.validation.len(), "positive": positives, "negative": p.validation.len() - positives },
            "labels": p.labels.len(),
            "candidates": p.mining.as_ref().map_or(0, |m| m.candidate_ids.len()),
            "annotations": p.annotations.len(),
            "rounds": p.rounds.len(),
            "models": p.model_history.len(),
        }))
    }

    fn set_description(&self, id: &str, text: &str) -> Result<Value, ServiceError> {
        let engine = self.engine();
        self.mutate(id, "set_description", |p| {
            p.meta.concept = engine.initialize(&p.meta.name, Some(text))?;
            Ok(to_value(&p.meta.concept))
        })
    }

    fn run_mining(&self, id: &str, k: usize, rounds: usize) -> Result<Value, ServiceError> {
        let engine = self.engine();
        self.mutate(id, "run_mining", |p| {
            let corpus = self.corpus(&p.meta.corpus)?;
            let run = mine(&engine, &self.gateway.embedder, &corpus, &p.meta.concept, k, rounds)?;
            let out = json!({
                "candidates": run.candidate_ids.len(),
                "queries": run.queries.len(),
                "warnings": run.warnings,
                "stats": run.stats_table(),
            });
            p.mining = Some(run);
            Ok(out)
        })
    }

    /// Mined candidates not yet labeled anywhere, in a seeded order.
    fn validation_queue(&self, id: &str, n: usize) -> Result<Value, ServiceError> {
        let p = self.load_project(id)?;
        let mining = p.mining.as_ref().ok_or_else(|| ServiceError::precondition("run mining first"))?;
        let mut ids: Vec<&String> = mining
            .candidate_ids
            .iter()
            .filter(|i| !p.validation.contains_key(*i) && !p.labels.contains_key(*i))
            .collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(p.meta.seed));
        ids.truncate(n);
        let corpus = self.corpus(&p.meta.corpus)?;
        let items: Vec<Value> =
            ids.iter().map(|i| json!({ "image_id": i, "uri": corpus.get(i).map(|r| r.uri.clone()) })).collect();
        Ok(json!({ "queue": items }))
    }

    fn submit_validation_labels(&self, id: &str, labels: Vec<ValidationLabel>) -> Result<Value, ServiceError> {
        if labels.is_empty() {
            return Err(ServiceError::invalid("no labels submitted"));
        }
        self.mutate(id, "submit_validation_labels", |p| {
            let corpus = self.corpus(&p.meta.corpus)?;
            let unknown: Vec<&str> =
                labels.iter().filter(|l| !corpus.contains(&l.image_id)).map(|l| l.image_id.as_str()).collect();
            if !unknown.is_empty() {
                return Err(ServiceError::not_found(format!("unknown image ids: {}", unknown.join(", "))));
            }
            let taken: Vec<&str> =
                labels.iter().filter(|l| p.labels.contains_key(&l.image_id)).map(|l| l.image_id.as_str()).collect();
            if !taken.is_empty() {
                return Err(ServiceError::new(
                    ErrorCode::Conflict,
                    format!("ids already in the training pool: {}", taken.join(", ")),
                ));
            }
            for l in labels {
                p.validation.insert(l.image_id, l.positive);
            }
            let positive = p.validation.values().filter(|&&v| v).count();
            Ok(json!({ "total": p.validation.len(), "positive": positive, "negative": p.validation.len() - positive }))
        })
    }

    fn require_validation_classes(p: &Project, step: &str) -> Result<(), ServiceError> {
        let pos = p.validation.values().any(|&v| v);
        let neg = p.validation.values().any(|&v| !v);
        if !(pos && neg) {
            return Err(ServiceError::precondition(format!(
                "submit validation labels first: {step} needs at least one positive and one negative validation label"
            )));
        }
        Ok(())
    }

    fn run_strategy_selection(&self, id: &str) -> Result<Value, ServiceError> {
        let annotator = self.annotator();
        self.mutate(id, "run_strategy_selection", |p| {
            Self::require_validation_classes(p, "strategy selection")?;
            let corpus = self.corpus(&p.meta.corpus)?;
            let validation: Vec<_> =
                p.validation.iter().map(|(i, &l)| (corpus.get(i).expect("validated id").clone(), l)).collect();
            let table = StrategyTable::default();
            let strategies: Vec<_> = (0..table.strategies.len()).map(|i| table.get(i).expect("registered")).collect();
            let selection = select_strategy(&annotator, &p.meta.concept, &validation, &strategies)?;
            let out = json!({ "selected": selection.selected, "scores": selection.scores, "table": selection.table() });
            p.meta.selected_strategy = Some(selection.selected.clone());
            p.strategy = Some(selection);
            Ok(out)
        })
    }

    fn run_teacher_annotation(&self, id: &str, n: usize) -> Result<Value, ServiceError> {
        if n == 0 {
            return Err(ServiceError::invalid("n must be positive"));
        }
        let annotator = self.annotator();
        self.mutate(id, "run_teacher_annotation", |p| {
            let mining = p.mining.as_ref().ok_or_else(|| ServiceError::precondition("run mining first"))?;
            let config = p
                .meta
                .selected_strategy
                .clone()
                .ok_or_else(|| ServiceError::precondition("run strategy selection first"))?;
            let attempted: BTreeSet<&str> = p.annotations.iter().map(|o| o.image_id()).collect();
            let corpus = self.corpus(&p.meta.corpus)?;
            let images: Vec<_> = mining
                .candidate_ids
                .iter()
                .filter(|i| {
                    !p.validation.contains_key(*i) && !p.labels.contains_key(*i) && !attempted.contains(i.as_str())
                })
                .take(n)
                .map(|i| corpus.get(i).expect("mined from corpus").clone())
                .collect();
            if images.is_empty() {
                return Err(ServiceError::precondition("no unannotated candidates left; run mining with a larger k"));
            }
            let outcomes = annotator.annotate_batch(&images, &p.meta.concept, &config)?;
            let (mut positive, mut negative, mut failed) = (0, 0, 0);
            let mut rationales = Vec::new();
            for o in &outcomes {
                match o {
                    AnnotationOutcome::Ok(r) => {
                        let label = Label::from_bool(r.decision.is_positive());
                        if label.is_positive() {
                            positive += 1;
                        } else {
                            negative += 1;
                        }
                        p.labels.insert(
                            r.image_id.clone(),
                            PoolLabel { image_id: r.image_id.clone(), label, source: LabelSource::Annotator },
                        );
                        rationales.push(json!({ "image_id": r.image_id, "decision": r.decision, "reasons": r.reasons }));
                    }
                    AnnotationOutcome::Failed { .. } => failed += 1,
                }
            }
            p.annotations.extend(outcomes);
            Ok(json!({
                "annotated": images.len(),
                "positive": positive,
                "negative": negative,
                "failed": failed,
                "strategy_index": config.strategy_index,
                "rationales": rationales,
            }))
        })
    }

    fn get_annotations(&self, id: &str, offset: usize, limit: usize) -> Result<Value, ServiceError> {
        let p = self.load_project(id)?;
        let page: Vec<&AnnotationOutcome> = p.annotations.iter().skip(offset).take(limit).collect();
        Ok(json!({ "total": p.annotations.len(), "offset": offset, "items": page }))
    }

    fn al_state(p: &Project, corpus: &CorpusIndex) -> Result<AlState, ServiceError> {
        let examples: Vec<LabeledExample> = p
            .labels
            .values()
            .map(|l| example_from_corpus(corpus, &l.image_id, l.label, l.source))
            .collect::<Result<_, _>>()?;
        let mut state = AlState::new(examples, p.validation.clone());
        state.model = p.active_model().cloned();
        state.rounds = p.rounds.clone();
        Ok(state)
    }

    fn adopt(p: &mut Project, state: AlState, train_size: usize) {
        let mut model = state.model.expect("round produced a model");
        let record = state.rounds.last().expect("round recorded").clone();
        let provenance = model.provenance.take();
        p.labels = state
            .labeled
            .into_values()
            .map(|e| (e.image_id.clone(), PoolLabel { image_id: e.image_id, label: e.label, source: e.source }))
            .collect();
        if !p.models.contains_key(&record.model_ref) || p.meta.active_model.as_deref() != Some(&record.model_ref) {
            p.model_history.push(ModelRecord { model_ref: record.model_ref.clone(), train_size, provenance });
        }
        p.models.insert(record.model_ref.clone(), model);
        p.meta.active_model = Some(record.model_ref);
        p.rounds = state.rounds;
    }

    fn train_student(&self, id: &str, config: Option<TrainConfig>) -> Result<Value, ServiceError> {
        self.mutate(id, "train_student", |p| {
            if p.labels.is_empty() {
                return Err(ServiceError::precondition("run teacher annotation first: the training pool is empty"));
            }
            Self::require_validation_classes(p, "student evaluation")?;
            if let Some(c) = config {
                c.validate()?;
                p.meta.train_config = c;
            }
            let corpus = self.corpus(&p.meta.corpus)?;
            let state = Self::al_state(p, &corpus)?;
            let (next, record) = state.bootstrap(&corpus, &p.meta.train_config)?;
            let train_size = next.labeled.len();
            Self::adopt(p, next, train_size);
            Ok(json!({ "model_ref": record.model_ref, "metrics": record.metrics, "train_size": train_size }))
        })
    }

    fn run_al_round(&self, id: &str, sampler: Sampler, n: usize, strata: usize) -> Result<Value, ServiceError> {
        if strata == 0 {
            return Err(ServiceError::invalid("strata must be positive"));
        }
        let annotator = self.annotator();
        self.mutate(id, "run_al_round", |p| {
            if p.active_model().is_none() {
                return Err(ServiceError::precondition("train the student first"));
            }
            let config = p
                .meta
                .selected_strategy
                .clone()
                .ok_or_else(|| ServiceError::precondition("run strategy selection first"))?;
            let corpus = self.corpus(&p.meta.corpus)?;
            let state = Self::al_state(p, &corpus)?;
            let ctx = RoundContext {
                corpus: &corpus,
                annotator: &annotator,
                concept: &p.meta.concept,
                annotator_config: &config,
                train_config: &p.meta.train_config,
                sampler,
                n,
                strata,
                seed: p.meta.seed,
            };
            let (next, record) = state.run_round(&ctx)?;
            let train_size = next.labeled.len();
            Self::adopt(p, next, train_size);
            Ok(to_value(&record))
        })
    }

    fn get_metrics(&self, id: &str) -> Result<Value, ServiceError> {
        let p = self.load_project(id)?;
        Ok(json!({
            "rounds": p.rounds,
            "rounds_table": rounds_table(&p.rounds),
            "strategy": p.strategy,
            "strategy_table": p.strategy.as_ref().map(|s| s.table()),
            "models": p.model_history,
            "active_model": p.meta.active_model,
        }))
    }

    fn export_model(&self, id: &str) -> Result<Value, ServiceError> {
        let p = self.load_project(id)?;
        let model = p.active_model().ok_or_else(|| ServiceError::precondition("train the student first"))?;
        Ok(json!({ "model_ref": p.meta.active_model, "model_hex": hex::encode(model_bytes(model)) }))
    }

    fn import_model(&self, id: &str, model_hex: &str) -> Result<Value, ServiceError> {
        let bytes = hex::decode(model_hex.trim()).map_err(|e| ServiceError::invalid(format!("model_hex: {e}")))?;
        let model = model_from_bytes(&bytes)?;
        self.mutate(id, "import_model", |p| {
            let corpus = self.corpus(&p.meta.corpus)?;
            if model.input_dim != corpus.dim() {
                return Err(ServiceError::invalid(format!(
                    "model input dim {} does not match corpus dim {}",
                    model.input_dim,
                    corpus.dim()
                )));
            }
            let model_ref = crate::active_learning::model_ref(&model);
            p.model_history.push(ModelRecord { model_ref: model_ref.clone(), train_size: 0, provenance: None });
            p.models.insert(model_ref.clone(), model);
            p.meta.active_model = Some(model_ref.clone());
            Ok(json!({ "model_ref": model_ref }))
        })
    }
}

fn route_request(method: &str, path: &str, body: &str) -> Result<Request, ServiceError> {
    let (path, query) = path.split_once('?').unwrap_or((path, ""));
    let segments: Vec<&str> = path.trim_matches('/').split('/').filter(|s| !s.is_empty()).collect();
    let mut doc = if body.trim().is_empty() {
        serde_json::Map::new()
    } else {
        match serde_json::from_str::<Value>(body) {
            Ok(Value::Object(m)) => m,
            Ok(_) => return Err(ServiceError::invalid("request body must be a JSON object")),
            Err(e) => return Err(ServiceError::invalid(format!("request body: {e}"))),
        }
    };
    for pair in query.split('&').filter(|p| !p.is_empty()) {
        let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
        let value = v.parse::<u64>().map(Value::from).unwrap_or_else(|_| Value::from(v));
        doc.insert(k.to_string(), value);
    }
    let op = match (method, segments.as_slice()) {
        ("POST", ["corpora"]) => "ingest_corpus",
        ("GET", ["projects"]) => "list_projects",
        ("POST", ["projects"]) => "create_project",
        (m, ["projects", id, rest @ ..]) => {
            doc.insert("project".into(), Value::from(*id));
            match (m, rest) {
                ("GET", []) => "get_project",
                ("PUT", ["description"]) => "set_description",
                ("POST", ["mining"]) => "run_mining",
                ("GET", ["validation-queue"]) => "validation_queue",
                ("POST", ["validation-labels"]) => "submit_validation_labels",
                ("POST", ["strategy-selection"]) => "run_strategy_selection",
                ("POST", ["annotations"]) => "run_teacher_annotation",
                ("GET", ["annotations"]) => "get_annotations",
                ("POST", ["train"]) => "train_student",
                ("POST", ["al-rounds"]) => "run_al_round",
                ("GET", ["metrics"]) => "get_metrics",
                ("GET", ["model"]) => "export_model",
                ("PUT", ["model"]) => "import_model",
                _ => return Err(ServiceError::not_found(format!("no route for {method} {path}"))),
            }
        }
        _ => return Err(ServiceError::not_found(format!("no route for {method} {path}"))),
    };
    doc.insert("op".into(), Value::from(op));
    serde_json::from_value(Value::Object(doc)).map_err(|e| ServiceError::invalid(format!("{op}: {e}")))
}

