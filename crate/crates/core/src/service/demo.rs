//! End-to-end run on a synthetic corpus with mock backends. The simulated
//! user answers validation requests from the world's ground truth.
//!
//! The run resumes from whatever the project store holds, so a run stopped
//! by an injected crash can be finished by calling [`run_demo`] again.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::config::{BackendsConfig, ServiceConfig, ServiceConfigError};
use super::{Api, CrashPoint, Project, ProjectStore, Request, ServiceError, ValidationLabel};
use crate::active_learning::{rounds_table, Sampler, DEFAULT_STRATA};
use crate::concept::PromptTemplates;
use crate::corpus::canonical_body;
use crate::evaluation::{
    evaluate_scores, report_table, vqa_prompt_classify, zero_shot_scores, EvalError, ReportRow, ZeroShotMode,
};
use crate::gateway::mock::write_fixture_file;
use crate::synth::{SynthConcept, SynthError, SynthWorld, WorldSpec};

pub const DEMO_CORPUS: &str = "synthetic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoOptions {
    pub seed: u64,
    pub records: usize,
    pub per_query_k: usize,
    pub validation: usize,
    pub annotate: usize,
    pub rounds: usize,
    pub round_n: usize,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self { seed: 0, records: 2000, per_query_k: 60, validation: 100, annotate: 300, rounds: 3, round_n: 100 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Config(#[from] ServiceConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub project: String,
    pub seed: u64,
    /// Named tab-separated tables in display order.
    pub tables: Vec<(String, String)>,
    pub rows: Vec<ReportRow>,
    /// SHA-256 over the journal and every project file.
    pub state_digest: String,
}

impl DemoReport {
    pub fn render(&self) -> String {
        let mut out = format!("project {} seed {}\n", self.project, self.seed);
        for (name, table) in &self.tables {
            out.push_str(&format!("\n== {name}\n{table}"));
        }
        out.push_str(&format!("\nstate {}\n", self.state_digest));
        out
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DemoError + '_ {
    move |source| DemoError::Io { path: path.to_path_buf(), source }
}

/// Runs (or resumes) the demo under `home`. `crash` interrupts the matching
/// project commit.
pub fn run_demo(home: &Path, opts: &DemoOptions, crash: Option<CrashPoint>) -> Result<DemoReport, DemoError> {
    let concept = SynthConcept::stop_sign();
    let world = SynthWorld::generate(concept, WorldSpec { records: opts.records, ..Default::default() }, opts.seed)?;
    let templates = PromptTemplates::default();

    let input = home.join("input");
    let fixtures = home.join("fixtures");
    for dir in [&input, &fixtures] {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let corpus_file = input.join(format!("{DEMO_CORPUS}.tsv"));
    std::fs::write(&corpus_file, canonical_body(world.corpus.dim(), world.corpus.records())).map_err(io(&corpus_file))?;
    let fixture_file = fixtures.join("concept.jsonl");
    write_fixture_file(&fixture_file, &world.concept.script_entries(&templates)).map_err(io(&fixture_file))?;

    let config = ServiceConfig {
        home: Some(home.to_path_buf()),
        backends: BackendsConfig {
            mock_seed: opts.seed,
            dim: world.corpus.dim(),
            fixtures_dir: Some(fixtures),
            ..Default::default()
        },
    };
    let api = Api::new(config.home()?, config.gateway()?).with_templates(templates);
    api.inject_crash(crash);
    let call = |r: Request| -> Result<Value, ServiceError> { api.handle(r).into_result() };

    call(Request::IngestCorpus { name: DEMO_CORPUS.into(), path: corpus_file })?;
    let id = crate::text::slug(&world.concept.name);
    if !api.project_dir(&id).join(super::project::META_FILE).exists() {
        call(Request::CreateProject {
            name: world.concept.name.clone(),
            description: None,
            corpus: DEMO_CORPUS.into(),
            seed: opts.seed,
        })?;
    }
    let project = || api.load_project(&id);
    if project()?.mining.is_none() {
        call(Request::RunMining { project: id.clone(), per_query_k: opts.per_query_k, mutation_rounds: 1 })?;
    }
    if project()?.validation.is_empty() {
        let queue = call(Request::ValidationQueue { project: id.clone(), n: opts.validation })?;
        let labels = queue["queue"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|item| item["image_id"].as_str())
            .map(|i| ValidationLabel { image_id: i.to_string(), positive: world.truth[i] })
            .collect();
        call(Request::SubmitValidationLabels { project: id.clone(), labels })?;
    }
    if project()?.strategy.is_none() {
        call(Request::RunStrategySelection { project: id.clone() })?;
    }
    if project()?.annotations.is_empty() {
        call(Request::RunTeacherAnnotation { project: id.clone(), n: opts.annotate })?;
    }
    if project()?.meta.active_model.is_none() {
        call(Request::TrainStudent { project: id.clone(), config: None })?;
    }
    while project()?.rounds.iter().filter(|r| r.sampler.is_some()).count() < opts.rounds {
        call(Request::RunAlRound {
            project: id.clone(),
            sampler: Sampler::Stratified,
            n: opts.round_n,
            strata: DEFAULT_STRATA,
        })?;
    }

    let p = project()?;
    let rows = baseline_rows(&api, &p)?;
    let mut tables = Vec::new();
    if let Some(m) = &p.mining {
        tables.push(("mining".to_string(), m.stats_table()));
    }
    if let Some(s) = &p.strategy {
        tables.push(("strategy selection".to_string(), s.table()));
    }
    tables.push(("active learning".to_string(), rounds_table(&p.rounds)));
    tables.push(("validation comparison".to_string(), report_table(&rows)));
    Ok(DemoReport { project: id.clone(), seed: opts.seed, tables, rows, state_digest: state_digest(&api, &id, &p)? })
}

/// Baselines, teacher and student scored on the project's validation set.
fn baseline_rows(api: &Api, p: &Project) -> Result<Vec<ReportRow>, DemoError> {
    let corpus = api.corpus(&p.meta.corpus)?;
    let images: Vec<_> = p.validation.keys().map(|i| corpus.get(i).expect("validated id").clone()).collect();
    let labels: Vec<bool> = p.validation.values().copied().collect();
    let concept = &p.meta.concept;
    let row = |method: &str, report| ReportRow { concept: concept.name.clone(), method: method.into(), report };
    let mut rows = Vec::new();
    for (method, mode) in [("zero-shot name", ZeroShotMode::Name), ("zero-shot description", ZeroShotMode::GeneratedDescription)] {
        let scores = zero_shot_scores(&api.gateway().embedder, &images, concept, mode)?;
        rows.push(row(method, evaluate_scores(&scores, &labels)?));
    }
    let vqa: Vec<f64> = images
        .iter()
        .map(|img| vqa_prompt_classify(&api.gateway().vqa, img, concept).map(|r| f64::from(u8::from(r.decision.is_positive()))))
        .collect::<Result<_, _>>()?;
    rows.push(row("vqa prompt", evaluate_scores(&vqa, &labels)?));
    if let Some(s) = &p.strategy {
        let best = s.scores.iter().find(|x| x.strategy_index == s.selected.strategy_index).expect("selected is scored");
        rows.push(row("teacher", best.report.clone()));
    }
    if let Some(last) = p.rounds.last() {
        rows.push(row("student", last.metrics.clone()));
    }
    Ok(rows)
}

fn state_digest(api: &Api, id: &str, p: &Project) -> Result<String, DemoError> {
    let store = ProjectStore::open(&api.project_dir(id)).map_err(ServiceError::from)?;
    let mut h = Sha256::new();
    for entry in store.journal().map_err(ServiceError::from)? {
        h.update(serde_json::to_vec(&entry).expect("journal entry serializes"));
    }
    let files: BTreeMap<String, _> = p.files().into_iter().map(|w| (w.path, w.content)).collect();
    for (path, content) in files {
        h.update(path.as_bytes());
        h.update(serde_json::to_vec(&content).expect("content serializes"));
    }
    Ok(hex::encode(h.finalize()))
}
