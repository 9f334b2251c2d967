//! Candidate mining: search queries from the concept, optional mutation,
//! text-embedding retrieval and an unlabeled, deduplicated candidate pool.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept::{Concept, ConceptEngine, ConceptError, QueryPolarity, SearchQuery};
use crate::corpus::{dedup_union, CorpusError, CorpusIndex};
use crate::gateway::{Backend, GatewayError};

pub const DEFAULT_PER_QUERY_K: usize = 50;
pub const DEFAULT_MUTATION_ROUNDS: usize = 1;

#[derive(Debug, Error)]
pub enum MineError {
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("embedding query {query:?}: {source}")]
    Embed { query: String, source: GatewayError },
    #[error("per_query_k must be positive")]
    ZeroK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryStats {
    pub query: String,
    pub polarity: QueryPolarity,
    pub hits: usize,
    /// Hits not already contributed by an earlier query.
    pub new_candidates: usize,
}

/// Result of one mining run. Candidates carry no label: query polarity
/// only steers retrieval and the annotator decides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningRun {
    pub concept_id: String,
    pub queries: Vec<SearchQuery>,
    pub per_query_k: usize,
    pub mutation_rounds: usize,
    pub candidate_ids: Vec<String>,
    pub stats: Vec<QueryStats>,
    pub warnings: Vec<String>,
}

impl MiningRun {
    /// Per-query statistics as tab-separated text with a header row.
    pub fn stats_table(&self) -> String {
        let mut out = String::from("query\tpolarity\thits\tnew\n");
        for s in &self.stats {
            let polarity = match s.polarity {
                QueryPolarity::Positive => "positive",
                QueryPolarity::Negative => "negative",
            };
            out.push_str(&format!("{}\t{polarity}\t{}\t{}\n", s.query, s.hits, s.new_candidates));
        }
        out
    }
}

/// Generates the query set: positive and negative queries, then mutation.
pub fn build_queries(
    engine: &ConceptEngine,
    concept: &Concept,
    mutation_rounds: usize,
) -> Result<(Vec<SearchQuery>, Vec<String>), ConceptError> {
    let positive = engine.generate_search_queries(concept, QueryPolarity::Positive)?;
    let negative = engine.generate_search_queries(concept, QueryPolarity::Negative)?;
    let mut warnings = positive.warnings;
    warnings.extend(negative.warnings);
    let mut seeds = positive.items;
    seeds.extend(negative.items);
    if seeds.is_empty() || mutation_rounds == 0 {
        return Ok((seeds, warnings));
    }
    let mutated = engine.mutate_queries(concept, &seeds, mutation_rounds)?;
    warnings.extend(mutated.warnings);
    Ok((mutated.items, warnings))
}

/// Retrieves `per_query_k` neighbours for every query and merges them in
/// query order.
pub fn retrieve(
    embedder: &Backend,
    index: &CorpusIndex,
    concept_id: &str,
    queries: Vec<SearchQuery>,
    per_query_k: usize,
    mutation_rounds: usize,
    mut warnings: Vec<String>,
) -> Result<MiningRun, MineError> {
    if per_query_k == 0 {
        return Err(MineError::ZeroK);
    }
    let hits: Vec<Vec<String>> = queries
        .par_iter()
        .map(|q| {
            let v = embedder
                .embed_text(&q.text)
                .map_err(|source| MineError::Embed { query: q.text.clone(), source })?;
            Ok(index.top_k(&v, per_query_k)?.into_iter().map(|(id, _)| id).collect())
        })
        .collect::<Result<_, MineError>>()?;

    let mut stats = Vec::with_capacity(queries.len());
    let mut seen = std::collections::HashSet::new();
    for (q, ids) in queries.iter().zip(&hits) {
        let new_candidates = ids.iter().filter(|id| seen.insert(id.as_str())).count();
        stats.push(QueryStats { query: q.text.clone(), polarity: q.polarity, hits: ids.len(), new_candidates });
    }
    let candidate_ids = dedup_union(hits);
    if candidate_ids.is_empty() {
        let msg = "mining produced an empty candidate pool".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(MiningRun {
        concept_id: concept_id.to_string(),
        queries,
        per_query_k,
        mutation_rounds,
        candidate_ids,
        stats,
        warnings,
    })
}

pub fn mine(
    engine: &ConceptEngine,
    embedder: &Backend,
    index: &CorpusIndex,
    concept: &Concept,
    per_query_k: usize,
    mutation_rounds: usize,
) -> Result<MiningRun, MineError> {
    if per_query_k == 0 {
        return Err(MineError::ZeroK);
    }
    let (queries, warnings) = build_queries(engine, concept, mutation_rounds)?;
    retrieve(embedder, index, &concept.id, queries, per_query_k, mutation_rounds, warnings)
}
