use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use mc_core::concept::{PromptTemplates, QueryPolarity};
use mc_core::gateway::{Backend, MockEmbedder};
use mc_core::miner::{mine, retrieve, MineError};
use mc_core::synth::{SynthConcept, SynthWorld, WorldSpec};
use mc_core::{ConceptEngine, CorpusIndex, ImageRecord, SearchQuery};

fn record(e: &MockEmbedder, id: &str, attrs: &[&str]) -> ImageRecord {
    ImageRecord {
        id: id.into(),
        uri: format!("mem://{id}"),
        embedding: Some(e.embed_features(attrs.iter().copied())),
        mock_attributes: Some(attrs.iter().map(|s| s.to_string()).collect()),
        metadata: BTreeMap::new(),
    }
}

fn queries(texts: &[&str]) -> Vec<SearchQuery> {
    texts.iter().map(|t| SearchQuery::seed(t, QueryPolarity::Positive)).collect()
}

#[test]
fn disjoint_hits_add_up() {
    let e = MockEmbedder::new(64, 1).unwrap();
    let mut records = Vec::new();
    for i in 0..3 {
        records.push(record(&e, &format!("r{i}"), &["red", &format!("x{i}")]));
        records.push(record(&e, &format!("b{i}"), &["blue", &format!("y{i}")]));
    }
    records.push(record(&e, "z", &["green"]));
    let index = CorpusIndex::from_records("t", 64, records).unwrap();
    let backend = Backend::mock_embedder(e, 2).unwrap();
    let run = retrieve(&backend, &index, "c", queries(&["red", "blue"]), 3, 0, Vec::new()).unwrap();
    assert_eq!(run.candidate_ids.len(), 6);
    assert_eq!(run.stats[0].new_candidates, 3);
    assert_eq!(run.stats[1].new_candidates, 3);
}

#[test]
fn overlapping_hits_are_deduplicated() {
    let e = MockEmbedder::new(64, 2).unwrap();
    let records =
        vec![record(&e, "a", &["p"]), record(&e, "b", &["p", "q"]), record(&e, "c", &["p", "q"]), record(&e, "d", &["q"])];
    let index = CorpusIndex::from_records("t", 64, records).unwrap();
    let backend = Backend::mock_embedder(e, 2).unwrap();
    let run = retrieve(&backend, &index, "c", queries(&["p", "q"]), 3, 0, Vec::new()).unwrap();
    let got: BTreeSet<&str> = run.candidate_ids.iter().map(String::as_str).collect();
    assert_eq!(got, BTreeSet::from(["a", "b", "c", "d"]));
    assert_eq!(run.candidate_ids.len(), 4);
    assert!(matches!(
        retrieve(&backend, &index, "c", queries(&["p"]), 0, 0, Vec::new()),
        Err(MineError::ZeroK)
    ));
}

struct Setup {
    world: SynthWorld,
    engine: ConceptEngine,
    embedder: Backend,
}

fn setup(seed: u64, records: usize) -> Setup {
    let world =
        SynthWorld::generate(SynthConcept::stop_sign(), WorldSpec { records, ..Default::default() }, seed).unwrap();
    let llm = world.concept.llm(&PromptTemplates::default(), seed);
    let engine = ConceptEngine::new(Arc::new(Backend::mock_llm(llm, 4).unwrap()));
    let embedder = Backend::mock_embedder(world.embedder.clone(), 4).unwrap();
    Setup { world, engine, embedder }
}

/// Exhaustive ranking: cosine of every record against the query, sorted by
/// descending score then ascending id.
fn oracle_top_k(e: &MockEmbedder, index: &CorpusIndex, query: &str, k: usize) -> Vec<String> {
    let q = e.embed_text(query);
    let qn = q.values().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, &str)> = index
        .records()
        .iter()
        .map(|r| {
            let v = r.embedding.as_ref().unwrap().values();
            let dot: f64 = v.iter().zip(q.values()).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            let vn = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            (dot / (qn * vn), r.id.as_str())
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().take(k).map(|(_, id)| id.to_string()).collect()
}

#[test]
fn stop_sign_pool_covers_tagged_records() {
    for seed in 0..5 {
        let s = setup(seed, 2000);
        let tagged: BTreeSet<String> = s
            .world
            .corpus
            .records()
            .iter()
            .filter(|r| {
                let a = r.mock_attributes.as_ref().unwrap();
                a.contains("stop_sign") && a.contains("traffic")
            })
            .map(|r| r.id.clone())
            .collect();
        let k = tagged.len();
        let concept = s.world.concept.concept();
        let run = mine(&s.engine, &s.embedder, &s.world.corpus, &concept, k, 1).unwrap();

        let mut oracle = BTreeSet::new();
        for q in &run.queries {
            oracle.extend(oracle_top_k(&s.world.embedder, &s.world.corpus, &q.text, k));
        }
        let pool: BTreeSet<String> = run.candidate_ids.iter().cloned().collect();
        assert_eq!(pool, oracle, "seed {seed}");
        let covered = tagged.iter().filter(|id| pool.contains(*id)).count() as f64 / tagged.len() as f64;
        assert!(covered >= 0.8, "seed {seed}: coverage {covered:.3}");
    }
}

#[test]
fn pool_grows_with_k_and_rounds() {
    let s = setup(9, 600);
    let concept = s.world.concept.concept();
    let pool = |k, rounds| -> BTreeSet<String> {
        mine(&s.engine, &s.embedder, &s.world.corpus, &concept, k, rounds).unwrap().candidate_ids.into_iter().collect()
    };
    let (small, large) = (pool(5, 1), pool(20, 1));
    assert!(small.is_subset(&large));
    let (r0, r1) = (pool(10, 0), pool(10, 1));
    assert!(r0.is_subset(&r1));
    assert!(r1.len() > r0.len());
}

#[test]
fn mining_is_deterministic_and_traceable() {
    let s = setup(4, 500);
    let concept = s.world.concept.concept();
    let a = mine(&s.engine, &s.embedder, &s.world.corpus, &concept, 15, 1).unwrap();
    let b = mine(&s.engine, &s.embedder, &s.world.corpus, &concept, 15, 1).unwrap();
    assert_eq!(a, b);
    let unique: BTreeSet<&String> = a.candidate_ids.iter().collect();
    assert_eq!(unique.len(), a.candidate_ids.len());
    assert_eq!(a.stats.iter().map(|s| s.new_candidates).sum::<usize>(), a.candidate_ids.len());
    assert!(a.queries.iter().any(|q| q.polarity == QueryPolarity::Negative));
    assert!(a.queries.iter().any(|q| !q.lineage.is_empty()));
    assert!(a.stats_table().starts_with("query\tpolarity"));
}
