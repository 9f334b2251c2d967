//! Embedding corpus: ingest from the line-delimited corpus format, exact
//! cosine top-k, and record lookup.
//!
//! Corpus file layout (UTF-8, one record per line, TAB-separated fields; tabs shown as two spaces):
//!
//! ```text
//! #mc-corpus version=1 dim=4
//! img-1  https://example.org/1.jpg  0.1,0.2,0.3,0.4  tuna;steak  source=laion;split=train
//! ```
//!
//! Fields: id, uri, embedding (exactly `dim` comma-separated decimals),
//! optional attributes (`;`-separated identifiers, `-` for none) and optional
//! metadata (`key=value` pairs separated by `;`). Blank lines and lines
//! starting with `#` after the header are ignored.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::EmbeddingVector;

pub const CORPUS_FORMAT_VERSION: u32 = 1;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub uri: String,
    pub embedding: Option<EmbeddingVector>,
    pub mock_attributes: Option<BTreeSet<String>>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub name: String,
    pub dim: usize,
    pub record_count: usize,
    pub source_path: String,
    pub checksum: String,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("line {line}: embedding has {actual} values, corpus dim is {expected}")]
    DimensionMismatch { line: usize, expected: usize, actual: usize },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("query dimension {actual} does not match corpus dim {expected}")]
    QueryDimension { expected: usize, actual: usize },
    #[error("corpus checksum mismatch: manifest {expected}, content {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("k must be positive")]
    ZeroK,
    #[error("query vector has zero norm")]
    ZeroQuery,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

/// Immutable exact-search index over unit-normalized embeddings.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    manifest: CorpusManifest,
    records: Vec<ImageRecord>,
    matrix: Vec<f32>,
    by_id: HashMap<String, usize>,
}

impl CorpusIndex {
    /// Parses and validates a corpus file. Embeddings are L2-normalized.
    pub fn ingest(path: &Path) -> Result<Self, CorpusError> {
        let body = fs::read_to_string(path).map_err(io(path))?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse(&name, &path.display().to_string(), &body)
    }

    pub fn parse(name: &str, source_path: &str, body: &str) -> Result<Self, CorpusError> {
        let mut lines = body.lines().enumerate();
        let (_, header) = lines
            .find(|(_, l)| !l.trim().is_empty())
            .ok_or(CorpusError::Format { line: 1, message: "missing header".into() })?;
        let dim = parse_header(header)?;
        let mut records = Vec::new();
        let mut by_id = HashMap::new();
        for (idx, raw) in lines {
            let line = idx + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let record = parse_record(raw, line, dim)?;
            if by_id.insert(record.id.clone(), records.len()).is_some() {
                return Err(CorpusError::DuplicateId { line, id: record.id });
            }
            records.push(record);
        }
        Ok(Self::assemble(name, source_path, dim, records, by_id))
    }

    /// Builds an index from in-memory records, applying ingest validation.
    pub fn from_records(name: &str, dim: usize, records: Vec<ImageRecord>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::new();
        let mut out = Vec::with_capacity(records.len());
        for (i, mut r) in records.into_iter().enumerate() {
            let line = i + 2;
            validate_id(&r.id, line)?;
            let e = r
                .embedding
                .take()
                .ok_or(CorpusError::Format { line, message: format!("record {} has no embedding", r.id) })?;
            if e.dim() != dim {
                return Err(CorpusError::DimensionMismatch { line, expected: dim, actual: e.dim() });
            }
            r.embedding = Some(e.normalized());
            if by_id.insert(r.id.clone(), out.len()).is_some() {
                return Err(CorpusError::DuplicateId { line, id: r.id });
            }
            out.push(r);
        }
        Ok(Self::assemble(name, "<memory>", dim, out, by_id))
    }

    fn assemble(
        name: &str,
        source_path: &str,
        dim: usize,
        records: Vec<ImageRecord>,
        by_id: HashMap<String, usize>,
    ) -> Self {
        let mut matrix = Vec::with_capacity(records.len() * dim);
        for r in &records {
            matrix.extend_from_slice(r.embedding.as_ref().expect("validated").values());
        }
        let checksum = hex::encode(Sha256::digest(canonical_body(dim, &records).as_bytes()));
        let manifest = CorpusManifest {
            name: name.to_string(),
            dim,
            record_count: records.len(),
            source_path: source_path.to_string(),
            checksum,
        };
        Self { manifest, records, matrix, by_id }
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn embedding(&self, id: &str) -> Option<&[f32]> {
        let d = self.dim();
        self.by_id.get(id).map(|&i| &self.matrix[i * d..(i + 1) * d])
    }

    /// Exact top-k by cosine similarity, descending; ties by ascending id.
    /// Asking for more than the corpus holds returns everything.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<(String, f64)>, CorpusError> {
        if query.dim() != self.dim() {
            return Err(CorpusError::QueryDimension { expected: self.dim(), actual: query.dim() });
        }
        if k == 0 {
            return Err(CorpusError::ZeroK);
        }
        let norm = query.norm();
        if norm == 0.0 {
            return Err(CorpusError::ZeroQuery);
        }
        let d = self.dim();
        let mut scored: Vec<(usize, f64)> = self
            .matrix
            .chunks_exact(d)
            .enumerate()
            .map(|(i, row)| (i, crate::gateway::dot(row, query.values()) / norm))
            .collect();
        let order = |a: &(usize, f64), b: &(usize, f64)| {
            b.1.total_cmp(&a.1).then_with(|| self.records[a.0].id.cmp(&self.records[b.0].id))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored.into_iter().map(|(i, s)| (self.records[i].id.clone(), s)).collect())
    }

    /// Writes the canonical corpus file and manifest into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let corpus = dir.join("corpus.tsv");
        fs::write(&corpus, canonical_body(self.dim(), &self.records)).map_err(io(&corpus))?;
        let manifest = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        fs::write(&manifest, json).map_err(io(&manifest))
    }

    /// Loads a persisted index and verifies its checksum against the manifest.
    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(io(&manifest_path))?;
        let manifest: CorpusManifest = serde_json::from_str(&text)
            .map_err(|e| CorpusError::Format { line: e.line(), message: e.to_string() })?;
        let body_path = dir.join("corpus.tsv");
        let body = fs::read_to_string(&body_path).map_err(io(&body_path))?;
        let mut index = Self::parse(&manifest.name, &manifest.source_path, &body)?;
        if index.manifest.checksum != manifest.checksum {
            return Err(CorpusError::ChecksumMismatch {
                expected: manifest.checksum,
                actual: index.manifest.checksum,
            });
        }
        index.manifest = manifest;
        Ok(index)
    }
}

/// Set union preserving first-seen order.
pub fn dedup_union<I, S>(sets: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: IntoIterator<Item = String>,
{
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for set in sets {
        for id in set {
            if seen.insert(id.clone()) {
                out.push(id);
            }
        }
    }
    out
}

fn parse_header(header: &str) -> Result<usize, CorpusError> {
    let bad = |m: &str| CorpusError::Format { line: 1, message: m.to_string() };
    let mut parts = header.split_whitespace();
    if parts.next() != Some("#mc-corpus") {
        return Err(bad("header must start with `#mc-corpus`"));
    }
    let mut version = None;
    let mut dim = None;
    for p in parts {
        match p.split_once('=') {
            Some(("version", v)) => version = v.parse::<u32>().ok(),
            Some(("dim", v)) => dim = v.parse::<usize>().ok(),
            _ => return Err(bad(&format!("unknown header field {p:?}"))),
        }
    }
    match version {
        Some(CORPUS_FORMAT_VERSION) => {}
        Some(v) => return Err(bad(&format!("unsupported corpus version {v}"))),
        None => return Err(bad("header lacks version")),
    }
    match dim {
        Some(d) if d > 0 => Ok(d),
        _ => Err(bad("header lacks a positive dim")),
    }
}

fn validate_id(id: &str, line: usize) -> Result<(), CorpusError> {
    if id.is_empty() || id.chars().any(|c| c.is_whitespace()) {
        return Err(CorpusError::Format { line, message: format!("invalid id {id:?}") });
    }
    Ok(())
}

fn parse_record(raw: &str, line: usize, dim: usize) -> Result<ImageRecord, CorpusError> {
    let fields: Vec<&str> = raw.split('\t').collect();
    if !(3..=5).contains(&fields.len()) {
        return Err(CorpusError::Format {
            line,
            message: format!("expected 3 to 5 tab-separated fields, found {}", fields.len()),
        });
    }
    let id = fields[0].trim();
    validate_id(id, line)?;
    let values = fields[2]
        .split(',')
        .map(|v| v.trim().parse::<f32>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CorpusError::Format { line, message: format!("bad embedding value: {e}") })?;
    if values.len() != dim {
        return Err(CorpusError::DimensionMismatch { line, expected: dim, actual: values.len() });
    }
    let embedding = EmbeddingVector::new(values)
        .map_err(|e| CorpusError::Format { line, message: e.to_string() })?
        .normalized();
    if (embedding.norm() - 1.0).abs() > NORM_TOLERANCE {
        return Err(CorpusError::Format { line, message: "zero embedding cannot be normalized".into() });
    }
    let mock_attributes = match fields.get(3).map(|s| s.trim()) {
        None | Some("-") => None,
        Some(s) => Some(s.split(';').map(str::trim).filter(|a| !a.is_empty()).map(String::from).collect()),
    };
    let mut metadata = BTreeMap::new();
    if let Some(meta) = fields.get(4).map(|s| s.trim()).filter(|s| !s.is_empty()) {
        for pair in meta.split(';').filter(|p| !p.is_empty()) {
            let (k, v) = pair.split_once('=').ok_or_else(|| CorpusError::Format {
                line,
                message: format!("metadata pair {pair:?} lacks `=`"),
            })?;
            metadata.insert(k.to_string(), v.to_string());
        }
    }
    Ok(ImageRecord {
        id: id.to_string(),
        uri: fields[1].trim().to_string(),
        embedding: Some(embedding),
        mock_attributes,
        metadata,
    })
}

/// Serializes records in the canonical corpus form (normalized embeddings in
/// shortest round-trip notation, sorted attributes and metadata).
pub fn canonical_body(dim: usize, records: &[ImageRecord]) -> String {
    let mut out = format!("#mc-corpus version={CORPUS_FORMAT_VERSION} dim={dim}\n");
    for r in records {
        out.push_str(&canonical_line(r));
        out.push('\n');
    }
    out
}

fn canonical_line(r: &ImageRecord) -> String {
    let emb = r
        .embedding
        .as_ref()
        .map(|e| e.values().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
        .unwrap_or_default();
    let attrs = match &r.mock_attributes {
        None => "-".to_string(),
        Some(set) => set.iter().map(String::as_str).collect::<Vec<_>>().join(";"),
    };
    let meta = r.metadata.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
    format!("{}\t{}\t{}\t{}\t{}", r.id, r.uri, emb, attrs, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SMALL: &str = "#mc-corpus version=1 dim=4\n\
        a\tu://a\t1,0,0,0\ttuna;steak\n\
        b\tu://b\t0,2,0,0\t-\tsrc=x\n\
        c\tu://c\t0,0,1,1\n";

    fn vec(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn ingest_small_file() {
        let idx = CorpusIndex::parse("small", "mem", SMALL).unwrap();
        assert_eq!(idx.manifest().record_count, 3);
        assert_eq!(idx.dim(), 4);
        let b = idx.get("b").unwrap();
        assert_eq!(b.embedding.as_ref().unwrap().values(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.metadata.get("src").map(String::as_str), Some("x"));
        assert!(b.mock_attributes.is_none());
        assert_eq!(idx.get("a").unwrap().mock_attributes.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn dimension_mismatch_reports_line() {
        let body = "#mc-corpus version=1 dim=4\na\tu\t1,0,0,0\nb\tu\t1,0,0,0,0\n";
        match CorpusIndex::parse("x", "mem", body) {
            Err(CorpusError::DimensionMismatch { line: 3, expected: 4, actual: 5 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let body = "#mc-corpus version=1 dim=2\na\tu\t1,0\na\tu\t0,1\n";
        assert!(matches!(
            CorpusIndex::parse("x", "mem", body),
            Err(CorpusError::DuplicateId { line: 3, .. })
        ));
    }

    #[test]
    fn format_errors() {
        assert!(matches!(CorpusIndex::parse("x", "m", "dim=2\n"), Err(CorpusError::Format { line: 1, .. })));
        assert!(matches!(
            CorpusIndex::parse("x", "m", "#mc-corpus version=2 dim=2\n"),
            Err(CorpusError::Format { .. })
        ));
        assert!(matches!(
            CorpusIndex::parse("x", "m", "#mc-corpus version=1 dim=2\na\tu\t1,zz\n"),
            Err(CorpusError::Format { line: 2, .. })
        ));
        assert!(matches!(
            CorpusIndex::parse("x", "m", "#mc-corpus version=1 dim=2\na\tu\t0,0\n"),
            Err(CorpusError::Format { line: 2, .. })
        ));
    }

    #[test]
    fn self_similarity_first() {
        let idx = CorpusIndex::parse("small", "mem", SMALL).unwrap();
        let hits = idx.top_k(&vec(&[0.0, 0.0, 1.0, 1.0]), 2).unwrap();
        assert_eq!(hits[0].0, "c");
        assert!((hits[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_query_scores_zero_and_ties_by_id() {
        let body = "#mc-corpus version=1 dim=3\nz\tu\t1,0,0\ny\tu\t0,1,0\n";
        let idx = CorpusIndex::parse("o", "mem", body).unwrap();
        let hits = idx.top_k(&vec(&[0.0, 0.0, 1.0]), 5).unwrap();
        assert_eq!(hits.len(), 2);
        assert!(hits.iter().all(|(_, s)| s.abs() < 1e-6));
        assert_eq!(hits[0].0, "y");
    }

    #[test]
    fn five_fixed_vectors_match_brute_force() {
        let body = "#mc-corpus version=1 dim=3\n\
            v1\tu\t1,0,0\nv2\tu\t0.8,0.6,0\nv3\tu\t0,1,0\nv4\tu\t0.6,0,0.8\nv5\tu\t-1,0,0\n";
        let idx = CorpusIndex::parse("f", "mem", body).unwrap();
        let q = vec(&[1.0, 1.0, 0.0]);
        // brute force: cos(q, v) for all five, computed by hand with |q| = sqrt 2
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let mut expected = vec![
            ("v1", s),
            ("v2", 1.4 * s),
            ("v3", s),
            ("v4", 0.6 * s),
            ("v5", -s),
        ];
        expected.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
        let hits = idx.top_k(&q, 3).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.0.as_str()).collect();
        assert_eq!(ids, vec!["v2", "v1", "v3"]);
        for (h, e) in hits.iter().zip(&expected) {
            assert_eq!(h.0, e.0);
            assert!((h.1 - e.1).abs() < 1e-6);
        }
    }

    #[test]
    fn query_dimension_checked() {
        let idx = CorpusIndex::parse("small", "mem", SMALL).unwrap();
        assert!(matches!(idx.top_k(&vec(&[1.0]), 1), Err(CorpusError::QueryDimension { .. })));
        assert!(matches!(idx.top_k(&vec(&[1.0, 0.0, 0.0, 0.0]), 0), Err(CorpusError::ZeroK)));
    }

    #[test]
    fn dedup_union_examples() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(dedup_union(vec![s(&["a", "b"]), s(&["b", "c"])]), s(&["a", "b", "c"]));
        assert!(dedup_union(Vec::<Vec<String>>::new()).is_empty());
        assert_eq!(dedup_union(vec![s(&["a"]), s(&["a"]), s(&["a"])]), s(&["a"]));
    }

    #[test]
    fn persist_load_and_idempotent_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("small.tsv");
        fs::write(&file, SMALL).unwrap();
        let a = CorpusIndex::ingest(&file).unwrap();
        let b = CorpusIndex::ingest(&file).unwrap();
        assert_eq!(a.manifest(), b.manifest());
        a.persist(&dir.path().join("store")).unwrap();
        let loaded = CorpusIndex::load(&dir.path().join("store")).unwrap();
        assert_eq!(loaded.manifest(), a.manifest());
        assert_eq!(loaded.records(), a.records());

        let tampered = dir.path().join("store/corpus.tsv");
        let body = fs::read_to_string(&tampered).unwrap().replace("u://a", "u://A");
        fs::write(&tampered, body).unwrap();
        assert!(matches!(
            CorpusIndex::load(&dir.path().join("store")),
            Err(CorpusError::ChecksumMismatch { .. })
        ));
    }

    fn corpus_strategy() -> impl Strategy<Value = (usize, Vec<Vec<f32>>, Vec<f32>)> {
        (1usize..6).prop_flat_map(|dim| {
            (
                Just(dim),
                prop::collection::vec(prop::collection::vec(-1.0f32..1.0, dim), 1..200),
                prop::collection::vec(-1.0f32..1.0, dim),
            )
        })
    }

    fn build(dim: usize, rows: &[Vec<f32>]) -> Option<CorpusIndex> {
        let records = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.iter().any(|v| *v != 0.0))
            .map(|(i, r)| ImageRecord {
                id: format!("r{i:03}"),
                uri: String::new(),
                embedding: Some(vec(r)),
                mock_attributes: None,
                metadata: BTreeMap::new(),
            })
            .collect::<Vec<_>>();
        if records.is_empty() {
            return None;
        }
        Some(CorpusIndex::from_records("p", dim, records).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn top_k_equals_full_sort((dim, rows, q) in corpus_strategy(), k in 1usize..250) {
            prop_assume!(q.iter().any(|v| *v != 0.0));
            let Some(idx) = build(dim, &rows) else { return Ok(()) };
            let query = vec(&q);
            let mut naive: Vec<(String, f64)> = idx
                .records()
                .iter()
                .map(|r| (r.id.clone(), r.embedding.as_ref().unwrap().dot(&query) / query.norm()))
                .collect();
            naive.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            naive.truncate(k);
            prop_assert_eq!(idx.top_k(&query, k).unwrap(), naive);
        }

        #[test]
        fn ranking_invariant_under_query_scaling((dim, rows, q) in corpus_strategy(), exp in -10i32..10) {
            prop_assume!(q.iter().any(|v| *v != 0.0));
            // power-of-two factors scale exactly, so only the ordering is under test
            let c = 2f32.powi(exp);
            let Some(idx) = build(dim, &rows) else { return Ok(()) };
            let scaled: Vec<f32> = q.iter().map(|v| v * c).collect();
            let a: Vec<String> = idx.top_k(&vec(&q), 10).unwrap().into_iter().map(|h| h.0).collect();
            let b: Vec<String> = idx.top_k(&vec(&scaled), 10).unwrap().into_iter().map(|h| h.0).collect();
            prop_assert_eq!(a, b);
        }
    }
}
