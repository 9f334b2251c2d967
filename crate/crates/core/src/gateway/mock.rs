//! Deterministic mock backends. For a fixed seed and input every mock
//! returns bit-identical output on every platform: the embedder draws from
//! ChaCha8 seeded by SHA-256 and uses no transcendental functions.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbeddingVector, GatewayError, VqaQuestion};
use crate::corpus::ImageRecord;
use crate::text;

/// Canonical prompt form used for script lookup: CRLF folded to LF,
/// surrounding whitespace trimmed.
fn canonical_prompt(prompt: &str) -> String {
    prompt.replace("\r\n", "\n").trim().to_string()
}

/// Script key of a prompt: hex SHA-256 over the seed (little endian) and the
/// canonical prompt.
pub fn prompt_key(seed: u64, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(canonical_prompt(prompt).as_bytes());
    hex::encode(h.finalize())
}

/// Programmatic fallback for prompts without a script entry.
pub trait Responder: Send + Sync {
    fn respond(&self, prompt: &str) -> Option<String>;
}

/// One line of a fixture file. Either the raw prompt or its precomputed key
/// must be present.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub response: String,
}

#[derive(Clone, Default)]
pub struct MockLlm {
    seed: u64,
    scripts: HashMap<String, String>,
    responders: Vec<Arc<dyn Responder>>,
}

impl MockLlm {
    pub fn new(seed: u64) -> Self {
        Self { seed, ..Default::default() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn script(&mut self, prompt: &str, response: impl Into<String>) -> &mut Self {
        self.scripts.insert(prompt_key(self.seed, prompt), response.into());
        self
    }

    pub fn with_script(mut self, prompt: &str, response: impl Into<String>) -> Self {
        self.script(prompt, response);
        self
    }

    pub fn with_responder(mut self, responder: Arc<dyn Responder>) -> Self {
        self.responders.push(responder);
        self
    }

    pub fn script_count(&self) -> usize {
        self.scripts.len()
    }

    /// Loads every `*.jsonl` file of `dir` (sorted by file name). Later
    /// records override earlier ones with the same key.
    pub fn load_fixtures(&mut self, dir: &Path) -> Result<usize, GatewayError> {
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(|e| GatewayError::Config(format!("fixtures dir {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        let mut loaded = 0;
        for path in files {
            let body = fs::read_to_string(&path)
                .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
            for (lineno, line) in body.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: FixtureRecord = serde_json::from_str(line).map_err(|e| {
                    GatewayError::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
                })?;
                let key = match (rec.key, rec.prompt) {
                    (Some(k), _) => k,
                    (None, Some(p)) => prompt_key(self.seed, &p),
                    (None, None) => {
                        return Err(GatewayError::Config(format!(
                            "{}:{}: record needs `key` or `prompt`",
                            path.display(),
                            lineno + 1
                        )))
                    }
                };
                self.scripts.insert(key, rec.response);
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    pub fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        let key = prompt_key(self.seed, prompt);
        if let Some(r) = self.scripts.get(&key) {
            return Ok(r.clone());
        }
        self.responders
            .iter()
            .find_map(|r| r.respond(prompt))
            .ok_or(GatewayError::NoScript { key })
    }
}

/// Writes `(prompt, response)` pairs as a fixture file.
pub fn write_fixture_file(path: &Path, entries: &[(String, String)]) -> std::io::Result<()> {
    let mut out = String::new();
    for (prompt, response) in entries {
        let rec = FixtureRecord { key: None, prompt: Some(prompt.clone()), response: response.clone() };
        out.push_str(&serde_json::to_string(&rec).expect("fixture record serializes"));
        out.push('\n');
    }
    fs::write(path, out)
}

/// Counts concurrent entries into an instrumented mock.
#[derive(Debug, Default)]
pub struct ConcurrencyProbe {
    current: AtomicUsize,
    peak: AtomicUsize,
    total: AtomicUsize,
}

impl ConcurrencyProbe {
    fn enter(&self) {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.total.fetch_add(1, Ordering::SeqCst);
    }

    fn exit(&self) {
        self.current.fetch_sub(1, Ordering::SeqCst);
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn total(&self) -> usize {
        self.total.load(Ordering::SeqCst)
    }
}

/// Attribute-oracle VQA: "yes" iff the question's bound attribute is in the
/// image's ground-truth attribute set.
#[derive(Debug, Clone, Default)]
pub struct OracleVqa {
    delay: Option<Duration>,
    probe: Option<Arc<ConcurrencyProbe>>,
    fail_on: BTreeSet<String>,
}

impl OracleVqa {
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn with_probe(mut self, probe: Arc<ConcurrencyProbe>) -> Self {
        self.probe = Some(probe);
        self
    }

    /// Makes every question about the listed image ids fail as unreachable.
    pub fn failing_for(mut self, image_ids: impl IntoIterator<Item = String>) -> Self {
        self.fail_on.extend(image_ids);
        self
    }

    pub fn answer(&self, image: &ImageRecord, question: &VqaQuestion) -> Result<String, GatewayError> {
        if let Some(p) = &self.probe {
            p.enter();
        }
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        let result = self.answer_inner(image, question);
        if let Some(p) = &self.probe {
            p.exit();
        }
        result
    }

    fn answer_inner(&self, image: &ImageRecord, question: &VqaQuestion) -> Result<String, GatewayError> {
        if self.fail_on.contains(&image.id) {
            return Err(GatewayError::Unreachable {
                endpoint: "mock://vqa".into(),
                reason: format!("injected failure for {}", image.id),
            });
        }
        let binding = question
            .binding
            .as_deref()
            .filter(|b| !b.is_empty())
            .ok_or_else(|| GatewayError::UnresolvableQuestion { question: question.text.clone() })?;
        let present = image.mock_attributes.as_ref().is_some_and(|set| set.contains(binding));
        Ok(if present { "yes" } else { "no" }.to_string())
    }
}

/// Captioner emitting the canonical serialization of the attribute set.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockCaptioner;

impl MockCaptioner {
    pub fn caption(&self, image: &ImageRecord) -> String {
        match image.mock_attributes.as_ref().filter(|s| !s.is_empty()) {
            Some(set) => {
                format!("attributes: {}", set.iter().map(String::as_str).collect::<Vec<_>>().join(", "))
            }
            None => "attributes: none".to_string(),
        }
    }
}

/// Feature key used for records without attributes.
const EMPTY_FEATURE: &str = "__empty__";

/// Seeded hash projection: an attribute set embeds as the normalized sum of
/// one pseudo-random unit vector per attribute.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self, GatewayError> {
        if dim == 0 {
            return Err(GatewayError::Config("embedder dim must be positive".into()));
        }
        Ok(Self { dim, seed })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Unit vector for one feature key, uniform components in [-1, 1).
    pub fn feature_vector(&self, feature: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(b"feature:");
        h.update(feature.as_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    pub fn embed_features<'a>(&self, features: impl IntoIterator<Item = &'a str>) -> EmbeddingVector {
        let mut keys: BTreeSet<String> =
            features.into_iter().map(text::slug).filter(|k| !k.is_empty()).collect();
        if keys.is_empty() {
            keys.insert(EMPTY_FEATURE.to_string());
        }
        let mut sum = vec![0.0f64; self.dim];
        for key in &keys {
            for (s, x) in sum.iter_mut().zip(self.feature_vector(key)) {
                *s += x;
            }
        }
        let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        let values = sum.iter().map(|x| (x / norm) as f32).collect();
        EmbeddingVector(values)
    }

    /// Text features are the word 1-, 2- and 3-grams of the normalized text,
    /// so "stop sign on road" shares the feature `stop_sign` with records
    /// carrying that attribute.
    pub fn text_features(text: &str) -> Vec<String> {
        let norm = text::normalize(text);
        let words: Vec<&str> = norm.split(' ').filter(|w| !w.is_empty()).collect();
        let mut out = Vec::new();
        for n in 1..=3 {
            for window in words.windows(n) {
                out.push(window.join("_"));
            }
        }
        out
    }

    pub fn embed_text(&self, text: &str) -> EmbeddingVector {
        let features = Self::text_features(text);
        self.embed_features(features.iter().map(String::as_str))
    }

    pub fn embed_image(&self, image: &ImageRecord) -> Result<EmbeddingVector, GatewayError> {
        let attrs = image.mock_attributes.as_ref().ok_or_else(|| {
            GatewayError::InvalidInput(format!(
                "image {} has neither an embedding nor mock attributes",
                image.id
            ))
        })?;
        Ok(self.embed_features(attrs.iter().map(String::as_str)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_lookup_and_determinism() {
        let llm = MockLlm::new(3).with_script("prompt p", "ok");
        assert_eq!(llm.complete("prompt p").unwrap(), "ok");
        assert_eq!(llm.complete("  prompt p\r\n").unwrap(), "ok");
        assert_eq!(llm.complete("prompt p").unwrap(), llm.complete("prompt p").unwrap());
        assert!(matches!(llm.complete("other"), Err(GatewayError::NoScript { .. })));
    }

    #[test]
    fn key_depends_on_seed() {
        assert_ne!(prompt_key(1, "p"), prompt_key(2, "p"));
        assert_eq!(prompt_key(1, "p"), prompt_key(1, "p"));
        let llm = MockLlm::new(4).with_script("p", "ok");
        let other = MockLlm::new(5).with_script("q", "ok");
        assert!(other.complete("p").is_err());
        assert!(llm.complete("p").is_ok());
    }

    #[test]
    fn fixtures_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_file(
            &dir.path().join("a.jsonl"),
            &[("hello".into(), "world".into()), ("x".into(), "y".into())],
        )
        .unwrap();
        let keyed = FixtureRecord { key: Some(prompt_key(9, "keyed")), prompt: None, response: "k".into() };
        fs::write(dir.path().join("b.jsonl"), serde_json::to_string(&keyed).unwrap() + "\n").unwrap();
        let mut llm = MockLlm::new(9);
        assert_eq!(llm.load_fixtures(dir.path()).unwrap(), 3);
        assert_eq!(llm.complete("hello").unwrap(), "world");
        assert_eq!(llm.complete("keyed").unwrap(), "k");
    }

    struct Echo;
    impl Responder for Echo {
        fn respond(&self, prompt: &str) -> Option<String> {
            prompt.starts_with("echo").then(|| prompt.to_uppercase())
        }
    }

    #[test]
    fn responder_fallback_after_scripts() {
        let llm = MockLlm::new(0).with_script("echo a", "scripted").with_responder(Arc::new(Echo));
        assert_eq!(llm.complete("echo a").unwrap(), "scripted");
        assert_eq!(llm.complete("echo b").unwrap(), "ECHO B");
        assert!(llm.complete("nope").is_err());
    }

    #[test]
    fn identical_sets_embed_identically() {
        let e = MockEmbedder::new(64, 11).unwrap();
        let a = e.embed_features(["tuna", "steak"]);
        let b = e.embed_features(["steak", "tuna"]);
        assert!((a.cosine(&b) - 1.0).abs() < 1e-6);
        assert!((a.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn text_features_include_ngrams() {
        let f = MockEmbedder::text_features("Stop sign on road");
        assert!(f.contains(&"stop_sign".to_string()));
        assert!(f.contains(&"stop_sign_on".to_string()));
        assert!(f.contains(&"road".to_string()));
        assert_eq!(f.len(), 4 + 3 + 2);
    }

    /// Monte Carlo over the construction: a superset shares more direction
    /// than a disjoint set.
    #[test]
    fn shared_attributes_beat_disjoint_ones() {
        let e = MockEmbedder::new(64, 2024).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut holds = 0;
        for _ in 0..100 {
            let names: Vec<String> = (0..5).map(|_| format!("attr{}", rng.gen::<u32>())).collect();
            let ab = e.embed_features([names[0].as_str(), names[1].as_str()]);
            let abc = e.embed_features([names[0].as_str(), names[1].as_str(), names[2].as_str()]);
            let de = e.embed_features([names[3].as_str(), names[4].as_str()]);
            if ab.cosine(&abc) > ab.cosine(&de) {
                holds += 1;
            }
        }
        assert!(holds >= 95, "held in {holds} of 100 trials");
    }

    #[test]
    fn feature_vectors_are_seeded() {
        let a = MockEmbedder::new(16, 1).unwrap();
        let b = MockEmbedder::new(16, 2).unwrap();
        assert_eq!(a.feature_vector("x"), a.feature_vector("x"));
        assert_ne!(a.feature_vector("x"), b.feature_vector("x"));
    }
}
