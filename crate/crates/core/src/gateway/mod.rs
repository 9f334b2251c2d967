//! Uniform access to the foundation-model roles (text LLM, VQA, captioner,
//! embedder). Every backend is either a remote service speaking the framed
//! wire protocol in [`wire`] or a deterministic mock from [`mock`].
//!
//! A [`Backend`] is an immutable, shareable handle. Calls check the role
//! before touching the engine, and the number of calls in flight per
//! backend never exceeds the descriptor's `max_parallel`.

mod limiter;
pub mod mock;
pub mod remote;
pub mod wire;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ImageRecord;

pub use limiter::Limiter;
pub use mock::{
    prompt_key, ConcurrencyProbe, MockCaptioner, MockEmbedder, MockLlm, OracleVqa, Responder,
};
pub use remote::RemoteClient;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Llm,
    Vqa,
    Captioner,
    Embedder,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Llm => "llm",
            Role::Vqa => "vqa",
            Role::Captioner => "captioner",
            Role::Embedder => "embedder",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub role: Role,
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub mock_seed: u64,
    pub max_parallel: usize,
}

impl BackendDescriptor {
    pub fn mock(role: Role, mock_seed: u64, max_parallel: usize) -> Self {
        Self { role, kind: BackendKind::Mock, endpoint: None, mock_seed, max_parallel }
    }

    pub fn remote(role: Role, endpoint: impl Into<String>, max_parallel: usize) -> Self {
        Self {
            role,
            kind: BackendKind::Remote,
            endpoint: Some(endpoint.into()),
            mock_seed: 0,
            max_parallel,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_parallel == 0 {
            return Err(GatewayError::Config(format!("{}: max_parallel must be >= 1", self.role)));
        }
        if self.kind == BackendKind::Remote
            && self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty())
        {
            return Err(GatewayError::Config(format!(
                "{}: remote backend requires a non-empty endpoint",
                self.role
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("backend unreachable at {endpoint}: {reason}")]
    Unreachable { endpoint: String, reason: String },
    #[error("no mock script for prompt (key {key})")]
    NoScript { key: String },
    #[error("cannot resolve question {question:?} to an attribute identifier")]
    UnresolvableQuestion { question: String },
    #[error("operation {operation} requires a {expected} backend, got {actual}")]
    WrongRole { operation: &'static str, expected: Role, actual: Role },
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("remote backend error: {0}")]
    Remote(String),
    #[error("wire protocol error: {0}")]
    Protocol(String),
    #[error("backend configuration error: {0}")]
    Config(String),
}

/// A unit-normalized feature vector. All vectors in one project share `dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Builds a vector after checking every component is finite. The
    /// values are kept as given; call [`normalized`](Self::normalized) to
    /// project onto the unit sphere.
    pub fn new(values: Vec<f32>) -> Result<Self, GatewayError> {
        if values.is_empty() {
            return Err(GatewayError::InvalidInput("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GatewayError::InvalidInput("embedding has non-finite values".into()));
        }
        Ok(Self(values))
    }

    /// L2-normalizes in f64 and rounds back to f32. A zero vector stays zero.
    pub fn normalized(&self) -> Self {
        let norm = self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return self.clone();
        }
        Self(self.0.iter().map(|&v| (f64::from(v) / norm) as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }

    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            self.dot(other) / denom
        }
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// A question for the VQA role. `binding` carries the attribute identifier
/// the question was generated for; the oracle mock answers from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaQuestion {
    pub text: String,
    pub binding: Option<String>,
}

impl VqaQuestion {
    pub fn bound(text: impl Into<String>, attribute_id: impl Into<String>) -> Self {
        Self { text: text.into(), binding: Some(attribute_id.into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaExchange {
    pub question: String,
    pub answer: String,
}

enum Engine {
    Remote(RemoteClient),
    Llm(MockLlm),
    Vqa(OracleVqa),
    Captioner(MockCaptioner),
    Embedder(MockEmbedder),
}

impl Engine {
    fn role(&self) -> Option<Role> {
        match self {
            Engine::Remote(_) => None,
            Engine::Llm(_) => Some(Role::Llm),
            Engine::Vqa(_) => Some(Role::Vqa),
            Engine::Captioner(_) => Some(Role::Captioner),
            Engine::Embedder(_) => Some(Role::Embedder),
        }
    }
}

/// One configured backend: descriptor, engine and in-flight limiter.
pub struct Backend {
    descriptor: BackendDescriptor,
    engine: Engine,
    limiter: Limiter,
    /// Embedding dimension the embedder role must produce, when known.
    dim: Option<usize>,
}

impl fmt::Debug for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backend").field("descriptor", &self.descriptor).finish_non_exhaustive()
    }
}

impl Backend {
    fn build(descriptor: BackendDescriptor, engine: Engine) -> Result<Self, GatewayError> {
        descriptor.validate()?;
        if let Some(role) = engine.role() {
            if role != descriptor.role || descriptor.kind != BackendKind::Mock {
                return Err(GatewayError::Config(format!(
                    "mock {role} engine does not match descriptor {:?}/{:?}",
                    descriptor.role, descriptor.kind
                )));
            }
        }
        let dim = match &engine {
            Engine::Embedder(e) => Some(e.dim()),
            _ => None,
        };
        let limiter = Limiter::new(descriptor.max_parallel);
        Ok(Self { descriptor, engine, limiter, dim })
    }

    pub fn remote(descriptor: BackendDescriptor) -> Result<Self, GatewayError> {
        descriptor.validate()?;
        let endpoint = descriptor.endpoint.clone().unwrap_or_default();
        let client = RemoteClient::new(&endpoint)?;
        Self::build(descriptor, Engine::Remote(client))
    }

    /// Remote embedder with a known project dimension; responses of any
    /// other length are rejected.
    pub fn remote_embedder(descriptor: BackendDescriptor, dim: usize) -> Result<Self, GatewayError> {
        let mut backend = Self::remote(descriptor)?;
        backend.dim = Some(dim);
        Ok(backend)
    }

    pub fn mock_llm(llm: MockLlm, max_parallel: usize) -> Result<Self, GatewayError> {
        let d = BackendDescriptor::mock(Role::Llm, llm.seed(), max_parallel);
        Self::build(d, Engine::Llm(llm))
    }

    pub fn mock_vqa(vqa: OracleVqa, mock_seed: u64, max_parallel: usize) -> Result<Self, GatewayError> {
        let d = BackendDescriptor::mock(Role::Vqa, mock_seed, max_parallel);
        Self::build(d, Engine::Vqa(vqa))
    }

    pub fn mock_captioner(mock_seed: u64, max_parallel: usize) -> Result<Self, GatewayError> {
        let d = BackendDescriptor::mock(Role::Captioner, mock_seed, max_parallel);
        Self::build(d, Engine::Captioner(MockCaptioner))
    }

    pub fn mock_embedder(embedder: MockEmbedder, max_parallel: usize) -> Result<Self, GatewayError> {
        let d = BackendDescriptor::mock(Role::Embedder, embedder.seed(), max_parallel);
        Self::build(d, Engine::Embedder(embedder))
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    /// Highest number of simultaneous in-flight calls observed so far.
    pub fn peak_in_flight(&self) -> usize {
        self.limiter.peak()
    }

    fn require(&self, operation: &'static str, expected: Role) -> Result<(), GatewayError> {
        if self.descriptor.role != expected {
            return Err(GatewayError::WrongRole { operation, expected, actual: self.descriptor.role });
        }
        Ok(())
    }

    pub fn complete(&self, prompt: &str, max_tokens: usize) -> Result<String, GatewayError> {
        self.require("complete", Role::Llm)?;
        if prompt.trim().is_empty() {
            return Err(GatewayError::InvalidInput("empty prompt".into()));
        }
        if max_tokens == 0 {
            return Err(GatewayError::InvalidInput("max_tokens must be positive".into()));
        }
        let _slot = self.limiter.acquire();
        match &self.engine {
            Engine::Llm(m) => m.complete(prompt),
            Engine::Remote(r) => r.complete(prompt, max_tokens),
            _ => unreachable!("engine role checked at construction"),
        }
    }

    pub fn vqa_answer(
        &self,
        image: &ImageRecord,
        question: &VqaQuestion,
    ) -> Result<VqaExchange, GatewayError> {
        self.require("vqa_answer", Role::Vqa)?;
        if question.text.trim().is_empty() {
            return Err(GatewayError::InvalidInput("empty question".into()));
        }
        let _slot = self.limiter.acquire();
        let answer = match &self.engine {
            Engine::Vqa(m) => m.answer(image, question)?,
            Engine::Remote(r) => r.vqa_answer(image, &question.text)?,
            _ => unreachable!("engine role checked at construction"),
        };
        if answer.trim().is_empty() {
            return Err(GatewayError::Protocol("empty VQA answer".into()));
        }
        Ok(VqaExchange { question: question.text.clone(), answer })
    }

    pub fn caption(&self, image: &ImageRecord) -> Result<String, GatewayError> {
        self.require("caption", Role::Captioner)?;
        let _slot = self.limiter.acquire();
        match &self.engine {
            Engine::Captioner(m) => Ok(m.caption(image)),
            Engine::Remote(r) => r.caption(image),
            _ => unreachable!("engine role checked at construction"),
        }
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        self.require("embed_text", Role::Embedder)?;
        if text.trim().is_empty() {
            return Err(GatewayError::InvalidInput("empty text".into()));
        }
        let raw = {
            let _slot = self.limiter.acquire();
            match &self.engine {
                Engine::Embedder(m) => m.embed_text(text),
                Engine::Remote(r) => r.embed_text(text)?,
                _ => unreachable!("engine role checked at construction"),
            }
        };
        self.finish_embedding(raw)
    }

    pub fn embed_image(&self, image: &ImageRecord) -> Result<EmbeddingVector, GatewayError> {
        self.require("embed_image", Role::Embedder)?;
        if let Some(e) = &image.embedding {
            return self.finish_embedding(e.clone());
        }
        let raw = {
            let _slot = self.limiter.acquire();
            match &self.engine {
                Engine::Embedder(m) => m.embed_image(image)?,
                Engine::Remote(r) => r.embed_image(image)?,
                _ => unreachable!("engine role checked at construction"),
            }
        };
        self.finish_embedding(raw)
    }

    fn finish_embedding(&self, v: EmbeddingVector) -> Result<EmbeddingVector, GatewayError> {
        if let Some(dim) = self.dim {
            if v.dim() != dim {
                return Err(GatewayError::DimensionMismatch { expected: dim, actual: v.dim() });
            }
        }
        Ok(v.normalized())
    }
}

/// The four role handles used by the pipeline.
#[derive(Debug, Clone)]
pub struct Gateway {
    pub llm: Arc<Backend>,
    pub vqa: Arc<Backend>,
    pub captioner: Arc<Backend>,
    pub embedder: Arc<Backend>,
}

impl Gateway {
    /// All-mock gateway: scripted LLM, attribute-oracle VQA, attribute
    /// captioner and the seeded attribute embedder.
    pub fn mock(llm: MockLlm, seed: u64, dim: usize, max_parallel: usize) -> Result<Self, GatewayError> {
        Ok(Self {
            llm: Arc::new(Backend::mock_llm(llm, max_parallel)?),
            vqa: Arc::new(Backend::mock_vqa(OracleVqa::default(), seed, max_parallel)?),
            captioner: Arc::new(Backend::mock_captioner(seed, max_parallel)?),
            embedder: Arc::new(Backend::mock_embedder(MockEmbedder::new(dim, seed)?, max_parallel)?),
        })
    }

    pub fn with_vqa(mut self, vqa: Backend) -> Self {
        self.vqa = Arc::new(vqa);
        self
    }

    pub fn with_llm(mut self, llm: Backend) -> Self {
        self.llm = Arc::new(llm);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn record(attrs: &[&str]) -> ImageRecord {
        ImageRecord {
            id: "img".into(),
            uri: "mem://img".into(),
            embedding: None,
            mock_attributes: Some(attrs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>()),
            metadata: Default::default(),
        }
    }

    #[test]
    fn descriptor_validation() {
        assert!(BackendDescriptor::remote(Role::Llm, "", 1).validate().is_err());
        assert!(BackendDescriptor::mock(Role::Llm, 1, 0).validate().is_err());
        assert!(BackendDescriptor::remote(Role::Vqa, "tcp://127.0.0.1:1", 2).validate().is_ok());
    }

    #[test]
    fn wrong_role_fails_before_work() {
        let vqa = Backend::mock_vqa(OracleVqa::default(), 0, 1).unwrap();
        let err = vqa.complete("hello", 10).unwrap_err();
        assert!(matches!(err, GatewayError::WrongRole { expected: Role::Llm, actual: Role::Vqa, .. }));
        assert_eq!(vqa.peak_in_flight(), 0);

        let llm = Backend::mock_llm(MockLlm::new(0), 1).unwrap();
        assert!(matches!(llm.caption(&record(&[])), Err(GatewayError::WrongRole { .. })));
        assert!(matches!(llm.embed_text("x"), Err(GatewayError::WrongRole { .. })));
    }

    #[test]
    fn vqa_oracle_membership() {
        let vqa = Backend::mock_vqa(OracleVqa::default(), 0, 1).unwrap();
        let q = VqaQuestion::bound("Is there tuna?", "tuna");
        assert_eq!(vqa.vqa_answer(&record(&["tuna", "steak"]), &q).unwrap().answer, "yes");
        assert_eq!(vqa.vqa_answer(&record(&["sandwich"]), &q).unwrap().answer, "no");
        assert_eq!(vqa.vqa_answer(&record(&[]), &q).unwrap().answer, "no");
        let unbound = VqaQuestion { text: "Is it nice?".into(), binding: None };
        assert!(matches!(
            vqa.vqa_answer(&record(&["tuna"]), &unbound),
            Err(GatewayError::UnresolvableQuestion { .. })
        ));
    }

    #[test]
    fn caption_is_canonical() {
        let cap = Backend::mock_captioner(0, 1).unwrap();
        assert_eq!(cap.caption(&record(&["b", "a"])).unwrap(), "attributes: a, b");
        assert_eq!(cap.caption(&record(&[])).unwrap(), "attributes: none");
        assert_eq!(cap.caption(&record(&["a", "b"])).unwrap(), cap.caption(&record(&["b", "a"])).unwrap());
    }

    #[test]
    fn embed_image_passthrough_renormalizes() {
        let emb = Backend::mock_embedder(MockEmbedder::new(2, 0).unwrap(), 1).unwrap();
        let mut r = record(&["x"]);
        r.embedding = Some(EmbeddingVector::new(vec![3.0, 4.0]).unwrap());
        let v = emb.embed_image(&r).unwrap();
        assert_eq!(v.values(), &[0.6, 0.8]);

        r.embedding = Some(EmbeddingVector::new(vec![1.0, 0.0, 0.0]).unwrap());
        assert!(matches!(
            emb.embed_image(&r),
            Err(GatewayError::DimensionMismatch { expected: 2, actual: 3 })
        ));
    }

    #[test]
    fn embeddings_rejects_non_finite() {
        assert!(EmbeddingVector::new(vec![f32::NAN]).is_err());
        assert!(EmbeddingVector::new(vec![]).is_err());
    }
}
