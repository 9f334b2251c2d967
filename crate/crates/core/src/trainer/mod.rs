//! Student classifier: an MLP over image embeddings trained with AdamW on
//! teacher and user labels.

mod file;
mod gradcheck;
pub(crate) mod mlp;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use mlp::{bce_with_logit, param_count, sigmoid, Mlp};

pub use file::{load_model, model_bytes, model_from_bytes, save_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use gradcheck::{gradient_check, loss_gradient, GradientCheck, MIN_CHECKED_GRADIENT};

pub const HIDDEN_SIZES: [usize; 3] = [128, 128, 128];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training examples")]
    Empty,
    #[error("training set has a single class ({0:?})")]
    SingleClass(Label),
    #[error("example {index}: embedding dim {actual}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, actual: usize },
    #[error("non-finite value in example {0}")]
    NonFiniteInput(usize),
    #[error("loss became non-finite at epoch {epoch} (last finite loss {last_loss})")]
    NonFiniteLoss { epoch: usize, last_loss: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("model file checksum mismatch")]
    ChecksumMismatch,
    #[error("model file version {found} is newer than supported version {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("malformed model file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn target(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => 0.0,
        }
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    User,
    Crowd,
    Annotator,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::User => "user",
            LabelSource::Crowd => "crowd",
            LabelSource::Annotator => "annotator",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub image_id: String,
    pub embedding: Vec<f32>,
    pub label: Label,
    pub source: LabelSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    pub holdout_fraction: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self { patience: 20, holdout_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 512,
            max_epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            early_stop: Some(EarlyStop::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.epsilon.partial_cmp(&0.0) != Some(Ordering::Greater) || !(0.0..=f64::INFINITY).contains(&self.weight_decay) {
            return bad("epsilon must be positive and weight_decay non-negative");
        }
        if let Some(es) = self.early_stop {
            if es.patience == 0 || !(0.0..0.5).contains(&es.holdout_fraction) {
                return bad("early stop needs patience >= 1 and holdout_fraction in [0, 0.5)");
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainProvenance {
    pub seed: u64,
    pub epochs: usize,
    pub config_hash: String,
    /// Example counts per label source.
    pub teacher_sources: BTreeMap<String, usize>,
}

/// Trained student. Hidden layers use the rectifier; the single output
/// logit goes through a sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledModel {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    /// Flat parameters: per layer, row-major (fan_in x fan_out) weights,
    /// then biases.
    pub params: Vec<f32>,
    pub provenance: Option<TrainProvenance>,
}

impl DistilledModel {
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden_sizes);
        sizes.push(1);
        sizes
    }

    /// All-zero model of the standard shape.
    pub fn zeros(input_dim: usize) -> Self {
        let mut m = Self { input_dim, hidden_sizes: HIDDEN_SIZES.to_vec(), params: Vec::new(), provenance: None };
        m.params = vec![0.0; param_count(&m.layer_sizes())];
        m
    }

    /// Xavier-uniform weights and zero biases from `seed`.
    pub fn init(input_dim: usize, seed: u64) -> Self {
        let mut m = Self::zeros(input_dim);
        let mlp = xavier_init(&m.layer_sizes(), seed);
        m.params = mlp.params.iter().map(|&p| p as f32).collect();
        m
    }

    fn param_index(&self, layer: usize, i: Option<usize>, j: usize) -> usize {
        let sizes = self.layer_sizes();
        assert!(layer + 1 < sizes.len() && j < sizes[layer + 1], "parameter out of range");
        let offset: usize = sizes[..=layer].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        match i {
            Some(i) => {
                assert!(i < sizes[layer], "parameter out of range");
                offset + i * sizes[layer + 1] + j
            }
            None => offset + sizes[layer] * sizes[layer + 1] + j,
        }
    }

    /// Weight from unit `i` of layer `layer`'s input to its output unit `j`.
    pub fn set_weight(&mut self, layer: usize, i: usize, j: usize, value: f32) {
        let k = self.param_index(layer, Some(i), j);
        self.params[k] = value;
    }

    pub fn set_bias(&mut self, layer: usize, j: usize, value: f32) {
        let k = self.param_index(layer, None, j);
        self.params[k] = value;
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.hidden_sizes != HIDDEN_SIZES {
            return Err(TrainError::Format(format!("hidden sizes {:?}, expected {HIDDEN_SIZES:?}", self.hidden_sizes)));
        }
        if self.input_dim == 0 || self.params.len() != param_count(&self.layer_sizes()) {
            return Err(TrainError::Format("parameter count does not match the layer shapes".into()));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(TrainError::Format("non-finite parameter".into()));
        }
        Ok(())
    }

    pub(crate) fn mlp(&self) -> Mlp {
        Mlp::new(self.layer_sizes(), self.params.iter().map(|&p| f64::from(p)).collect())
    }

    fn check_dim(&self, index: usize, x: &[f32]) -> Result<(), TrainError> {
        if x.len() != self.input_dim {
            return Err(TrainError::DimensionMismatch { index, expected: self.input_dim, actual: x.len() });
        }
        Ok(())
    }

    /// Positive-class probability, strictly inside (0, 1).
    pub fn predict(&self, embedding: &[f32]) -> Result<f64, TrainError> {
        self.check_dim(0, embedding)?;
        let x: Vec<f64> = embedding.iter().map(|&v| f64::from(v)).collect();
        Ok(probability(self.mlp().logits(&x, 1)[0]))
    }

    pub fn predict_batch(&self, embeddings: &[&[f32]]) -> Result<Vec<f64>, TrainError> {
        for (i, e) in embeddings.iter().enumerate() {
            self.check_dim(i, e)?;
        }
        let mlp = self.mlp();
        Ok(embeddings
            .par_iter()
            .map(|e| {
                let x: Vec<f64> = e.iter().map(|&v| f64::from(v)).collect();
                probability(mlp.logits(&x, 1)[0])
            })
            .collect())
    }
}

fn probability(logit: f64) -> f64 {
    const MAX_BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
    sigmoid(logit).clamp(f64::MIN_POSITIVE, MAX_BELOW_ONE)
}

pub(crate) fn xavier_init(sizes: &[usize], seed: u64) -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(param_count(sizes));
    for w in sizes.windows(2) {
        let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
        params.extend((0..w[0] * w[1]).map(|_| rng.gen_range(-limit..limit)));
        params.extend(std::iter::repeat_n(0.0, w[1]));
    }
    Mlp::new(sizes.to_vec(), params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the training split before the first update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub train_size: usize,
    pub holdout_size: usize,
}

impl TrainReport {
    /// Tab-separated epoch, loss and validation loss.
    pub fn table(&self) -> String {
        let mut out = String::from("epoch\tloss\tval_loss\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!("{}\t{:.6}\t{val}\n", e.epoch, e.loss));
        }
        out
    }
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], c: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + c.epsilon);
            *p -= c.learning_rate * (update + c.weight_decay * *p);
        }
    }
}

fn mean_loss(mlp: &Mlp, x: &[f64], y: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let logits = mlp.logits(x, y.len());
    logits.iter().zip(y).map(|(&z, &t)| bce_with_logit(z, t)).sum::<f64>() / y.len() as f64
}

/// Splits example indices into train and holdout, taking the holdout
/// fraction from each class separately.
fn split(examples: &[LabeledExample], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for label in [Label::Negative, Label::Positive] {
        let mut idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].label == label).collect();
        idx.shuffle(rng);
        let k = (idx.len() as f64 * fraction).floor() as usize;
        holdout.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    holdout.sort_unstable();
    (train, holdout)
}

fn gather(examples: &[LabeledExample], idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let x = idx.iter().flat_map(|&i| examples[i].embedding.iter().map(|&v| f64::from(v))).collect();
    let y = idx.iter().map(|&i| examples[i].label.target()).collect();
    (x, y)
}

/// Trains a fresh model. Deterministic for a fixed config (including seed).
pub fn train(examples: &[LabeledExample], config: &TrainConfig) -> Result<(DistilledModel, TrainReport), TrainError> {
    config.validate()?;
    let first = examples.first().ok_or(TrainError::Empty)?;
    let dim = first.embedding.len();
    if dim == 0 {
        return Err(TrainError::DimensionMismatch { index: 0, expected: 1, actual: 0 });
    }
    for (i, e) in examples.iter().enumerate() {
        if e.embedding.len() != dim {
            return Err(TrainError::DimensionMismatch { index: i, expected: dim, actual: e.embedding.len() });
        }
        if e.embedding.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteInput(i));
        }
    }
    if examples.iter().all(|e| e.label == first.label) {
        return Err(TrainError::SingleClass(first.label));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init_seed: u64 = rng.gen();
    let (train_idx, holdout_idx) = match config.early_stop {
        Some(es) => split(examples, es.holdout_fraction, &mut rng),
        None => ((0..examples.len()).collect(), Vec::new()),
    };
    let (val_x, val_y) = gather(examples, &holdout_idx);
    let (all_x, all_y) = gather(examples, &train_idx);

    let mut sizes = vec![dim];
    sizes.extend(HIDDEN_SIZES);
    sizes.push(1);
    let mut mlp = xavier_init(&sizes, init_seed);
    let mut opt = AdamW::new(mlp.params.len());
    let mut grad = vec![0.0; mlp.params.len()];
    let batch = config.batch_size.min(train_idx.len());
    let mut order: Vec<usize> = (0..train_idx.len()).collect();

    let initial_loss = mean_loss(&mlp, &all_x, &all_y);
    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, 0usize, mlp.params.clone());
    let mut last_loss = initial_loss;
    let mut xb = Vec::with_capacity(batch * dim);
    let mut yb = Vec::with_capacity(batch);
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            xb.clear();
            yb.clear();
            for &k in chunk {
                xb.extend_from_slice(&all_x[k * dim..(k + 1) * dim]);
                yb.push(all_y[k]);
            }
            let loss = mlp.loss_and_gradient(&xb, &yb, &mut grad);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch, last_loss });
            }
            total += loss * chunk.len() as f64;
            opt.step(&mut mlp.params, &grad, config);
        }
        let loss = total / train_idx.len() as f64;
        last_loss = loss;
        let val_loss = (!val_y.is_empty()).then(|| mean_loss(&mlp, &val_x, &val_y));
        epochs.push(EpochMetrics { epoch, loss, val_loss });
        match (config.early_stop, val_loss) {
            (Some(es), Some(v)) => {
                if v < best.0 {
                    best = (v, epoch, mlp.params.clone());
                } else if epoch - best.1 >= es.patience {
                    log::debug!("early stop at epoch {epoch}, best {}", best.1);
                    break;
                }
            }
            _ => best = (loss, epoch, Vec::new()),
        }
    }
    let (best_epoch, params) = if best.2.is_empty() { (epochs.len(), mlp.params) } else { (best.1, best.2) };

    let mut teacher_sources = BTreeMap::new();
    for e in examples {
        *teacher_sources.entry(e.source.as_str().to_string()).or_insert(0) += 1;
    }
    let model = DistilledModel {
        input_dim: dim,
        hidden_sizes: HIDDEN_SIZES.to_vec(),
        params: params.iter().map(|&p| p as f32).collect(),
        provenance: Some(TrainProvenance {
            seed: config.seed,
            epochs: epochs.len(),
            config_hash: config.hash(),
            teacher_sources,
        }),
    };
    let report =
        TrainReport { initial_loss, epochs, best_epoch, train_size: train_idx.len(), holdout_size: holdout_idx.len() };
    Ok((model, report))
}

/// Fraction of examples whose thresholded prediction (0.5) matches the label.
pub fn accuracy(model: &DistilledModel, examples: &[LabeledExample]) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Empty);
    }
    let xs: Vec<&[f32]> = examples.iter().map(|e| e.embedding.as_slice()).collect();
    let p = model.predict_batch(&xs)?;
    let correct = p.iter().zip(examples).filter(|(&p, e)| (p >= 0.5) == e.label.is_positive()).count();
    Ok(correct as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests;
