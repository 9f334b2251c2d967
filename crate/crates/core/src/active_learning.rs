//! Active learning: score the unlabeled corpus with the student, sample,
//! label the sample with the teacher, retrain from scratch.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotator::{AnnotationOutcome, Annotator, AnnotatorConfig};
use crate::concept::Concept;
use crate::corpus::CorpusIndex;
use crate::evaluation::{evaluate_scores, EvalError, MetricsReport};
use crate::trainer::{model_bytes, train, DistilledModel, Label, LabelSource, LabeledExample, TrainConfig, TrainError};

pub const DEFAULT_STRATA: usize = 10;
pub const DEFAULT_ROUNDS: usize = 3;

#[derive(Debug, Error)]
pub enum AlError {
    #[error("score for {id} is {score}, outside [0, 1]")]
    InvalidScore { id: String, score: f64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("teacher failed on {image_id}: {error}")]
    Teacher { image_id: String, error: String },
    #[error(transparent)]
    Annotate(#[from] crate::annotator::AnnotateError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Stratified,
    Margin,
}

/// Sampled ids, plus a warning when fewer were available than requested.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Sample {
    pub ids: Vec<String>,
    pub warning: Option<String>,
}

fn check_scores(scores: &BTreeMap<String, f64>) -> Result<(), AlError> {
    for (id, &s) in scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(AlError::InvalidScore { id: id.clone(), score: s });
        }
    }
    Ok(())
}

fn shortfall(n: usize, available: usize) -> Option<String> {
    (n > available).then(|| {
        let msg = format!("requested {n} samples but only {available} unlabeled ids are available");
        log::warn!("{msg}");
        msg
    })
}

/// Equal-width bin of a probability.
pub fn stratum(score: f64, strata: usize) -> usize {
    ((score * strata as f64).floor() as usize).min(strata - 1)
}

/// Per-bin draw counts. Every bin gets `n / strata`; the remainder goes to
/// the most populated bins (lower index on ties). A bin that cannot fill
/// its quota hands the deficit to the nearest bin with spare members,
/// preferring the lower side at equal distance.
pub fn stratum_quotas(sizes: &[usize], n: usize) -> Vec<usize> {
    let strata = sizes.len();
    let total: usize = sizes.iter().sum();
    if n >= total {
        return sizes.to_vec();
    }
    let mut quota = vec![n / strata; strata];
    let mut by_size: Vec<usize> = (0..strata).collect();
    by_size.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    for &b in by_size.iter().take(n % strata) {
        quota[b] += 1;
    }
    for b in 0..strata {
        if quota[b] <= sizes[b] {
            continue;
        }
        let mut deficit = quota[b] - sizes[b];
        quota[b] = sizes[b];
        for d in 1..strata {
            for t in [b.checked_sub(d), Some(b + d)].into_iter().flatten() {
                if t < strata && deficit > 0 {
                    let give = deficit.min(sizes[t] - quota[t].min(sizes[t]));
                    quota[t] += give;
                    deficit -= give;
                }
            }
            if deficit == 0 {
                break;
            }
        }
    }
    quota
}

/// Stratified sample over equal-width score bins. Within a bin members are
/// taken in a seeded random order (one stream per bin over id-sorted
/// members). Output is grouped by bin in ascending order.
pub fn stratified_sample(scores: &BTreeMap<String, f64>, n: usize, strata: usize, seed: u64) -> Result<Sample, AlError> {
    if scores.is_empty() || n == 0 || strata == 0 {
        return Err(AlError::Precondition("stratified sampling needs scores, n >= 1 and strata >= 1".into()));
    }
    check_scores(scores)?;
    let mut bins: Vec<Vec<&String>> = vec![Vec::new(); strata];
    // BTreeMap iteration keeps members id-sorted
    for (id, &s) in scores {
        bins[stratum(s, strata)].push(id);
    }
    let sizes: Vec<usize> = bins.iter().map(Vec::len).collect();
    let quotas = stratum_quotas(&sizes, n);
    let mut ids = Vec::with_capacity(n.min(scores.len()));
    for (b, (members, &q)) in bins.iter_mut().zip(&quotas).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        members.shuffle(&mut rng);
        ids.extend(members.iter().take(q).map(|s| s.to_string()));
    }
    Ok(Sample { ids, warning: shortfall(n, scores.len()) })
}

/// The `n` ids whose score is closest to 0.5; ties by ascending id.
pub fn margin_sample(scores: &BTreeMap<String, f64>, n: usize) -> Result<Sample, AlError> {
    if scores.is_empty() || n == 0 {
        return Err(AlError::Precondition("margin sampling needs scores and n >= 1".into()));
    }
    check_scores(scores)?;
    let mut ranked: Vec<(&String, f64)> = scores.iter().map(|(id, &s)| (id, (s - 0.5).abs())).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    Ok(Sample {
        ids: ranked.into_iter().take(n).map(|(id, _)| id.clone()).collect(),
        warning: shortfall(n, scores.len()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: usize,
    /// `None` for the bootstrap round trained on user labels only.
    pub sampler: Option<Sampler>,
    pub requested: usize,
    pub sampled_ids: Vec<String>,
    pub new_positive: usize,
    pub new_negative: usize,
    pub labeled_total: usize,
    /// Hex SHA-256 of the model file bytes.
    pub model_ref: String,
    pub metrics: MetricsReport,
    pub warnings: Vec<String>,
}

/// Labels, held-out validation set, current model and round history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlState {
    pub labeled: BTreeMap<String, LabeledExample>,
    pub validation: BTreeMap<String, bool>,
    pub model: Option<DistilledModel>,
    pub rounds: Vec<RoundRecord>,
}

/// Inputs of a round that are not part of the evolving state.
pub struct RoundContext<'a> {
    pub corpus: &'a CorpusIndex,
    pub annotator: &'a Annotator,
    pub concept: &'a Concept,
    pub annotator_config: &'a AnnotatorConfig,
    pub train_config: &'a TrainConfig,
    pub sampler: Sampler,
    pub n: usize,
    pub strata: usize,
    pub seed: u64,
}

pub fn model_ref(model: &DistilledModel) -> String {
    hex::encode(Sha256::digest(model_bytes(model)))
}

pub fn example_from_corpus(corpus: &CorpusIndex, id: &str, label: Label, source: LabelSource) -> Result<LabeledExample, AlError> {
    let embedding =
        corpus.embedding(id).ok_or_else(|| AlError::Precondition(format!("id {id} is not in the corpus")))?;
    Ok(LabeledExample { image_id: id.to_string(), embedding: embedding.to_vec(), label, source })
}

/// Validation metrics of a model: threshold by F1 grid search, plus auPR.
pub fn evaluate_model(model: &DistilledModel, corpus: &CorpusIndex, validation: &BTreeMap<String, bool>) -> Result<MetricsReport, AlError> {
    let mut xs = Vec::with_capacity(validation.len());
    for id in validation.keys() {
        xs.push(corpus.embedding(id).ok_or_else(|| AlError::Precondition(format!("validation id {id} not in corpus")))?);
    }
    let scores = model.predict_batch(&xs)?;
    let labels: Vec<bool> = validation.values().copied().collect();
    Ok(evaluate_scores(&scores, &labels)?)
}

impl AlState {
    pub fn new(labeled: Vec<LabeledExample>, validation: BTreeMap<String, bool>) -> Self {
        Self {
            labeled: labeled.into_iter().map(|e| (e.image_id.clone(), e)).collect(),
            validation,
            model: None,
            rounds: Vec::new(),
        }
    }

    fn examples(&self) -> Vec<LabeledExample> {
        self.labeled.values().cloned().collect()
    }

    /// Round 0: trains on the current labels and evaluates.
    pub fn bootstrap(&self, corpus: &CorpusIndex, train_config: &TrainConfig) -> Result<(AlState, RoundRecord), AlError> {
        let (model, _) = train(&self.examples(), train_config)?;
        let metrics = evaluate_model(&model, corpus, &self.validation)?;
        let record = RoundRecord {
            round_index: self.rounds.len(),
            sampler: None,
            requested: 0,
            sampled_ids: Vec::new(),
            new_positive: 0,
            new_negative: 0,
            labeled_total: self.labeled.len(),
            model_ref: model_ref(&model),
            metrics,
            warnings: Vec::new(),
        };
        let mut next = self.clone();
        next.model = Some(model);
        next.rounds.push(record.clone());
        Ok((next, record))
    }

    /// Ids that may be sampled: in the corpus, not labeled, not held out.
    pub fn unlabeled_ids<'c>(&self, corpus: &'c CorpusIndex) -> Vec<&'c str> {
        corpus
            .records()
            .iter()
            .map(|r| r.id.as_str())
            .filter(|id| !self.labeled.contains_key(*id) && !self.validation.contains_key(*id))
            .collect()
    }

    /// One round. Returns the successor state; `self` is never modified, so
    /// a failed round leaves the caller's state as it was.
    pub fn run_round(&self, ctx: &RoundContext) -> Result<(AlState, RoundRecord), AlError> {
        let model = self.model.as_ref().ok_or_else(|| AlError::Precondition("no current model".into()))?;
        if ctx.n == 0 {
            return Err(AlError::Precondition("n must be positive".into()));
        }
        let round_index = self.rounds.len();

        // stage 1: score the unlabeled pool
        let ids = self.unlabeled_ids(ctx.corpus);
        if ids.is_empty() {
            let previous = self.rounds.last().map(|r| r.metrics.clone());
            let metrics = match previous {
                Some(m) => m,
                None => evaluate_model(model, ctx.corpus, &self.validation)?,
            };
            let record = RoundRecord {
                round_index,
                sampler: Some(ctx.sampler),
                requested: ctx.n,
                sampled_ids: Vec::new(),
                new_positive: 0,
                new_negative: 0,
                labeled_total: self.labeled.len(),
                model_ref: model_ref(model),
                metrics,
                warnings: vec!["no unlabeled records remain".into()],
            };
            let mut next = self.clone();
            next.rounds.push(record.clone());
            return Ok((next, record));
        }
        let xs: Vec<&[f32]> = ids.iter().map(|id| ctx.corpus.embedding(id).expect("id from corpus")).collect();
        let probs = model.predict_batch(&xs)?;
        let scores: BTreeMap<String, f64> = ids.iter().map(|s| s.to_string()).zip(probs).collect();

        // stage 2: sample and label with the teacher
        let round_seed = ctx.seed.wrapping_add(round_index as u64);
        let sample = match ctx.sampler {
            Sampler::Stratified => stratified_sample(&scores, ctx.n, ctx.strata, round_seed)?,
            Sampler::Margin => margin_sample(&scores, ctx.n)?,
        };
        let images: Vec<_> = sample.ids.iter().map(|id| ctx.corpus.get(id).expect("sampled from corpus").clone()).collect();
        let outcomes = ctx.annotator.annotate_batch(&images, ctx.concept, ctx.annotator_config)?;
        let mut next = self.clone();
        let (mut pos, mut neg) = (0, 0);
        for outcome in &outcomes {
            let result = match outcome {
                AnnotationOutcome::Ok(r) => r,
                AnnotationOutcome::Failed { image_id, error, .. } => {
                    return Err(AlError::Teacher { image_id: image_id.clone(), error: error.clone() })
                }
            };
            let label = Label::from_bool(result.decision.is_positive());
            if label.is_positive() {
                pos += 1;
            } else {
                neg += 1;
            }
            let ex = example_from_corpus(ctx.corpus, &result.image_id, label, LabelSource::Annotator)?;
            next.labeled.insert(ex.image_id.clone(), ex);
        }

        // stage 3: retrain from scratch on every label
        let (model, _) = train(&next.examples(), ctx.train_config)?;
        let metrics = evaluate_model(&model, ctx.corpus, &self.validation)?;
        let record = RoundRecord {
            round_index,
            sampler: Some(ctx.sampler),
            requested: ctx.n,
            sampled_ids: sample.ids,
            new_positive: pos,
            new_negative: neg,
            labeled_total: next.labeled.len(),
            model_ref: model_ref(&model),
            metrics,
            warnings: sample.warning.into_iter().collect(),
        };
        next.model = Some(model);
        next.rounds.push(record.clone());
        Ok((next, record))
    }

    /// Ids labeled so far, for exclusivity checks.
    pub fn labeled_ids(&self) -> BTreeSet<String> {
        self.labeled.keys().cloned().collect()
    }
}

/// Round history as tab-separated round, sampler, n, P, R, F1, auPR.
pub fn rounds_table(rounds: &[RoundRecord]) -> String {
    let mut out = String::from("round\tsampler\tn\tprecision\trecall\tf1\taupr\n");
    for r in rounds {
        let sampler = match r.sampler {
            None => "bootstrap",
            Some(Sampler::Stratified) => "stratified",
            Some(Sampler::Margin) => "margin",
        };
        let aupr = r.metrics.aupr.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{}\t{sampler}\t{}\t{:.4}\t{:.4}\t{:.4}\t{aupr}\n",
            r.round_index,
            r.sampled_ids.len(),
            r.metrics.precision,
            r.metrics.recall,
            r.metrics.f1
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn uniform_scores_one_per_decile() {
        let s: BTreeMap<String, f64> = (0..100).map(|i| (format!("{i:03}"), i as f64 / 100.0 + 0.005)).collect();
        let sample = stratified_sample(&s, 10, 10, 1).unwrap();
        let mut bins: Vec<usize> = sample.ids.iter().map(|id| stratum(s[id], 10)).collect();
        bins.sort_unstable();
        assert_eq!(bins, (0..10).collect::<Vec<_>>());
        assert!(sample.warning.is_none());
    }

    #[test]
    fn top_bin_backfill() {
        let s: BTreeMap<String, f64> = (0..20).map(|i| (format!("{i}"), 0.9 + i as f64 / 200.0)).collect();
        let sample = stratified_sample(&s, 5, 10, 3).unwrap();
        assert_eq!(sample.ids.len(), 5);
        assert!(sample.ids.iter().all(|id| s[id] >= 0.9));
        assert_eq!(sample, stratified_sample(&s, 5, 10, 3).unwrap());
    }

    #[test]
    fn quotas_examples() {
        assert_eq!(stratum_quotas(&[10, 0, 10], 4), vec![3, 0, 1]);
        // the empty middle bin hands its quota to the lower neighbour
        assert_eq!(stratum_quotas(&[5, 0, 9], 5), vec![3, 0, 2]);
        assert_eq!(stratum_quotas(&[1, 1], 5), vec![1, 1]);
    }

    #[test]
    fn oversized_request_returns_all_with_warning() {
        let s = scores(&[("a", 0.1), ("b", 0.5)]);
        let sample = stratified_sample(&s, 5, 10, 0).unwrap();
        assert_eq!(sample.ids.len(), 2);
        assert!(sample.warning.is_some());
        assert!(stratified_sample(&scores(&[("a", 1.5)]), 1, 10, 0).is_err());
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin_sample(&scores(&[("a", 0.1), ("b", 0.45), ("c", 0.9)]), 1).unwrap().ids, vec!["b"]);
        assert_eq!(margin_sample(&scores(&[("a", 0.4), ("b", 0.6)]), 1).unwrap().ids, vec!["a"]);
        let all = margin_sample(&scores(&[("a", 0.05), ("b", 0.45), ("c", 0.9)]), 5).unwrap();
        assert_eq!(all.ids, vec!["b", "c", "a"]);
        assert!(all.warning.is_some());
    }
}
