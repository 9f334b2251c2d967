//! Classification metrics, threshold search, zero-shot baselines and
//! annotator strategy selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{normalize_answer, AnnotateError, AnnotationOutcome, Annotator, AnnotatorConfig, Answer, Decision};
use crate::concept::Concept;
use crate::corpus::ImageRecord;
use crate::gateway::{Backend, GatewayError, VqaQuestion};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions ({predictions}) and labels ({labels}) differ in length")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no examples to evaluate")]
    Empty,
    #[error("no positive labels")]
    NoPositives,
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error("no strategies to choose from")]
    NoStrategies,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub aupr: Option<f64>,
    pub threshold: Option<f64>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub support_positive: usize,
    pub support_negative: usize,
    /// A precision or recall denominator was zero.
    pub degenerate: bool,
}

impl MetricsReport {
    fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self {
            precision,
            recall,
            f1,
            aupr: None,
            threshold: None,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            support_positive: tp + fn_,
            support_negative: fp + tn,
            degenerate: tp + fp == 0 || tp + fn_ == 0,
        }
    }
}

fn check_lengths<A, B>(a: &[A], b: &[B]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch { predictions: a.len(), labels: b.len() });
    }
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn precision_recall_f1(predictions: &[bool], labels: &[bool]) -> Result<MetricsReport, EvalError> {
    check_lengths(predictions, labels)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, fn_, tn))
}

/// Cumulative (tp, fp) after each group of equal scores, highest first,
/// paired with the group's score.
fn score_groups(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, usize, usize)>, EvalError> {
    check_lengths(scores, labels)?;
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(s));
    }
    if !labels.iter().any(|&l| l) {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_group {
            groups.push((scores[i], tp, fp));
        }
    }
    Ok(groups)
}

/// Average precision: precision times recall gain at every distinct score
/// threshold, highest first.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let groups = score_groups(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut prev_tp = 0;
    let mut area = 0.0;
    for &(_, tp, fp) in &groups {
        if tp > prev_tp {
            area += (tp as f64 / (tp + fp) as f64) * ((tp - prev_tp) as f64 / positives);
        }
        prev_tp = tp;
    }
    Ok(area)
}

/// Picks the F1-maximizing threshold among the distinct scores and the
/// midpoints between neighbours; `score >= threshold` predicts positive.
/// Ties go to the lowest threshold. The report includes auPR.
pub fn grid_search_threshold(scores: &[f64], labels: &[bool]) -> Result<(f64, MetricsReport), EvalError> {
    let groups = score_groups(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    // candidates in increasing threshold order, each with its cut counts
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(2 * groups.len());
    for (k, &(score, tp, fp)) in groups.iter().enumerate().rev() {
        candidates.push((score, tp, fp));
        if k > 0 {
            let higher = groups[k - 1];
            candidates.push((score + (higher.0 - score) / 2.0, higher.1, higher.2));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<(f64, MetricsReport)> = None;
    for (t, tp, fp) in candidates {
        let report = MetricsReport::from_counts(tp, fp, positives - tp, negatives - fp);
        if best.as_ref().is_none_or(|(_, b)| report.f1 > b.f1) {
            best = Some((t, report));
        }
    }
    let (t, mut report) = best.expect("at least one candidate");
    report.threshold = Some(t);
    report.aupr = Some(aupr(scores, labels)?);
    Ok((t, report))
}

/// Threshold search plus auPR: the operating point used to report a
/// scored classifier.
pub fn evaluate_scores(scores: &[f64], labels: &[bool]) -> Result<MetricsReport, EvalError> {
    grid_search_threshold(scores, labels).map(|(_, r)| r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroShotMode {
    /// Embed the concept name.
    Name,
    /// Embed the LLM-generated description.
    GeneratedDescription,
}

pub fn zero_shot_text(concept: &Concept, mode: ZeroShotMode) -> &str {
    match mode {
        ZeroShotMode::Name => &concept.name,
        ZeroShotMode::GeneratedDescription => &concept.description,
    }
}

/// Cosine similarity between the concept text and the image embedding.
pub fn zero_shot_similarity_score(
    embedder: &Backend,
    image: &ImageRecord,
    concept: &Concept,
    mode: ZeroShotMode,
) -> Result<f64, EvalError> {
    let text = embedder.embed_text(zero_shot_text(concept, mode))?;
    let img = embedder.embed_image(image)?;
    Ok(text.cosine(&img))
}

/// Scores many images against one text embedding.
pub fn zero_shot_scores(
    embedder: &Backend,
    images: &[ImageRecord],
    concept: &Concept,
    mode: ZeroShotMode,
) -> Result<Vec<f64>, EvalError> {
    let text = embedder.embed_text(zero_shot_text(concept, mode))?;
    images.par_iter().map(|img| Ok(text.cosine(&embedder.embed_image(img)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaPromptResult {
    pub decision: Decision,
    pub answer: String,
    /// The answer was neither yes nor no.
    pub other: bool,
}

pub fn vqa_prompt_question(concept: &Concept) -> VqaQuestion {
    VqaQuestion::bound(format!("Is this an image of {}?", concept.name), concept.name_attribute_id())
}

/// Single-question VQA baseline.
pub fn vqa_prompt_classify(vqa: &Backend, image: &ImageRecord, concept: &Concept) -> Result<VqaPromptResult, EvalError> {
    let exchange = vqa.vqa_answer(image, &vqa_prompt_question(concept))?;
    let answer = normalize_answer(&exchange.answer);
    Ok(VqaPromptResult {
        decision: Decision::from_bool(answer == Answer::Yes),
        other: answer == Answer::Other,
        answer: exchange.answer,
    })
}

/// Index into `scores` of the best entry: highest F1, then lowest strategy
/// index.
pub fn argmax_f1(scores: &[(usize, f64)]) -> Option<usize> {
    (0..scores.len()).reduce(|best, k| {
        let (bi, bf) = scores[best];
        let (ki, kf) = scores[k];
        if kf > bf || (kf == bf && ki < bi) {
            k
        } else {
            best
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyScore {
    pub strategy_index: usize,
    pub flags: String,
    pub report: MetricsReport,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySelection {
    pub selected: AnnotatorConfig,
    pub scores: Vec<StrategyScore>,
}

impl StrategySelection {
    /// Tab-separated strategy, flags, P, R, F1 and failures.
    pub fn table(&self) -> String {
        let mut out = String::from("strategy\tflags\tprecision\trecall\tf1\tfailures\n");
        for s in &self.scores {
            out.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
                s.strategy_index, s.flags, s.report.precision, s.report.recall, s.report.f1, s.failures
            ));
        }
        out
    }
}

/// Scores annotator outcomes against labels; a failed image counts as a
/// wrong prediction.
pub fn score_outcomes(outcomes: &[AnnotationOutcome], labels: &[bool]) -> Result<(MetricsReport, usize), EvalError> {
    check_lengths(outcomes, labels)?;
    let mut failures = 0;
    let predictions: Vec<bool> = outcomes
        .iter()
        .zip(labels)
        .map(|(o, &l)| match o.result() {
            Some(r) => r.decision.is_positive(),
            None => {
                failures += 1;
                !l
            }
        })
        .collect();
    Ok((precision_recall_f1(&predictions, labels)?, failures))
}

/// Runs every strategy on the validation images and keeps the best F1.
pub fn select_strategy(
    annotator: &Annotator,
    concept: &Concept,
    validation: &[(ImageRecord, bool)],
    strategies: &[AnnotatorConfig],
) -> Result<StrategySelection, EvalError> {
    if strategies.is_empty() {
        return Err(EvalError::NoStrategies);
    }
    if validation.is_empty() {
        return Err(EvalError::Empty);
    }
    let images: Vec<ImageRecord> = validation.iter().map(|(i, _)| i.clone()).collect();
    let labels: Vec<bool> = validation.iter().map(|(_, l)| *l).collect();
    let scores = strategies
        .par_iter()
        .map(|cfg| {
            let outcomes = annotator.annotate_batch(&images, concept, cfg)?;
            let (report, failures) = score_outcomes(&outcomes, &labels)?;
            Ok(StrategyScore { strategy_index: cfg.strategy_index, flags: cfg.flag_string(), report, failures })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let f1s: Vec<(usize, f64)> = scores.iter().map(|s| (s.strategy_index, s.report.f1)).collect();
    let best = argmax_f1(&f1s).expect("non-empty");
    Ok(StrategySelection { selected: strategies[best].clone(), scores })
}

/// One row of an exported comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub concept: String,
    pub method: String,
    pub report: MetricsReport,
}

/// Tab-separated concept, method, P, R, F1 and auPR ("-" when absent).
pub fn report_table(rows: &[ReportRow]) -> String {
    let mut out = String::from("concept\tmethod\tprecision\trecall\tf1\taupr\n");
    for r in rows {
        let aupr = r.report.aupr.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{aupr}\n",
            r.concept, r.method, r.report.precision, r.report.recall, r.report.f1
        ));
    }
    out
}
