//! Measurement protocols: accuracy, stratified breakdowns, confidence
//! profiles, perplexity, targeted syntactic evaluation, and cross-model
//! rank summaries.
//!
//! Every protocol is generic over a scorer trait so fixtures with known
//! outputs can drive the same code paths as trained models. Ties are
//! always incorrect: a model that cannot separate the two options gets no
//! credit for either.

use crate::corpus::{AnnotatedSentence, ContrastKind, MinimalPair, Number, Phenomenon, RangeTag};
use crate::thread_pool;
use crate::training::{self, Model, Task, TrainError};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("stratum {stratum} has {n} items, below the minimum {min}")]
    TooFewItems {
        stratum: usize,
        n: usize,
        min: usize,
    },
    #[error("confidence profiles need a single template, found {0} and {1}")]
    MixedTemplates(String, String),
    #[error("sentences of one template must align position-for-position")]
    MisalignedPositions,
    #[error("rank matrix rows have unequal lengths")]
    RaggedMatrix,
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Number-prediction scorer: (p_singular, p_plural) for a sentence prefix.
pub trait NumberScorer: Sync {
    fn p_number(&self, prefix: &[String]) -> Result<(f64, f64)>;
}

/// Grammaticality scorer: probability the sentence is grammatical.
pub trait GrammaticalityScorer: Sync {
    fn p_grammatical(&self, tokens: &[String]) -> Result<f64>;
}

/// Sentence scorer: total log probability.
pub trait SentenceScorer: Sync {
    fn logprob(&self, tokens: &[String]) -> Result<f64>;
}

impl NumberScorer for Model {
    fn p_number(&self, prefix: &[String]) -> Result<(f64, f64)> {
        Ok(training::classify_number(self, prefix)?)
    }
}

impl GrammaticalityScorer for Model {
    fn p_grammatical(&self, tokens: &[String]) -> Result<f64> {
        Ok(training::judge_grammaticality(self, tokens)?)
    }
}

impl SentenceScorer for Model {
    fn logprob(&self, tokens: &[String]) -> Result<f64> {
        Ok(training::lm_logprob(self, tokens)?)
    }
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub phenomenon: Phenomenon,
    pub range: RangeTag,
    pub template: String,
    pub contrast: Option<ContrastKind>,
    pub accuracy: f64,
    pub n_items: usize,
}

#[derive(Debug, Clone, Default)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
    pub perplexity: Option<f64>,
}

impl EvaluationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phenomenon,range,template,contrast,accuracy,n\n");
        if let Some(p) = self.perplexity {
            out.push_str(&format!(",,validation_perplexity,,{p},\n"));
        }
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.phenomenon.name(),
                r.range.name(),
                r.template,
                r.contrast.map(|c| c.name()).unwrap_or(""),
                r.accuracy,
                r.n_items,
            ));
        }
        out
    }

    /// Fixed-width table grouped into short- and long-range sections, one
    /// block per phenomenon, one row per template (and contrast for NPI).
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        if let Some(p) = self.perplexity {
            out.push_str(&format!("{:<58}{:>8.2}\n\n", "Validation Perplexity", p));
        }
        for (range, title) in [
            (RangeTag::Short, "Short-Range Dependency"),
            (RangeTag::Long, "Long-Range Dependency"),
        ] {
            let section: Vec<&ReportRow> = self.rows.iter().filter(|r| r.range == range).collect();
            if section.is_empty() {
                continue;
            }
            out.push_str(&format!("=== {title} ===\n"));
            for (phen, header) in [
                (Phenomenon::SvAgreement, "SV Agreement:"),
                (Phenomenon::Reflexive, "Reflexive Anaphora:"),
                (Phenomenon::Npi, "Negative Polarity Items:"),
            ] {
                let rows: Vec<&&ReportRow> =
                    section.iter().filter(|r| r.phenomenon == phen).collect();
                if rows.is_empty() {
                    continue;
                }
                out.push_str(header);
                out.push('\n');
                for r in rows {
                    let label = match r.contrast {
                        Some(c) if r.phenomenon == Phenomenon::Npi => {
                            format!("{} ({})", pretty_template(&r.template), c.label())
                        }
                        _ => pretty_template(&r.template),
                    };
                    out.push_str(&format!(
                        "  {:<56}{:>6.2}  (n={})\n",
                        label, r.accuracy, r.n_items
                    ));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn pretty_template(name: &str) -> String {
    name.replace('_', " ")
}

#[derive(Debug, Clone, Copy)]
pub struct Accuracy {
    pub value: f64,
    pub n: usize,
}

/// Fraction of correct number predictions; ties at exactly 0.5 incorrect.
pub fn number_prediction_accuracy(
    scorer: &impl NumberScorer,
    corpus: &[AnnotatedSentence],
) -> Result<Accuracy> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut correct = 0usize;
    for s in corpus {
        let (p_sg, p_pl) = scorer.p_number(&s.tokens[..s.verb_index])?;
        let right = match s.subject_number {
            Number::Sg => p_sg > p_pl,
            Number::Pl => p_pl > p_sg,
        };
        if right {
            correct += 1;
        }
    }
    Ok(Accuracy {
        value: correct as f64 / corpus.len() as f64,
        n: corpus.len(),
    })
}

/// Fraction of correct grammaticality decisions at threshold 0.5.
pub fn grammaticality_accuracy(
    scorer: &impl GrammaticalityScorer,
    corpus: &[AnnotatedSentence],
) -> Result<Accuracy> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut correct = 0usize;
    for s in corpus {
        let p = scorer.p_grammatical(&s.tokens)?;
        let right = if s.grammatical { p > 0.5 } else { p < 0.5 };
        if right {
            correct += 1;
        }
    }
    Ok(Accuracy {
        value: correct as f64 / corpus.len() as f64,
        n: corpus.len(),
    })
}

/// Task-dispatching accuracy for a trained model.
pub fn accuracy(model: &Model, corpus: &[AnnotatedSentence]) -> Result<Accuracy> {
    match model.config.task {
        Task::NumberPrediction => number_prediction_accuracy(model, corpus),
        Task::Grammaticality => grammaticality_accuracy(model, corpus),
        Task::LanguageModel => Err(EvalError::Train(TrainError::BadConfig(
            "accuracy applies to classifier tasks".into(),
        ))),
    }
}

/// Which annotation fields are held fixed when stratifying.
#[derive(Debug, Clone, Copy, Default)]
pub struct StratifyFixed {
    pub distance: Option<usize>,
    pub attractors: Option<usize>,
    pub interveners: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StratifyBy {
    NonAttractors,
    Attractors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub key: usize,
    pub accuracy: f64,
    pub n: usize,
}

/// Number-prediction accuracy per stratum. Items are filtered by the fixed
/// keys and grouped by the varying one; empty strata are absent from the
/// result, and a non-empty stratum below `min_items` is an error rather
/// than a noisy row.
pub fn stratified_accuracy(
    scorer: &impl NumberScorer,
    corpus: &[AnnotatedSentence],
    fixed: StratifyFixed,
    vary: StratifyBy,
    min_items: usize,
) -> Result<Vec<Stratum>> {
    let mut groups: BTreeMap<usize, Vec<&AnnotatedSentence>> = BTreeMap::new();
    for s in corpus {
        if fixed.distance.is_some_and(|d| s.distance != d) {
            continue;
        }
        if fixed.attractors.is_some_and(|a| s.attractor_count != a) {
            continue;
        }
        if fixed
            .interveners
            .is_some_and(|n| s.intervening_nouns.len() != n)
        {
            continue;
        }
        let key = match vary {
            StratifyBy::NonAttractors => s.non_attractor_count,
            StratifyBy::Attractors => s.attractor_count,
        };
        groups.entry(key).or_default().push(s);
    }
    let mut out = Vec::new();
    for (key, items) in groups {
        if items.len() < min_items {
            return Err(EvalError::TooFewItems {
                stratum: key,
                n: items.len(),
                min: min_items,
            });
        }
        let mut correct = 0usize;
        for s in &items {
            let (p_sg, p_pl) = scorer.p_number(&s.tokens[..s.verb_index])?;
            let right = match s.subject_number {
                Number::Sg => p_sg > p_pl,
                Number::Pl => p_pl > p_sg,
            };
            if right {
                correct += 1;
            }
        }
        out.push(Stratum {
            key,
            accuracy: correct as f64 / items.len() as f64,
            n: items.len(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ProfilePoint {
    pub position: usize,
    pub label: String,
    pub example: String,
    pub mean_confidence: f64,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct ConfidenceProfile {
    pub template: String,
    pub points: Vec<ProfilePoint>,
}

impl ConfidenceProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,label,example,mean_confidence,n\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.position, p.label, p.example, p.mean_confidence, p.n
            ));
        }
        out
    }
}

/// Mean confidence for the correct verb number after reading the sentence
/// up to each position, over a corpus generated from one template (so
/// positions align across sentences).
pub fn confidence_profile(
    scorer: &impl NumberScorer,
    corpus: &[AnnotatedSentence],
) -> Result<ConfidenceProfile> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let first = &corpus[0];
    for s in corpus {
        if s.template != first.template {
            return Err(EvalError::MixedTemplates(
                first.template.clone(),
                s.template.clone(),
            ));
        }
        if s.tokens.len() != first.tokens.len()
            || s.subject_index != first.subject_index
            || s.verb_index != first.verb_index
        {
            return Err(EvalError::MisalignedPositions);
        }
    }
    let len = first.tokens.len();
    let mut points = Vec::with_capacity(len);
    for pos in 0..len {
        let mut sum = 0.0;
        for s in corpus {
            let (p_sg, p_pl) = scorer.p_number(&s.tokens[..=pos])?;
            sum += match s.subject_number {
                Number::Sg => p_sg,
                Number::Pl => p_pl,
            };
        }
        let label = if pos == first.subject_index {
            "subject".to_string()
        } else if pos == first.verb_index {
            "target".to_string()
        } else {
            format!("w{pos}")
        };
        points.push(ProfilePoint {
            position: pos,
            label,
            example: first.tokens[pos].clone(),
            mean_confidence: sum / corpus.len() as f64,
            n: corpus.len(),
        });
    }
    Ok(ConfidenceProfile {
        template: first.template.clone(),
        points,
    })
}

/// exp of the token-weighted mean negative log likelihood, accumulated
/// from per-token values. The cross-operation identity test compares this
/// against totals from `lm_logprob`.
pub fn perplexity(model: &Model, corpus: &[AnnotatedSentence]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let per_sentence: Vec<Result<Vec<f64>>> = thread_pool().install(|| {
        use rayon::prelude::*;
        corpus
            .par_iter()
            .map(|s| Ok(training::lm_token_nlls(model, &s.tokens)?))
            .collect()
    });
    let mut total = 0.0;
    let mut count = 0usize;
    for r in per_sentence {
        let nlls = r?;
        count += nlls.len();
        total += nlls.iter().sum::<f64>();
    }
    Ok((total / count as f64).exp())
}

/// Perplexity through any sentence scorer (token counts from the corpus).
pub fn perplexity_of_scorer(
    scorer: &impl SentenceScorer,
    corpus: &[AnnotatedSentence],
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for s in corpus {
        total -= scorer.logprob(&s.tokens)?;
        count += s.tokens.len();
    }
    Ok((total / count as f64).exp())
}

/// Targeted syntactic evaluation: a pair is correct iff the preferred
/// member gets strictly higher total log probability than its contrast.
/// Rows are grouped by (phenomenon, range, template, contrast kind).
pub fn targeted_eval(
    scorer: &impl SentenceScorer,
    pairs: &[MinimalPair],
) -> Result<Vec<ReportRow>> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let verdicts: Vec<Result<bool>> = thread_pool().install(|| {
        use rayon::prelude::*;
        pairs
            .par_iter()
            .map(|p| Ok(scorer.logprob(&p.grammatical)? > scorer.logprob(&p.contrast)?))
            .collect()
    });
    let mut groups: BTreeMap<(RangeTag, Phenomenon, String, ContrastKind), (usize, usize)> =
        BTreeMap::new();
    for (p, v) in pairs.iter().zip(verdicts) {
        let e = groups
            .entry((p.range, p.phenomenon, p.template.clone(), p.kind))
            .or_insert((0, 0));
        e.1 += 1;
        if v? {
            e.0 += 1;
        }
    }
    Ok(groups
        .into_iter()
        .map(|((range, phenomenon, template, kind), (correct, n))| ReportRow {
            phenomenon,
            range,
            template,
            contrast: Some(kind),
            accuracy: correct as f64 / n as f64,
            n_items: n,
        })
        .collect())
}

/// Classifier accuracy on minimal-pair sentences, grouped by template:
/// each pair contributes its preferred member (expected grammatical) and
/// its contrast (expected ungrammatical).
pub fn grammaticality_generalization(
    scorer: &impl GrammaticalityScorer,
    pairs: &[MinimalPair],
) -> Result<Vec<ReportRow>> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut groups: BTreeMap<(RangeTag, Phenomenon, String), (usize, usize)> = BTreeMap::new();
    for p in pairs {
        let pg = scorer.p_grammatical(&p.grammatical)?;
        let pc = scorer.p_grammatical(&p.contrast)?;
        let e = groups
            .entry((p.range, p.phenomenon, p.template.clone()))
            .or_insert((0, 0));
        e.1 += 2;
        if pg > 0.5 {
            e.0 += 1;
        }
        if pc < 0.5 {
            e.0 += 1;
        }
    }
    Ok(groups
        .into_iter()
        .map(|((range, phenomenon, template), (correct, n))| ReportRow {
            phenomenon,
            range,
            template,
            contrast: None,
            accuracy: correct as f64 / n as f64,
            n_items: n,
        })
        .collect())
}

/// Per-row competition of models by descending accuracy with tied ranks
/// averaged, then the mean over rows per model.
/// `accuracy_matrix[model][row]`.
pub fn mean_arithmetic_rank(accuracy_matrix: &[Vec<f64>]) -> Result<Vec<f64>> {
    rank_summary(accuracy_matrix, TieRule::Average)
}

/// Variant with competition ("min") ranking: tied models all receive
/// 1 + the number of strictly better models.
pub fn mean_arithmetic_rank_min(accuracy_matrix: &[Vec<f64>]) -> Result<Vec<f64>> {
    rank_summary(accuracy_matrix, TieRule::Min)
}

enum TieRule {
    Average,
    Min,
}

fn rank_summary(matrix: &[Vec<f64>], tie: TieRule) -> Result<Vec<f64>> {
    if matrix.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let rows = matrix[0].len();
    if rows == 0 || matrix.iter().any(|m| m.len() != rows) {
        return Err(EvalError::RaggedMatrix);
    }
    let mut sums = vec![0.0; matrix.len()];
    for r in 0..rows {
        let col: Vec<f64> = matrix.iter().map(|m| m[r]).collect();
        for (i, &v) in col.iter().enumerate() {
            let better = col.iter().filter(|&&w| w > v).count();
            let tied = col.iter().filter(|&&w| w == v).count();
            let rank = match tie {
                TieRule::Min => (better + 1) as f64,
                // A tied block occupies ranks better+1 ..= better+tied;
                // its average is better + (tied + 1) / 2.
                TieRule::Average => better as f64 + (tied as f64 + 1.0) / 2.0,
            };
            sums[i] += rank;
        }
    }
    Ok(sums.into_iter().map(|s| s / rows as f64).collect())
}
