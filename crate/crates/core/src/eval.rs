//! Verdict parsing, judging and scoring.
//!
//! MedDLC overall is the unweighted mean of positive and negative accuracy,
//! not pooled accuracy. LLM-score is the mean over regions of the mean of
//! four factor ratings. Values keep full precision; [`round1`] is applied
//! only when formatting.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::gateway::{Gateway, GatewayError, GenerationRequest};
use crate::prompt::{PromptError, PromptLibrary, RegionContext, RenderedPrompt};
use crate::qa::{ExpectedAnswer, Polarity, QAItem};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate QA set: {0}")]
    Degenerate(String),
    #[error("qa {qa_id}: {source}")]
    Judge { qa_id: String, source: GatewayError },
    #[error("region {region}: {source}")]
    Rating { region: String, source: GatewayError },
    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error("unparseable ratings: {0:?}")]
    UnparseableRatings(String),
    #[error("no regions to score")]
    NoRegions,
    #[error("answer for unknown qa id {0}")]
    UnknownQa(String),
    #[error("qa id {0} answered twice")]
    DuplicateAnswer(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
    Unparseable,
}

impl Verdict {
    pub fn matches(&self, expected: ExpectedAnswer) -> bool {
        matches!((self, expected), (Self::Yes, ExpectedAnswer::Yes) | (Self::No, ExpectedAnswer::No))
    }
}

/// Case-insensitive first token of the first non-blank line; surrounding
/// punctuation such as `**Yes.**` is ignored.
pub fn parse_verdict(judge_text: &str) -> Verdict {
    let Some(line) = judge_text.lines().find(|l| !l.trim().is_empty()) else { return Verdict::Unparseable };
    let token = line.split_whitespace().next().unwrap_or("");
    let token = token.trim_matches(|c: char| !c.is_alphanumeric());
    if token.eq_ignore_ascii_case("yes") {
        Verdict::Yes
    } else if token.eq_ignore_ascii_case("no") {
        Verdict::No
    } else {
        Verdict::Unparseable
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgedAnswer {
    pub qa_id: String,
    pub verdict: Verdict,
    pub correct: bool,
    pub judge_raw: String,
    pub judge_backend: String,
}

impl JudgedAnswer {
    pub fn from_reply(qa: &QAItem, judge_raw: String, judge_backend: &str) -> Self {
        let verdict = parse_verdict(&judge_raw);
        Self {
            qa_id: qa.qa_id.clone(),
            correct: verdict.matches(qa.expected_answer),
            verdict,
            judge_raw,
            judge_backend: judge_backend.into(),
        }
    }
}

pub fn verification_request(caption: &str, qa: &QAItem, prompts: &PromptLibrary) -> Result<GenerationRequest, PromptError> {
    Ok(GenerationRequest::judge(prompts.render_judge_verification_prompt(caption, qa)?, qa.qa_id.clone()))
}

pub fn judge_qa(caption: &str, qa: &QAItem, judge: &Gateway, prompts: &PromptLibrary) -> Result<JudgedAnswer, EvalError> {
    let req = verification_request(caption, qa, prompts)?;
    let out = judge.generate(&req).map_err(|source| EvalError::Judge { qa_id: qa.qa_id.clone(), source })?;
    Ok(JudgedAnswer::from_reply(qa, out.text, &judge.spec().name))
}

/// Judges every item against the caption of its region, in parallel.
/// `captions` maps region key to caption text.
pub fn judge_all(
    captions: &BTreeMap<String, String>,
    items: &[QAItem],
    judge: &Gateway,
    prompts: &PromptLibrary,
    parallelism: usize,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<Vec<Result<JudgedAnswer, EvalError>>, EvalError> {
    let mut reqs = Vec::with_capacity(items.len());
    for qa in items {
        let caption =
            captions.get(&qa.region_id).ok_or_else(|| EvalError::Degenerate(format!("no caption for region {}", qa.region_id)))?;
        reqs.push(verification_request(caption, qa, prompts)?);
    }
    let out = judge.run_batch(&reqs, parallelism, progress);
    Ok(out
        .into_iter()
        .zip(items)
        .map(|(r, qa)| match r {
            Ok(c) => Ok(JudgedAnswer::from_reply(qa, c.text, &judge.spec().name)),
            Err(source) => Err(EvalError::Judge { qa_id: qa.qa_id.clone(), source }),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QaCounts {
    pub pos_total: u64,
    pub pos_correct: u64,
    pub neg_total: u64,
    pub neg_correct: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedDlcScore {
    pub pos_accuracy: f64,
    pub neg_accuracy: f64,
    pub overall: f64,
    pub counts: QaCounts,
}

impl MedDlcScore {
    pub fn from_counts(counts: QaCounts) -> Result<Self, EvalError> {
        if counts.pos_total == 0 || counts.neg_total == 0 {
            return Err(EvalError::Degenerate(format!("{} positive and {} negative items", counts.pos_total, counts.neg_total)));
        }
        let pos_accuracy = 100.0 * counts.pos_correct as f64 / counts.pos_total as f64;
        let neg_accuracy = 100.0 * counts.neg_correct as f64 / counts.neg_total as f64;
        Ok(Self::from_accuracies(pos_accuracy, neg_accuracy, counts))
    }

    pub fn from_accuracies(pos_accuracy: f64, neg_accuracy: f64, counts: QaCounts) -> Self {
        Self { pos_accuracy, neg_accuracy, overall: (pos_accuracy + neg_accuracy) / 2.0, counts }
    }
}

pub fn count_answers(answers: &[JudgedAnswer], items: &[QAItem]) -> Result<QaCounts, EvalError> {
    let by_id: HashMap<&str, &QAItem> = items.iter().map(|q| (q.qa_id.as_str(), q)).collect();
    let mut seen = std::collections::HashSet::new();
    let mut c = QaCounts::default();
    for a in answers {
        let qa = by_id.get(a.qa_id.as_str()).ok_or_else(|| EvalError::UnknownQa(a.qa_id.clone()))?;
        if !seen.insert(a.qa_id.as_str()) {
            return Err(EvalError::DuplicateAnswer(a.qa_id.clone()));
        }
        let correct = a.verdict.matches(qa.expected_answer) as u64;
        match qa.polarity {
            Polarity::Positive => {
                c.pos_total += 1;
                c.pos_correct += correct;
            }
            Polarity::Negative => {
                c.neg_total += 1;
                c.neg_correct += correct;
            }
        }
    }
    Ok(c)
}

pub fn score_meddlc(answers: &[JudgedAnswer], items: &[QAItem]) -> Result<MedDlcScore, EvalError> {
    MedDlcScore::from_counts(count_answers(answers, items)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratings {
    pub fluency: u32,
    pub relevance: u32,
    pub factual_correctness: u32,
    pub clinical_plausibility: u32,
}

impl Ratings {
    pub fn mean(&self) -> f64 {
        (self.fluency + self.relevance + self.factual_correctness + self.clinical_plausibility) as f64 / 4.0
    }
}

/// Accepts exactly one line `RATINGS: a b c d` (surrounding whitespace
/// allowed) with four integers in 0..=100.
pub fn parse_ratings(judge_text: &str) -> Result<Ratings, EvalError> {
    let bad = || EvalError::UnparseableRatings(judge_text.chars().take(120).collect());
    let text = judge_text.trim();
    if text.contains('\n') {
        return Err(bad());
    }
    let rest = text.strip_prefix("RATINGS:").ok_or_else(bad)?;
    let values: Vec<u32> = rest
        .split_whitespace()
        .map(|t| if !t.is_empty() && t.len() <= 3 && t.bytes().all(|b| b.is_ascii_digit()) { t.parse().ok() } else { None })
        .collect::<Option<_>>()
        .ok_or_else(bad)?;
    match values[..] {
        [a, b, c, d] if values.iter().all(|v| *v <= 100) => {
            Ok(Ratings { fluency: a, relevance: b, factual_correctness: c, clinical_plausibility: d })
        }
        _ => Err(bad()),
    }
}

const REASK: &str = "\n\nYour previous reply did not follow the required format. Reply with only the RATINGS line.";

/// The prompt used for the single re-ask after an unparseable rating reply.
pub fn reask_prompt(p: &RenderedPrompt) -> RenderedPrompt {
    let text = format!("{}{REASK}", p.text);
    RenderedPrompt { digest: sha256_hex(text.as_bytes()), text, ..p.clone() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRating {
    pub region: String,
    pub ratings: Ratings,
    pub region_score: f64,
    pub judge_raw: String,
    pub reasked: bool,
}

/// Rates one caption, re-asking once if the reply does not parse.
/// `images` are attached when the judge is configured to see the region.
pub fn rate_region(
    region: &str,
    caption: &str,
    ctx: &RegionContext,
    images: Vec<crate::gateway::RequestImage>,
    judge: &Gateway,
    prompts: &PromptLibrary,
) -> Result<RegionRating, EvalError> {
    let prompt = prompts.render_llmscore_prompt(caption, ctx)?;
    let call = |p: RenderedPrompt| {
        let mut req = GenerationRequest::judge(p, region);
        req.images = images.clone();
        judge.generate(&req).map_err(|source| EvalError::Rating { region: region.into(), source })
    };
    let first = call(prompt.clone())?;
    let (raw, reasked) = match parse_ratings(&first.text) {
        Ok(_) => (first.text, false),
        Err(_) => (call(reask_prompt(&prompt))?.text, true),
    };
    let ratings = parse_ratings(&raw)?;
    Ok(RegionRating { region: region.into(), region_score: ratings.mean(), ratings, judge_raw: raw, reasked })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmScoreCard {
    pub regions: Vec<RegionRating>,
    pub model_score: f64,
}

pub fn score_llm(regions: Vec<RegionRating>) -> Result<LlmScoreCard, EvalError> {
    if regions.is_empty() {
        return Err(EvalError::NoRegions);
    }
    let model_score = regions.iter().map(|r| r.ratings.mean()).sum::<f64>() / regions.len() as f64;
    Ok(LlmScoreCard { regions, model_score })
}

/// Unweighted mean over datasets; `None` when empty.
pub fn aggregate_across_datasets<K>(per_dataset: &BTreeMap<K, f64>) -> Option<f64> {
    (!per_dataset.is_empty()).then(|| per_dataset.values().sum::<f64>() / per_dataset.len() as f64)
}

/// Half-up rounding to one decimal, robust to binary representation
/// (63.55 becomes 63.6).
pub fn round1(x: f64) -> f64 {
    ((x * 10.0) + 0.5 + 1e-9).floor() / 10.0
}

pub fn fmt1(x: f64) -> String {
    format!("{:.1}", round1(x))
}
