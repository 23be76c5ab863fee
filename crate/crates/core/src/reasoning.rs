//! Drives the frozen language model over a rendered prompt.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    llm_generate, llm_score_detailed, BackendError, GenerationParams, LlmBackend, LlmMode,
};
use crate::evaluation::normalize_answer;
use crate::prompting::PromptBundle;

#[derive(Debug, Error, PartialEq)]
pub enum ReasoningError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("answer space is empty")]
    EmptyAnswerSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    /// Length-normalized log-likelihood per candidate, in answer-space order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_scores: Option<Vec<(String, f64)>>,
    /// Probability of the positive class for binary-scored tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_score: Option<f64>,
}

impl Answer {
    pub fn open(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            candidate_scores: None,
            positive_score: None,
        }
    }
}

/// Free-form generation. A whitespace-only generation surfaces as
/// [`BackendError::EmptyGeneration`] so callers can record the failure.
pub fn answer_open(
    llm: &dyn LlmBackend,
    bundle: &PromptBundle,
    params: &GenerationParams,
) -> Result<Answer, ReasoningError> {
    Ok(Answer::open(llm_generate(llm, &bundle.rendered, params)?))
}

fn scoring_prompt(bundle: &PromptBundle) -> String {
    format!("{} ", bundle.rendered)
}

fn candidate_scores(
    llm: &dyn LlmBackend,
    bundle: &PromptBundle,
    candidates: &[String],
) -> Result<Vec<(String, f64)>, ReasoningError> {
    let prompt = scoring_prompt(bundle);
    candidates
        .iter()
        .map(|c| Ok((c.clone(), llm_score_detailed(llm, &prompt, c)?.normalized())))
        .collect()
}

/// Highest score; ties go to the lexicographically smallest candidate.
fn argmax(scores: &[(String, f64)]) -> &str {
    scores
        .iter()
        .min_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)))
        .map(|(c, _)| c.as_str())
        .expect("non-empty candidate list")
}

/// Maps free text onto the answer space: exact match after answer
/// normalization, otherwise the smallest edit distance.
pub fn nearest_candidate<'a>(text: &str, answer_space: &'a [String]) -> &'a str {
    let norm = normalize_answer(text);
    let normalized: Vec<String> = answer_space.iter().map(|c| normalize_answer(c)).collect();
    if let Some(i) = normalized
        .iter()
        .enumerate()
        .filter(|(_, c)| **c == norm)
        .map(|(i, _)| i)
        .min_by_key(|&i| &answer_space[i])
    {
        return &answer_space[i];
    }
    let best = normalized
        .iter()
        .enumerate()
        .map(|(i, c)| (strsim::levenshtein(&norm, c), &answer_space[i]))
        .min()
        .expect("non-empty answer space");
    best.1
}

/// Close-ended answer: the candidate with the highest length-normalized
/// log-likelihood after `Short Answer: `. Generate-only backends fall back
/// to generating and mapping onto the nearest candidate.
pub fn answer_close(
    llm: &dyn LlmBackend,
    bundle: &PromptBundle,
    answer_space: &[String],
    params: &GenerationParams,
) -> Result<Answer, ReasoningError> {
    if answer_space.is_empty() {
        return Err(ReasoningError::EmptyAnswerSpace);
    }
    if llm.mode() == LlmMode::RemoteGenerateOnly {
        let generated = llm_generate(llm, &bundle.rendered, params)?;
        return Ok(Answer::open(nearest_candidate(&generated, answer_space)));
    }
    let scores = candidate_scores(llm, bundle, answer_space)?;
    Ok(Answer {
        text: argmax(&scores).to_string(),
        candidate_scores: Some(scores),
        positive_score: None,
    })
}

/// Two-way softmax over `exp(s+)` and `exp(s-)`, written in a form that
/// cannot overflow.
pub fn binary_probability(positive: f64, negative: f64) -> f64 {
    1.0 / (1.0 + (negative - positive).exp())
}

/// Binary scoring for ROC-AUC tasks. Needs a scoring backend.
pub fn score_binary(
    llm: &dyn LlmBackend,
    bundle: &PromptBundle,
    positive: &str,
    negative: &str,
) -> Result<Answer, ReasoningError> {
    if llm.mode() != LlmMode::LocalScored {
        return Err(BackendError::ScoringUnsupported(llm.identity().to_string()).into());
    }
    let scores = candidate_scores(llm, bundle, &[positive.to_string(), negative.to_string()])?;
    let p = binary_probability(scores[0].1, scores[1].1);
    Ok(Answer {
        text: argmax(&scores).to_string(),
        candidate_scores: Some(scores),
        positive_score: Some(p),
    })
}
