//! Renders visual descriptions and a task question into prompt text.
//!
//! A block looks like:
//!
//! ```text
//! Tags: dog, pet
//! Attributes: has a tail
//! Captions:
//! a dog on a couch
//! a brown dog
//! OCR: this is an image with written "hello" on it
//! Question: What is in the image?
//! Short Answer:
//! ```
//!
//! Sections of absent fields are omitted. Few-shot prompts prepend solved
//! blocks, separated by a blank line, before the query block.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vision::{ScoredText, VisualDescription};

pub const LIST_JOINER: &str = ", ";
pub const SHOT_SEPARATOR: &str = "\n\n";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("description has no populated fields")]
    EmptyDescription,
    #[error("shot {0} has no answer")]
    ShotMissingAnswer(usize),
    #[error("question template needs a question but the example has none")]
    MissingQuestion,
    #[error("asked for {wanted} shots but the support set has {available} examples")]
    NotEnoughSupport { wanted: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Recognition,
    Vqa,
    Memes,
    Sentiment,
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "recognition" => Ok(Self::Recognition),
            "vqa" => Ok(Self::Vqa),
            "memes" => Ok(Self::Memes),
            "sentiment" => Ok(Self::Sentiment),
            other => Err(format!(
                "unknown task {other:?} (recognition | vqa | memes | sentiment)"
            )),
        }
    }
}

/// What the language model is asked, and what it may answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// May contain `{question}`, filled from the example.
    pub question_template: String,
    /// `None` means open-ended.
    #[serde(default)]
    pub answer_space: Option<Vec<String>>,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, question_template: impl Into<String>) -> Self {
        Self {
            kind,
            question_template: question_template.into(),
            answer_space: None,
        }
    }

    pub fn with_answer_space(mut self, space: Vec<String>) -> Self {
        self.answer_space = Some(space);
        self
    }

    pub fn default_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Recognition => Self::new(kind, "What is the main object in the image?"),
            TaskKind::Vqa => Self::new(kind, "{question}"),
            TaskKind::Memes => Self::new(kind, "Is the image hateful or not hateful?")
                .with_answer_space(vec!["hateful".into(), "not hateful".into()]),
            TaskKind::Sentiment => Self::new(
                kind,
                "Is the sentiment of the text in the image positive or negative?",
            )
            .with_answer_space(vec!["positive".into(), "negative".into()]),
        }
    }

    pub fn is_close_ended(&self) -> bool {
        self.answer_space.is_some()
    }

    /// Recognition is always close-ended; an answer space, if given, must
    /// be non-empty.
    pub fn validate(&self) -> Result<(), String> {
        match &self.answer_space {
            Some(s) if s.is_empty() => Err("answer space is empty".into()),
            None if self.kind == TaskKind::Recognition => {
                Err("recognition tasks need an answer space".into())
            }
            _ => Ok(()),
        }
    }

    pub fn question(&self, example_question: Option<&str>) -> Result<String, PromptError> {
        if self.question_template.contains("{question}") {
            let q = example_question
                .map(str::trim)
                .filter(|q| !q.is_empty())
                .ok_or(PromptError::MissingQuestion)?;
            Ok(self.question_template.replace("{question}", q))
        } else {
            Ok(self.question_template.clone())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Tags,
    Attributes,
    Captions,
    Ocr,
    Question,
    ShortAnswer,
}

impl Section {
    pub fn header(self) -> &'static str {
        match self {
            Self::Tags => "Tags:",
            Self::Attributes => "Attributes:",
            Self::Captions => "Captions:",
            Self::Ocr => "OCR:",
            Self::Question => "Question:",
            Self::ShortAnswer => "Short Answer:",
        }
    }
}

/// A solved example prepended to the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shot {
    pub description: VisualDescription,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub rendered: String,
    /// Sections of the query block, in order, with their text.
    pub parts: Vec<(Section, String)>,
    pub shots: Vec<Shot>,
}

fn join_scored(items: &[ScoredText]) -> String {
    items
        .iter()
        .map(|s| s.text.as_str())
        .collect::<Vec<_>>()
        .join(LIST_JOINER)
}

pub fn ocr_line(text: &str) -> String {
    format!("this is an image with written \"{text}\" on it")
}

fn block_parts(desc: &VisualDescription, question: &str) -> Vec<(Section, String)> {
    let mut parts = Vec::new();
    if let Some(tags) = desc.tags.as_ref().filter(|t| !t.is_empty()) {
        parts.push((Section::Tags, join_scored(tags)));
    }
    if let Some(attrs) = desc.attributes.as_ref().filter(|a| !a.is_empty()) {
        parts.push((Section::Attributes, join_scored(attrs)));
    }
    if let Some(caps) = desc.captions.as_ref().filter(|c| !c.is_empty()) {
        parts.push((Section::Captions, caps.join("\n")));
    }
    if let Some(ocr) = &desc.ocr_text {
        parts.push((Section::Ocr, ocr_line(ocr)));
    }
    parts.push((Section::Question, question.to_string()));
    parts.push((Section::ShortAnswer, String::new()));
    parts
}

fn render_parts(parts: &[(Section, String)], answer: Option<&str>) -> String {
    let mut out = String::new();
    for (i, (section, text)) in parts.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(section.header());
        match section {
            Section::Captions => {
                out.push('\n');
                out.push_str(text);
            }
            Section::ShortAnswer => {
                if let Some(a) = answer {
                    out.push(' ');
                    out.push_str(a);
                }
            }
            _ => {
                out.push(' ');
                out.push_str(text);
            }
        }
    }
    out
}

/// Renders a single query block ending in `Short Answer:`.
pub fn render_prompt(
    desc: &VisualDescription,
    question: &str,
) -> Result<PromptBundle, PromptError> {
    render_few_shot(desc, question, &[])
}

/// Renders solved shot blocks, then the query block with an open answer.
pub fn render_few_shot(
    query: &VisualDescription,
    question: &str,
    shots: &[Shot],
) -> Result<PromptBundle, PromptError> {
    if query.is_empty() {
        return Err(PromptError::EmptyDescription);
    }
    let mut blocks = Vec::with_capacity(shots.len() + 1);
    for (i, shot) in shots.iter().enumerate() {
        if shot.answer.trim().is_empty() {
            return Err(PromptError::ShotMissingAnswer(i));
        }
        if shot.description.is_empty() {
            return Err(PromptError::EmptyDescription);
        }
        let parts = block_parts(&shot.description, &shot.question);
        blocks.push(render_parts(&parts, Some(shot.answer.trim())));
    }
    let parts = block_parts(query, question);
    blocks.push(render_parts(&parts, None));
    Ok(PromptBundle {
        rendered: blocks.join(SHOT_SEPARATOR),
        parts,
        shots: shots.to_vec(),
    })
}

pub fn estimate_budget(bundle: &PromptBundle, token_counter: &dyn Fn(&str) -> usize) -> usize {
    token_counter(&bundle.rendered)
}

/// What [`fit_to_budget`] removed from the query description.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub captions_dropped: usize,
    pub attributes_dropped: usize,
    /// Still over the window after dropping everything droppable.
    pub over_budget: bool,
}

/// Renders the prompt, dropping trailing captions and then trailing
/// attributes of the query description until it fits `window` tokens. Tags,
/// OCR text, shots and the question are never touched.
pub fn fit_to_budget(
    query: &VisualDescription,
    question: &str,
    shots: &[Shot],
    token_counter: &dyn Fn(&str) -> usize,
    window: usize,
) -> Result<(PromptBundle, Truncation), PromptError> {
    let mut desc = query.clone();
    let mut trunc = Truncation::default();
    loop {
        let bundle = render_few_shot(&desc, question, shots)?;
        if estimate_budget(&bundle, token_counter) <= window {
            return Ok((bundle, trunc));
        }
        let popped = match (&mut desc.captions, &mut desc.attributes) {
            (Some(c), _) if !c.is_empty() => {
                c.pop();
                trunc.captions_dropped += 1;
                true
            }
            (_, Some(a)) if !a.is_empty() => {
                a.pop();
                trunc.attributes_dropped += 1;
                true
            }
            _ => false,
        };
        // An emptied description can no longer render; keep the last
        // renderable one.
        if !popped || desc.is_empty() {
            trunc.over_budget = true;
            return Ok((bundle, trunc));
        }
    }
}

/// Picks `n` shot indices from a support set with a fixed seed. When every
/// example is labelled and there are at least `n` distinct labels, the
/// shots come from `n` different classes; otherwise they are uniform
/// without replacement.
pub fn sample_shots(
    labels: &[Option<String>],
    n: usize,
    seed: u64,
) -> Result<Vec<usize>, PromptError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if n > labels.len() {
        return Err(PromptError::NotEnoughSupport {
            wanted: n,
            available: labels.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if labels.iter().all(Option::is_some) {
        let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            by_label
                .entry(l.as_deref().expect("checked"))
                .or_default()
                .push(i);
        }
        if by_label.len() >= n {
            let mut classes: Vec<&Vec<usize>> = by_label.values().collect();
            classes.shuffle(&mut rng);
            return Ok(classes
                .into_iter()
                .take(n)
                .map(|members| *members.choose(&mut rng).expect("non-empty class"))
                .collect());
        }
    }
    Ok(rand::seq::index::sample(&mut rng, labels.len(), n).into_vec())
}
