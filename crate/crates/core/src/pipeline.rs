//! Wires vision modules, prompting and reasoning into one object. The CLI,
//! the HTTP service and the benchmark harness all go through [`Pipeline`],
//! so identical inputs render identical prompts everywhere.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendSet, GenerationParams, LlmBackend, LlmMode};
use crate::image::ImageRef;
use crate::prompting::{
    fit_to_budget, PromptBundle, PromptError, Shot, TaskKind, TaskSpec, Truncation,
};
use crate::reasoning::{answer_close, answer_open, score_binary, Answer, ReasoningError};
use crate::vision::{ModuleConfig, VisionError, VisionStack, VisualDescription};
use crate::vocabulary::{AttributeVocabulary, TagVocabulary};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
}

/// How an answer is obtained from the language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ReasoningMode {
    Open,
    Close { answer_space: Vec<String> },
    Binary { positive: String, negative: String },
}

impl ReasoningMode {
    /// Memes with a two-way answer space are binary-scored (first entry is
    /// the positive class); other answer spaces are close-ended.
    pub fn for_task(task: &TaskSpec) -> Self {
        match &task.answer_space {
            Some(space) if task.kind == TaskKind::Memes && space.len() == 2 => Self::Binary {
                positive: space[0].clone(),
                negative: space[1].clone(),
            },
            Some(space) => Self::Close {
                answer_space: space.clone(),
            },
            None => Self::Open,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AskOutcome {
    pub prompt: PromptBundle,
    pub truncation: Truncation,
    pub answer: Answer,
}

#[derive(Clone)]
pub struct Pipeline {
    vision: VisionStack,
    llm: Arc<dyn LlmBackend>,
    params: GenerationParams,
}

impl Pipeline {
    pub fn new(
        backends: &BackendSet,
        tags: Option<&TagVocabulary>,
        attributes: Option<&AttributeVocabulary>,
    ) -> Result<Self, PipelineError> {
        Ok(Self {
            vision: VisionStack::new(backends, tags, attributes)?,
            llm: backends.llm.clone(),
            params: GenerationParams::default(),
        })
    }

    pub fn with_params(mut self, params: GenerationParams) -> Self {
        self.params = params;
        self
    }

    pub fn params(&self) -> &GenerationParams {
        &self.params
    }

    pub fn llm(&self) -> &dyn LlmBackend {
        self.llm.as_ref()
    }

    pub fn vision(&self) -> &VisionStack {
        &self.vision
    }

    pub fn identities(&self) -> BTreeMap<String, String> {
        let mut ids = self.vision.identities();
        ids.insert("llm".into(), self.llm.identity().to_string());
        ids
    }

    pub fn describe(
        &self,
        image: &ImageRef,
        config: &ModuleConfig,
        ocr: Option<&str>,
    ) -> Result<VisualDescription, PipelineError> {
        Ok(self.vision.describe(image, config, ocr)?)
    }

    /// Renders the prompt, trimming captions then attributes to the
    /// backend's context window when it has one.
    pub fn build_prompt(
        &self,
        description: &VisualDescription,
        question: &str,
        shots: &[Shot],
    ) -> Result<(PromptBundle, Truncation), PipelineError> {
        let window = self.llm.context_window().unwrap_or(usize::MAX);
        let llm = self.llm.clone();
        let counter = move |s: &str| llm.count_tokens(s);
        Ok(fit_to_budget(
            description,
            question,
            shots,
            &counter,
            window,
        )?)
    }

    pub fn reason(
        &self,
        prompt: &PromptBundle,
        mode: &ReasoningMode,
    ) -> Result<Answer, PipelineError> {
        let llm = self.llm.as_ref();
        Ok(match mode {
            ReasoningMode::Open => answer_open(llm, prompt, &self.params)?,
            ReasoningMode::Close { answer_space } => {
                answer_close(llm, prompt, answer_space, &self.params)?
            }
            ReasoningMode::Binary { positive, negative } => {
                score_binary(llm, prompt, positive, negative)?
            }
        })
    }

    /// Interactive question answering. Binary tasks degrade to close-ended
    /// matching on generate-only backends.
    pub fn ask(
        &self,
        description: &VisualDescription,
        task: &TaskSpec,
        question: Option<&str>,
        shots: &[Shot],
    ) -> Result<AskOutcome, PipelineError> {
        let q = task.question(question)?;
        let (prompt, truncation) = self.build_prompt(description, &q, shots)?;
        let mut mode = ReasoningMode::for_task(task);
        if let ReasoningMode::Binary { positive, negative } = &mode {
            if self.llm.mode() == LlmMode::RemoteGenerateOnly {
                mode = ReasoningMode::Close {
                    answer_space: vec![positive.clone(), negative.clone()],
                };
            }
        }
        let answer = self.reason(&prompt, &mode)?;
        Ok(AskOutcome {
            prompt,
            truncation,
            answer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::MockWorld;

    #[test]
    fn ask_renders_and_answers() {
        let world = MockWorld::default();
        let backends = BackendSet::from_world(&world);
        let tags = TagVocabulary::from_classes("t", &["cat", "dog"]).unwrap();
        let p = Pipeline::new(&backends, Some(&tags), None).unwrap();
        let mut cfg = ModuleConfig::recognition();
        cfg.enabled_modules = [crate::vision::Module::Tags].into();
        let desc = p.describe(&ImageRef::from_id("x"), &cfg, None).unwrap();
        let task = TaskSpec::default_for(TaskKind::Recognition)
            .with_answer_space(vec!["cat".into(), "dog".into()]);
        let out = p.ask(&desc, &task, None, &[]).unwrap();
        assert!(out.prompt.rendered.starts_with("Tags: "));
        // The mock favours whichever tag is listed first.
        let first = &desc.tags.as_ref().unwrap()[0].text;
        assert_eq!(&out.answer.text, first);
    }

    #[test]
    fn memes_mode_is_binary() {
        let t = TaskSpec::default_for(TaskKind::Memes);
        assert_eq!(
            ReasoningMode::for_task(&t),
            ReasoningMode::Binary {
                positive: "hateful".into(),
                negative: "not hateful".into()
            }
        );
        assert_eq!(
            ReasoningMode::for_task(&TaskSpec::default_for(TaskKind::Vqa)),
            ReasoningMode::Open
        );
    }
}
