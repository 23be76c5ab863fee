pub mod backends;
pub mod evaluation;
pub mod image;
pub mod pipeline;
pub mod prompting;
pub mod reasoning;
pub mod vision;
pub mod vocabulary;

pub use image::{ImageRef, ImageSource};
pub use pipeline::{AskOutcome, Pipeline, PipelineError, ReasoningMode};
