use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use lens_core::prompting::TaskKind;

#[derive(Debug, Parser)]
#[command(
    name = "lens",
    version,
    about = "Describe images with vision modules and answer questions about them with a language model"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Encoder backend override, KIND[=ENDPOINT].
    #[arg(long, global = true, value_name = "KIND[=ENDPOINT]")]
    pub backend_encoder: Option<String>,
    /// Captioner backend override, KIND[=ENDPOINT].
    #[arg(long, global = true, value_name = "KIND[=ENDPOINT]")]
    pub backend_captioner: Option<String>,
    /// Language model backend override, KIND[=ENDPOINT].
    #[arg(long, global = true, value_name = "KIND[=ENDPOINT]")]
    pub backend_llm: Option<String>,
    /// Seed for caption sampling and shot selection.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the visual description of one image as JSON.
    Describe(DescribeArgs),
    /// Answer a question about one image.
    Ask(AskArgs),
    /// Evaluate on a dataset manifest.
    Benchmark(BenchmarkArgs),
    /// Build tag and attribute vocabularies.
    #[command(subcommand)]
    Vocab(VocabCommand),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

/// Options shared by commands that describe a single image.
#[derive(Debug, Args)]
pub struct VisionArgs {
    /// Image path, or an id URI such as mock://cat_001.
    pub image: String,
    /// Comma-separated modules: tags, attributes, captions, ocr.
    #[arg(long)]
    pub modules: Option<String>,
    /// Task preset for modules and question.
    #[arg(long)]
    pub task: Option<TaskKind>,
    /// Text written on the image. Enables the ocr module.
    #[arg(long)]
    pub ocr: Option<String>,
    /// Number of captions to generate.
    #[arg(long)]
    pub num_captions: Option<u32>,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub vision: VisionArgs,
    /// Write the description here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AskArgs {
    #[command(flatten)]
    pub vision: VisionArgs,
    /// The question. Tasks with a fixed question do not need one.
    pub question: Option<String>,
    /// Comma-separated candidate answers; makes the question close-ended.
    #[arg(long, value_delimiter = ',')]
    pub answer_space: Option<Vec<String>>,
    /// Number of in-context examples drawn from --support.
    #[arg(long, default_value_t = 0)]
    pub shots: usize,
    /// Manifest to draw in-context examples from.
    #[arg(long)]
    pub support: Option<PathBuf>,
    /// Write prompt, answer and scores as JSON to this file.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Dataset manifest (JSONL, header line first).
    pub manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest to draw in-context examples from.
    #[arg(long)]
    pub support: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub shots: usize,
    /// Comma-separated modules; the task preset when absent.
    #[arg(long)]
    pub modules: Option<String>,
    /// Module ablation grid: one comma-separated module list per line.
    #[arg(long, conflicts_with = "captions")]
    pub ablate: Option<PathBuf>,
    /// Caption-count sweep, e.g. 1,5,20,50.
    #[arg(long, value_delimiter = ',')]
    pub captions: Option<Vec<usize>>,
    /// Precomputed descriptions (JSONL) to reuse.
    #[arg(long)]
    pub descriptions: Option<PathBuf>,
    /// Exit with an error when more than this fraction of examples fail.
    #[arg(long)]
    pub max_failure_rate: Option<f64>,
    /// Keep rendered prompts in records.jsonl.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Subcommand)]
pub enum VocabCommand {
    /// Merge class-name lists into a tag vocabulary.
    Build {
        /// JSON file listing the sources.
        #[arg(long)]
        sources: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate descriptors for every tag with the language model.
    Attributes {
        #[arg(long)]
        tags: PathBuf,
        /// Language model backend, KIND[=ENDPOINT].
        #[arg(long, value_name = "KIND[=ENDPOINT]")]
        llm: Option<String>,
        /// Prompt template containing {classname}.
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address; overrides the config file.
    #[arg(long)]
    pub addr: Option<String>,
    /// Idle session lifetime in seconds; overrides the config file.
    #[arg(long)]
    pub session_ttl: Option<u64>,
}
