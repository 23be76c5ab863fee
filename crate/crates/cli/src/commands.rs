use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use lens_core::evaluation::{
    run_ablation, run_benchmark, run_caption_sweep, write_run_dir, BenchmarkConfig, BenchmarkRun,
    DatasetManifest, DescriptionCache, SupportSet,
};
use lens_core::prompting::{Shot, TaskKind, TaskSpec, Truncation};
use lens_core::reasoning::Answer;
use lens_core::vision::{
    load_descriptions, parse_modules, AttributeScope, DescriptionRecord, Module, ModuleConfig,
    VisualDescription,
};
use lens_core::vocabulary::{
    build_tag_vocabulary, generate_attributes, load_tag_vocabulary, save_vocabulary, Vocabulary,
    DEFAULT_ATTRIBUTE_TEMPLATE,
};
use lens_core::{ImageRef, Pipeline};

use crate::cli::{AskArgs, BenchmarkArgs, Cli, Command, DescribeArgs, VisionArgs, VocabCommand};
use crate::config::{LensConfig, Role};
use crate::error::CliError;

/// Parses an image argument. `scheme://id` names an image by id; anything
/// else is a file that must exist.
pub fn image_arg(arg: &str) -> Result<ImageRef, CliError> {
    if let Some((_, id)) = arg.split_once("://") {
        if id.is_empty() {
            return Err(CliError::Usage(format!("image URI {arg:?} has no id")));
        }
        return Ok(ImageRef::new(
            id,
            lens_core::ImageSource::Uri(arg.to_string()),
        ));
    }
    let path = Path::new(arg);
    if !path.is_file() {
        return Err(CliError::Image(format!("image {arg} not found")));
    }
    Ok(ImageRef::from_path(path))
}

/// Module configuration for a single-image request. A task picks its
/// preset; otherwise every module the configuration supports runs, plus OCR
/// when text is supplied. An explicit module list wins over both.
pub fn module_config(
    cfg: &LensConfig,
    modules: Option<&str>,
    task: Option<TaskKind>,
    has_ocr: bool,
    num_captions: Option<u32>,
    seed: u64,
) -> Result<ModuleConfig, CliError> {
    let mut mc = match task {
        Some(t) => ModuleConfig::for_task(t),
        None => {
            let mut m = cfg.available_modules();
            if has_ocr {
                m.insert(Module::Ocr);
            }
            ModuleConfig {
                attribute_scope: AttributeScope::TopTagged(1),
                ..ModuleConfig::memes().with_enabled(m)
            }
        }
    };
    if let Some(list) = modules {
        mc = mc.with_enabled(parse_modules(list).map_err(CliError::Usage)?);
    }
    if let Some(n) = num_captions {
        mc.num_captions = n;
    }
    mc.caption_seed = seed;
    mc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(mc)
}

/// Task for a single-image question. A given question replaces the task's
/// fixed one; a given answer space makes it close-ended.
pub fn task_spec(
    task: Option<TaskKind>,
    question: Option<&str>,
    answer_space: Option<Vec<String>>,
) -> Result<TaskSpec, CliError> {
    let mut spec = match task {
        Some(t) => TaskSpec::default_for(t),
        None => TaskSpec::new(TaskKind::Vqa, "{question}"),
    };
    if question.is_some() {
        spec.question_template = "{question}".into();
    }
    if let Some(space) = answer_space {
        spec.answer_space = Some(space);
    }
    spec.validate().map_err(CliError::Usage)?;
    Ok(spec)
}

/// Loads a support manifest and describes it with `mc`.
pub fn load_support(
    pipeline: &Pipeline,
    path: &Path,
    mc: &ModuleConfig,
) -> Result<SupportSet, CliError> {
    let manifest = DatasetManifest::load(path)?;
    Ok(SupportSet::describe(
        pipeline,
        &manifest,
        mc,
        &DescriptionCache::new(),
    ))
}

/// Draws shots for `key` from a described support set.
pub fn draw_shots(
    support: &SupportSet,
    key: &str,
    n: usize,
    seed: u64,
    task: &TaskSpec,
    mc: &ModuleConfig,
) -> Result<Vec<Shot>, CliError> {
    let bench = BenchmarkConfig {
        seed,
        ..Default::default()
    };
    support
        .shots(key, n, seed, task, &bench, mc)
        .map_err(CliError::Config)
}

/// What `ask --trace` writes.
#[derive(Debug, Serialize, Deserialize)]
pub struct AskTrace {
    pub prompt: String,
    pub answer: Answer,
    pub truncation: Truncation,
    pub description: VisualDescription,
    pub backends: std::collections::BTreeMap<String, String>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = LensConfig::load_or_default(cli.config.as_deref())?;
    for (role, spec) in [
        (Role::Encoder, &cli.backend_encoder),
        (Role::Captioner, &cli.backend_captioner),
        (Role::Llm, &cli.backend_llm),
    ] {
        if let Some(s) = spec {
            cfg.apply_override(role, s)?;
        }
    }
    match cli.command {
        Command::Describe(a) => describe(&cfg, a, cli.seed),
        Command::Ask(a) => ask(&cfg, a, cli.seed),
        Command::Benchmark(a) => benchmark(&cfg, a, cli.seed),
        Command::Vocab(v) => vocab(&cfg, v),
        Command::Serve(a) => {
            if let Some(addr) = a.addr {
                cfg.server.addr = addr;
            }
            if let Some(ttl) = a.session_ttl {
                cfg.server.session_ttl_secs = ttl;
            }
            let rt = tokio::runtime::Runtime::new()
                .map_err(|e| CliError::Config(format!("cannot start runtime: {e}")))?;
            rt.block_on(crate::server::serve(cfg))
        }
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text)
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", p.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}").map_err(|e| CliError::Config(e.to_string()))
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("values serialize")
}

fn vision_config(
    cfg: &LensConfig,
    v: &VisionArgs,
    seed: u64,
) -> Result<(ImageRef, ModuleConfig), CliError> {
    let image = image_arg(&v.image)?;
    let mc = module_config(
        cfg,
        v.modules.as_deref(),
        v.task,
        v.ocr.is_some(),
        v.num_captions,
        seed,
    )?;
    Ok((image, mc))
}

fn describe(cfg: &LensConfig, a: DescribeArgs, seed: u64) -> Result<(), CliError> {
    let (image, mc) = vision_config(cfg, &a.vision, seed)?;
    let pipeline = cfg.pipeline()?;
    let description = pipeline.describe(&image, &mc, a.vision.ocr.as_deref())?;
    let record = DescriptionRecord {
        image_id: image.id.clone(),
        description,
        error: None,
        config_hash: mc.hash(),
        backends: pipeline.vision().identities(),
    };
    write_output(a.out.as_deref(), &to_json(&record))
}

fn ask(cfg: &LensConfig, a: AskArgs, seed: u64) -> Result<(), CliError> {
    if a.shots > 0 && a.support.is_none() {
        return Err(CliError::Usage("--shots needs --support".into()));
    }
    let (image, mc) = vision_config(cfg, &a.vision, seed)?;
    let task = task_spec(a.vision.task, a.question.as_deref(), a.answer_space)?;
    // Fail on a missing question before any backend work.
    task.question(a.question.as_deref())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let pipeline = cfg.pipeline()?;
    let description = pipeline.describe(&image, &mc, a.vision.ocr.as_deref())?;
    let shots = match &a.support {
        Some(path) if a.shots > 0 => {
            let support = load_support(&pipeline, path, &mc)?;
            draw_shots(&support, &image.id, a.shots, seed, &task, &mc)?
        }
        _ => Vec::new(),
    };
    let out = pipeline.ask(&description, &task, a.question.as_deref(), &shots)?;
    if let Some(path) = &a.trace {
        let trace = AskTrace {
            prompt: out.prompt.rendered.clone(),
            answer: out.answer.clone(),
            truncation: out.truncation,
            description,
            backends: pipeline.identities(),
        };
        write_output(Some(path), &to_json(&trace))?;
    }
    write_output(None, &out.answer.text)
}

/// Parses an ablation grid: one module list per line, `#` starts a comment.
pub fn parse_grid(text: &str) -> Result<Vec<BTreeSet<Module>>, CliError> {
    let grid: Vec<BTreeSet<Module>> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| parse_modules(l).map_err(CliError::Usage))
        .collect::<Result<_, _>>()?;
    if grid.is_empty() {
        return Err(CliError::Usage("ablation grid has no rows".into()));
    }
    if let Some(bad) = grid.iter().position(BTreeSet::is_empty) {
        return Err(CliError::Usage(format!(
            "ablation grid row {} is empty",
            bad + 1
        )));
    }
    Ok(grid)
}

/// One line of an ablation or sweep summary.
#[derive(Debug, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub failures: usize,
    pub fingerprint: String,
}

fn summary_row(variant: String, run: &BenchmarkRun) -> SummaryRow {
    SummaryRow {
        variant,
        metric: run.metric.metric.to_string(),
        value: run.metric.value,
        n: run.metric.n,
        failures: run.metric.failures,
        fingerprint: run.metric.config_fingerprint.clone(),
    }
}

fn benchmark(cfg: &LensConfig, a: BenchmarkArgs, seed: u64) -> Result<(), CliError> {
    if a.shots > 0 && a.support.is_none() {
        return Err(CliError::Usage("--shots needs --support".into()));
    }
    if let Some(r) = a.max_failure_rate {
        if !(0.0..=1.0).contains(&r) {
            return Err(CliError::Usage(
                "--max-failure-rate must be in [0, 1]".into(),
            ));
        }
    }
    let manifest = DatasetManifest::load(&a.manifest)?;
    let support = a.support.as_ref().map(DatasetManifest::load).transpose()?;
    let grid = a
        .ablate
        .as_ref()
        .map(|p| {
            std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))
                .and_then(|t| parse_grid(&t))
        })
        .transpose()?;
    let modules = a
        .modules
        .as_deref()
        .map(|m| {
            parse_modules(m)
                .map(|set| ModuleConfig::for_task(manifest.header.task).with_enabled(set))
                .map_err(CliError::Usage)
        })
        .transpose()?;
    let bench = BenchmarkConfig {
        modules,
        shots: a.shots,
        seed,
        record_prompts: a.trace,
        ..Default::default()
    };
    let pipeline = cfg.pipeline()?;
    let cache = DescriptionCache::new();
    if let Some(p) = &a.descriptions {
        cache.preload(&load_descriptions(p)?);
    }
    std::fs::create_dir_all(&a.out)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", a.out.display())))?;

    let runs: Vec<(String, BenchmarkRun)> = if let Some(grid) = grid {
        let runs = run_ablation(
            &pipeline,
            &manifest,
            support.as_ref(),
            &bench,
            &grid,
            &cache,
        )?;
        write_variants(&a.out, "ablation.json", runs)?
    } else if let Some(counts) = &a.captions {
        let runs = run_caption_sweep(
            &pipeline,
            &manifest,
            support.as_ref(),
            &bench,
            counts,
            &cache,
        )?
        .into_iter()
        .map(|(n, r)| (format!("captions-{n}"), r))
        .collect();
        write_variants(&a.out, "sweep.json", runs)?
    } else {
        let run = run_benchmark(&pipeline, &manifest, support.as_ref(), &bench, &cache)?;
        write_run_dir(&a.out, &run)?;
        vec![(String::new(), run)]
    };

    let mut stdout = std::io::stdout().lock();
    for (label, run) in &runs {
        let m = &run.metric;
        let prefix = if label.is_empty() {
            String::new()
        } else {
            format!("{label}\t")
        };
        writeln!(
            stdout,
            "{prefix}{} {:.2} n={} failures={}",
            m.metric,
            m.percent(),
            m.n,
            m.failures
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
    }
    if let Some(max) = a.max_failure_rate {
        for (_, run) in &runs {
            run.check_failure_rate(max)?;
        }
    }
    Ok(())
}

fn write_variants(
    out: &Path,
    summary: &str,
    runs: Vec<(String, BenchmarkRun)>,
) -> Result<Vec<(String, BenchmarkRun)>, CliError> {
    let mut rows = Vec::with_capacity(runs.len());
    for (label, run) in &runs {
        write_run_dir(out.join(label), run)?;
        rows.push(summary_row(label.clone(), run));
    }
    write_output(Some(&out.join(summary)), &to_json(&rows))?;
    Ok(runs)
}

/// Sources file of `vocab build`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourcesFile {
    sources: Vec<SourceEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SourceEntry {
    /// A file with one class name per line.
    File {
        name: String,
        path: std::path::PathBuf,
    },
    Inline {
        name: String,
        classes: Vec<String>,
    },
}

fn vocab(cfg: &LensConfig, cmd: VocabCommand) -> Result<(), CliError> {
    match cmd {
        VocabCommand::Build { sources, out } => {
            let text = std::fs::read_to_string(&sources)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", sources.display())))?;
            let file: SourcesFile = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("invalid sources file: {e}")))?;
            let base = sources.parent().unwrap_or(Path::new("."));
            let lists = file
                .sources
                .into_iter()
                .map(|s| match s {
                    SourceEntry::Inline { name, classes } => Ok((name, classes)),
                    SourceEntry::File { name, path } => {
                        let p = if path.is_absolute() {
                            path
                        } else {
                            base.join(path)
                        };
                        let body = std::fs::read_to_string(&p).map_err(|e| {
                            CliError::Config(format!("cannot read {}: {e}", p.display()))
                        })?;
                        Ok((
                            name,
                            body.lines()
                                .map(str::trim)
                                .filter(|l| !l.is_empty())
                                .map(str::to_string)
                                .collect(),
                        ))
                    }
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            let vocab = build_tag_vocabulary(&lists)?;
            let n = vocab.len();
            save_vocabulary(&Vocabulary::Tags(vocab), &out)?;
            tracing::info!(tags = n, "wrote tag vocabulary");
            write_output(None, &format!("{n} tags"))
        }
        VocabCommand::Attributes {
            tags,
            llm,
            template,
            out,
        } => {
            let mut cfg = cfg.clone();
            if let Some(spec) = llm {
                cfg.apply_override(Role::Llm, &spec)?;
            }
            let vocab = load_tag_vocabulary(&tags)?;
            let llm = cfg.backends.llm.build_llm(&cfg.base_dir)?;
            let template = template.as_deref().unwrap_or(DEFAULT_ATTRIBUTE_TEMPLATE);
            let (attrs, warnings) = generate_attributes(&vocab, llm.as_ref(), template)?;
            for w in &warnings {
                tracing::warn!(class = %w.class, reason = %w.reason, "no descriptors");
            }
            save_vocabulary(&Vocabulary::Attributes(attrs), &out)?;
            write_output(
                None,
                &format!(
                    "{} classes, {} without descriptors",
                    vocab.len(),
                    warnings.len()
                ),
            )
        }
    }
}
