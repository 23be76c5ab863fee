use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::{DatasetManifest, ManifestExample};
use super::metrics::{
    accuracy, mean_per_class_accuracy, roc_auc, vqa_accuracy, vqa_score, EvalRecord, MetricKind,
    MetricResult,
};
use super::reference::lens_reference;
use super::EvalError;
use crate::backends::mock::stable_seed;
use crate::image::ImageRef;
use crate::pipeline::Pipeline;
use crate::prompting::{sample_shots, Shot, TaskSpec};
use crate::reasoning::Answer;
use crate::vision::{attach_ocr, DescriptionRecord, Module, ModuleConfig, VisualDescription};

/// Options of one benchmark run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    /// Vision modules to run; the task preset when absent.
    pub modules: Option<ModuleConfig>,
    pub shots: usize,
    pub seed: u64,
    /// Modules whose output reaches the prompt. Everything described when
    /// absent.
    pub prompt_modules: Option<BTreeSet<Module>>,
    /// Keep only the first `n` captions in the prompt.
    pub caption_prefix: Option<usize>,
    /// Keep the rendered prompt in each record. Does not affect results.
    #[serde(skip)]
    pub record_prompts: bool,
}

impl BenchmarkConfig {
    pub fn module_config(&self, manifest: &DatasetManifest) -> ModuleConfig {
        let mut cfg = self
            .modules
            .clone()
            .unwrap_or_else(|| ModuleConfig::for_task(manifest.header.task));
        cfg.caption_seed = self.seed;
        cfg
    }

    /// Applies OCR text, the prompt module filter and the caption prefix.
    pub fn prepare(
        &self,
        desc: &VisualDescription,
        ocr: Option<&str>,
        cfg: &ModuleConfig,
    ) -> VisualDescription {
        let mut d = desc.clone();
        if let (true, Some(text)) = (cfg.is_enabled(Module::Ocr), ocr) {
            d = attach_ocr(d, text);
        }
        if let Some(m) = &self.prompt_modules {
            d = d.restricted_to(m);
        }
        if let Some(n) = self.caption_prefix {
            d = d.with_caption_prefix(n);
        }
        d
    }
}

/// Describes each (image, module configuration) pair once. OCR text is
/// attached per example, so it is not part of the cached value.
#[derive(Default)]
pub struct DescriptionCache {
    entries: Mutex<HashMap<(String, String), VisualDescription>>,
    misses: AtomicUsize,
}

impl DescriptionCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeds the cache from a descriptions file. Records with errors are
    /// skipped.
    pub fn preload(&self, records: &[DescriptionRecord]) {
        let mut entries = self.entries.lock().expect("cache lock");
        for r in records.iter().filter(|r| r.error.is_none()) {
            let mut d = r.description.clone();
            d.ocr_text = None;
            entries.insert((r.image_id.clone(), r.config_hash.clone()), d);
        }
    }

    /// Number of descriptions computed rather than served from the cache.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_describe(
        &self,
        pipeline: &Pipeline,
        image: &ImageRef,
        config: &ModuleConfig,
    ) -> Result<(VisualDescription, bool), String> {
        let key = (image.id.clone(), config.hash());
        if let Some(d) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok((d.clone(), true));
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let d = pipeline
            .describe(image, config, None)
            .map_err(|e| e.to_string())?;
        self.entries
            .lock()
            .expect("cache lock")
            .insert(key, d.clone());
        Ok((d, false))
    }
}

/// Wall-clock timings, kept apart from the records so those stay
/// reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trace {
    pub example_id: String,
    pub describe_ms: f64,
    pub reason_ms: f64,
    pub cached: bool,
}

/// Everything that determines the outcome of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFingerprint {
    pub dataset: String,
    pub split: String,
    pub num_examples: usize,
    pub config: BenchmarkConfig,
    pub module_config: ModuleConfig,
    pub backends: BTreeMap<String, String>,
    pub generation: crate::backends::GenerationParams,
}

impl RunFingerprint {
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("fingerprint serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkRun {
    pub metric: MetricResult,
    pub records: Vec<EvalRecord>,
    pub traces: Vec<Trace>,
    pub fingerprint: RunFingerprint,
}

impl BenchmarkRun {
    pub fn failure_rate(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.metric.failures as f64 / self.records.len() as f64
        }
    }

    pub fn check_failure_rate(&self, max: f64) -> Result<(), EvalError> {
        let rate = self.failure_rate();
        if rate > max {
            Err(EvalError::FailureRateExceeded { rate, max })
        } else {
            Ok(())
        }
    }
}

pub fn prompt_hash(rendered: &str) -> String {
    hex::encode(&Sha256::digest(rendered.as_bytes())[..8])
}

fn compute_metric(manifest: &DatasetManifest, records: &[EvalRecord]) -> Result<f64, EvalError> {
    let h = &manifest.header;
    Ok(match h.evaluation {
        MetricKind::Accuracy => accuracy(records)?,
        MetricKind::MeanPerClass => mean_per_class_accuracy(records)?,
        MetricKind::VqaAccuracy => vqa_accuracy(records)?,
        MetricKind::RocAuc => {
            let positive = h.positive_label.as_deref().expect("validated manifest");
            roc_auc(records, positive)?
        }
    })
}

fn per_example_score(metric: MetricKind, example: &ManifestExample, answer: &Answer) -> f64 {
    match metric {
        MetricKind::Accuracy | MetricKind::MeanPerClass => {
            f64::from(example.label.as_deref() == Some(answer.text.as_str()))
        }
        MetricKind::VqaAccuracy => vqa_score(&answer.text, &example.answers),
        MetricKind::RocAuc => answer.positive_score.unwrap_or(0.0),
    }
}

/// A described support set that few-shot examples are drawn from.
pub struct SupportSet {
    examples: Vec<ManifestExample>,
    labels: Vec<Option<String>>,
    descriptions: Vec<Result<VisualDescription, String>>,
}

impl SupportSet {
    /// Describes every support image with `cfg`, going through `cache`.
    pub fn describe(
        pipeline: &Pipeline,
        support: &DatasetManifest,
        cfg: &ModuleConfig,
        cache: &DescriptionCache,
    ) -> Self {
        let refs = support.image_refs();
        let descriptions = refs
            .par_iter()
            .map(|r| cache.get_or_describe(pipeline, r, cfg).map(|(d, _)| d))
            .collect();
        Self {
            examples: support.examples.clone(),
            labels: support
                .examples
                .iter()
                .map(|e| e.shot_answer().map(str::to_string))
                .collect(),
            descriptions,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Draws `n` shots for the query identified by `key`. The draw depends
    /// only on `seed` and `key`, so every query gets its own reproducible
    /// selection.
    pub fn shots(
        &self,
        key: &str,
        n: usize,
        seed: u64,
        task: &TaskSpec,
        bench: &BenchmarkConfig,
        cfg: &ModuleConfig,
    ) -> Result<Vec<Shot>, String> {
        let picked = sample_shots(&self.labels, n, stable_seed(&[&seed.to_string(), key]))
            .map_err(|e| e.to_string())?;
        picked
            .into_iter()
            .map(|i| {
                let e = &self.examples[i];
                let desc = self.descriptions[i]
                    .as_ref()
                    .map_err(|err| format!("support example {}: {err}", e.id))?;
                Ok(Shot {
                    description: bench.prepare(desc, e.ocr_text.as_deref(), cfg),
                    question: task
                        .question(e.question.as_deref())
                        .map_err(|e| e.to_string())?,
                    answer: e
                        .shot_answer()
                        .ok_or_else(|| format!("support example {} has no answer", e.id))?
                        .to_string(),
                })
            })
            .collect()
    }
}

/// Runs every example through the pipeline in parallel. A failing example
/// is recorded with its error and scores zero; the run itself fails only on
/// invalid inputs.
pub fn run_benchmark(
    pipeline: &Pipeline,
    manifest: &DatasetManifest,
    support: Option<&DatasetManifest>,
    config: &BenchmarkConfig,
    cache: &DescriptionCache,
) -> Result<BenchmarkRun, EvalError> {
    manifest.validate()?;
    let cfg = config.module_config(manifest);
    cfg.validate()?;
    let task = manifest.task_spec();
    let support = match (config.shots, support) {
        (0, _) => None,
        (_, None) => return Err(EvalError::MissingSupport),
        (n, Some(s)) => {
            manifest.check_disjoint(s)?;
            if s.examples.len() < n {
                return Err(EvalError::InvalidManifest(format!(
                    "{n} shots requested but the support set has {} examples",
                    s.examples.len()
                )));
            }
            Some(SupportSet::describe(pipeline, s, &cfg, cache))
        }
    };
    let metric_kind = manifest.header.evaluation;
    let refs = manifest.image_refs();

    let results: Vec<(EvalRecord, Trace)> = manifest
        .examples
        .par_iter()
        .zip(refs.par_iter())
        .map(|(example, image)| {
            let start = Instant::now();
            let described = cache.get_or_describe(pipeline, image, &cfg);
            let describe_ms = start.elapsed().as_secs_f64() * 1e3;
            let cached = described.as_ref().is_ok_and(|(_, c)| *c);
            let start = Instant::now();
            let outcome = described.and_then(|(desc, _)| {
                let shots = match &support {
                    Some(s) => {
                        s.shots(&example.id, config.shots, config.seed, &task, config, &cfg)?
                    }
                    None => Vec::new(),
                };
                let query = config.prepare(&desc, example.ocr_text.as_deref(), &cfg);
                pipeline
                    .ask(&query, &task, example.question.as_deref(), &shots)
                    .map_err(|e| e.to_string())
            });
            let reason_ms = start.elapsed().as_secs_f64() * 1e3;
            let record = match outcome {
                Ok(out) => EvalRecord {
                    example_id: example.id.clone(),
                    image_id: image.id.clone(),
                    per_example_score: per_example_score(metric_kind, example, &out.answer),
                    predicted: out.answer,
                    gold: example.gold(),
                    prompt_hash: Some(prompt_hash(&out.prompt.rendered)),
                    prompt: config.record_prompts.then(|| out.prompt.rendered.clone()),
                    failure: None,
                },
                Err(reason) => {
                    let mut predicted = Answer::open("");
                    if metric_kind == MetricKind::RocAuc {
                        predicted.positive_score = Some(0.0);
                    }
                    EvalRecord {
                        example_id: example.id.clone(),
                        image_id: image.id.clone(),
                        predicted,
                        gold: example.gold(),
                        per_example_score: 0.0,
                        prompt_hash: None,
                        prompt: None,
                        failure: Some(reason),
                    }
                }
            };
            let trace = Trace {
                example_id: example.id.clone(),
                describe_ms,
                reason_ms,
                cached,
            };
            (record, trace)
        })
        .collect();
    let (records, traces): (Vec<_>, Vec<_>) = results.into_iter().unzip();

    let fingerprint = RunFingerprint {
        dataset: manifest.header.name.clone(),
        split: manifest.header.split.clone(),
        num_examples: records.len(),
        config: config.clone(),
        module_config: cfg,
        backends: pipeline.identities(),
        generation: pipeline.params().clone(),
    };
    let metric = MetricResult {
        metric: metric_kind,
        value: compute_metric(manifest, &records)?,
        n: records.len(),
        failures: records.iter().filter(|r| r.failure.is_some()).count(),
        config_fingerprint: fingerprint.digest(),
    };
    tracing::info!(
        dataset = %manifest.header.name,
        metric = %metric.metric,
        value = metric.value,
        failures = metric.failures,
        "benchmark finished"
    );
    Ok(BenchmarkRun {
        metric,
        records,
        traces,
        fingerprint,
    })
}

/// Human-readable label of a module set, e.g. `tags+ocr`.
pub fn modules_label(modules: &BTreeSet<Module>) -> String {
    modules
        .iter()
        .map(Module::to_string)
        .collect::<Vec<_>>()
        .join("+")
}

/// Runs the benchmark once per module subset. Images are described once with
/// the union of the subsets; each variant only changes what reaches the
/// prompt.
pub fn run_ablation(
    pipeline: &Pipeline,
    manifest: &DatasetManifest,
    support: Option<&DatasetManifest>,
    config: &BenchmarkConfig,
    variants: &[BTreeSet<Module>],
    cache: &DescriptionCache,
) -> Result<Vec<(String, BenchmarkRun)>, EvalError> {
    let union: BTreeSet<Module> = variants.iter().flatten().copied().collect();
    let base = config.module_config(manifest).with_enabled(union);
    variants
        .iter()
        .map(|v| {
            let c = BenchmarkConfig {
                modules: Some(base.clone()),
                prompt_modules: Some(v.clone()),
                ..config.clone()
            };
            Ok((
                modules_label(v),
                run_benchmark(pipeline, manifest, support, &c, cache)?,
            ))
        })
        .collect()
}

/// Runs the benchmark with the first `n` captions for each `n`, sampling the
/// largest count once so smaller counts see a prefix of the same captions.
pub fn run_caption_sweep(
    pipeline: &Pipeline,
    manifest: &DatasetManifest,
    support: Option<&DatasetManifest>,
    config: &BenchmarkConfig,
    counts: &[usize],
    cache: &DescriptionCache,
) -> Result<Vec<(usize, BenchmarkRun)>, EvalError> {
    let max = *counts
        .iter()
        .max()
        .ok_or_else(|| EvalError::InvalidManifest("empty caption sweep".into()))?;
    if counts.contains(&0) {
        return Err(EvalError::InvalidManifest(
            "caption counts must be positive".into(),
        ));
    }
    let mut base = config.module_config(manifest);
    base.enabled_modules.insert(Module::Captions);
    base.num_captions = u32::try_from(max).unwrap_or(u32::MAX);
    counts
        .iter()
        .map(|&n| {
            let c = BenchmarkConfig {
                modules: Some(base.clone()),
                caption_prefix: Some(n),
                ..config.clone()
            };
            Ok((n, run_benchmark(pipeline, manifest, support, &c, cache)?))
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Markdown summary of a run next to the published numbers for the
/// dataset, when there are any.
pub fn render_report(run: &BenchmarkRun) -> String {
    let fp = &run.fingerprint;
    let m = &run.metric;
    let mut out = format!(
        "# {} ({})\n\n| metric | value | n | failures | fingerprint |\n|---|---|---|---|---|\n| {} | {:.2} | {} | {} | {} |\n",
        fp.dataset,
        fp.split,
        m.metric,
        m.percent(),
        m.n,
        m.failures,
        m.config_fingerprint
    );
    let reference = lens_reference(&fp.dataset, &fp.split);
    if !reference.is_empty() {
        out.push_str("\n## Published results\n\n| model | value |\n|---|---|\n");
        for (model, v) in reference {
            out.push_str(&format!("| {model} | {v:.1} |\n"));
        }
    }
    out.push_str("\n## Backends\n\n");
    for (role, id) in &fp.backends {
        out.push_str(&format!("- {role}: {id}\n"));
    }
    out
}

/// Writes `records.jsonl`, `metrics.json`, `fingerprint.json`,
/// `traces.jsonl` and `report.md` into `dir`.
pub fn write_run_dir(dir: impl AsRef<Path>, run: &BenchmarkRun) -> Result<(), EvalError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("records.jsonl"), &run.records)?;
    write_jsonl(&dir.join("traces.jsonl"), &run.traces)?;
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&run.metric).map_err(std::io::Error::from)?,
    )?;
    std::fs::write(
        dir.join("fingerprint.json"),
        serde_json::to_string_pretty(&run.fingerprint).map_err(std::io::Error::from)?,
    )?;
    std::fs::write(dir.join("report.md"), render_report(run))?;
    Ok(())
}
