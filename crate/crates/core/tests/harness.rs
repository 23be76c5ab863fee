mod common;

use std::collections::BTreeSet;

use lens_core::backends::mock::GenerationRule;
use lens_core::backends::BackendSet;
use lens_core::evaluation::{
    run_ablation, run_benchmark, write_run_dir, BenchmarkConfig, DatasetManifest, DescriptionCache,
    EvalError, MetricKind,
};
use lens_core::vision::{Module, ModuleConfig};
use lens_core::Pipeline;

#[test]
fn recognition_benchmark_scores_every_example() {
    let (world, manifest) = common::recognition_world(40, "img");
    let pipeline = common::pipeline(&world);
    let run = run_benchmark(
        &pipeline,
        &manifest,
        None,
        &BenchmarkConfig::default(),
        &DescriptionCache::new(),
    )
    .unwrap();
    assert_eq!(run.metric.metric, MetricKind::MeanPerClass);
    assert_eq!(run.records.len(), 40);
    assert_eq!(run.metric.failures, 0);
    // Answers come from scoring the answer space, so they are always in it.
    let space = manifest.header.answer_space.as_ref().unwrap();
    assert!(run
        .records
        .iter()
        .all(|r| space.contains(&r.predicted.text)));
    // Images sit near their class prompt; the mock should beat chance.
    assert!(run.metric.value > 0.2, "{}", run.metric.value);
    assert_eq!(run.records[0].example_id, manifest.examples[0].id);
}

#[test]
fn failures_are_recorded_and_score_zero() {
    let (mut world, manifest) = common::planted_vqa(10);
    // Nothing matches, so generation is empty for every example.
    world.llm.rules = vec![GenerationRule::Keyed { entries: vec![] }];
    let pipeline = common::pipeline(&world);
    let run = run_benchmark(
        &pipeline,
        &manifest,
        None,
        &BenchmarkConfig::default(),
        &DescriptionCache::new(),
    )
    .unwrap();
    assert_eq!(run.metric.failures, 10);
    assert_eq!(run.metric.value, 0.0);
    assert!(run.records.iter().all(|r| r.failure.is_some()));
    assert!(matches!(
        run.check_failure_rate(0.5),
        Err(EvalError::FailureRateExceeded { .. })
    ));
    assert!(run.check_failure_rate(1.0).is_ok());
}

#[test]
fn ablation_describes_once_and_varies_the_prompt() {
    let (world, manifest) = common::memes_world(24);
    let pipeline = common::pipeline(&world);
    let cache = DescriptionCache::new();
    let set = |m: &[Module]| m.iter().copied().collect::<BTreeSet<_>>();
    let variants = [
        set(&[Module::Ocr]),
        set(&[Module::Tags, Module::Ocr]),
        set(&[Module::Attributes, Module::Ocr]),
        set(&[Module::Captions, Module::Ocr]),
        set(&[
            Module::Tags,
            Module::Attributes,
            Module::Captions,
            Module::Ocr,
        ]),
    ];
    let cfg = BenchmarkConfig {
        record_prompts: true,
        ..Default::default()
    };
    let runs = run_ablation(&pipeline, &manifest, None, &cfg, &variants, &cache).unwrap();
    assert_eq!(cache.misses(), 24);
    let labels: Vec<&str> = runs.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(labels[0], "ocr");
    assert_eq!(labels[4], "tags+attributes+captions+ocr");
    for (label, run) in &runs {
        assert_eq!(run.metric.failures, 0, "{label}");
        let prompt = run.records[0].prompt.as_deref().unwrap();
        assert_eq!(prompt.contains("Tags:"), label.contains("tags"), "{label}");
        assert_eq!(
            prompt.contains("Captions:"),
            label.contains("captions"),
            "{label}"
        );
        assert!(prompt.contains("OCR: this is an image with written"));
        assert!((0.0..=1.0).contains(&run.metric.value));
    }
    let fingerprints: BTreeSet<&str> = runs
        .iter()
        .map(|(_, r)| r.metric.config_fingerprint.as_str())
        .collect();
    assert_eq!(fingerprints.len(), variants.len());
}

#[test]
fn few_shot_needs_support() {
    let (world, manifest) = common::planted_vqa(3);
    let pipeline = common::pipeline(&world);
    let cfg = BenchmarkConfig {
        shots: 2,
        ..Default::default()
    };
    assert!(matches!(
        run_benchmark(&pipeline, &manifest, None, &cfg, &DescriptionCache::new()),
        Err(EvalError::MissingSupport)
    ));
}

#[test]
fn run_directory_layout() {
    let (world, manifest) = common::planted_vqa(6);
    let pipeline = common::pipeline(&world);
    let run = run_benchmark(
        &pipeline,
        &manifest,
        None,
        &BenchmarkConfig::default(),
        &DescriptionCache::new(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run_dir(dir.path(), &run).unwrap();
    for f in [
        "records.jsonl",
        "metrics.json",
        "fingerprint.json",
        "traces.jsonl",
        "report.md",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let records = std::fs::read_to_string(dir.path().join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 6);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["metric"], "vqa-accuracy");
    assert_eq!(metrics["n"], 6);
    let report = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(report.contains("planted-vqa"));
}

#[test]
fn report_lists_published_numbers_for_known_datasets() {
    let (world, mut manifest) = common::recognition_world(10, "img");
    manifest.header.name = "Cifar10".into();
    manifest.header.evaluation = MetricKind::Accuracy;
    let pipeline = common::pipeline(&world);
    let run = run_benchmark(
        &pipeline,
        &manifest,
        None,
        &BenchmarkConfig::default(),
        &DescriptionCache::new(),
    )
    .unwrap();
    let report = lens_core::evaluation::render_report(&run);
    assert!(report.contains("Published results"));
    assert!(report.contains("95.7"));
}

#[test]
fn preloaded_descriptions_skip_the_vision_backends() {
    let (world, manifest) = common::recognition_world(8, "img");
    let pipeline = common::pipeline(&world);
    let cfg = BenchmarkConfig::default();
    let modules = cfg.module_config(&manifest);
    let records = pipeline.vision().describe_batch(
        &manifest
            .image_refs()
            .into_iter()
            .map(|r| (r, None))
            .collect::<Vec<_>>(),
        &modules,
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("descriptions.jsonl");
    lens_core::vision::save_descriptions(&records, &path).unwrap();

    let cache = DescriptionCache::new();
    cache.preload(&lens_core::vision::load_descriptions(&path).unwrap());
    let cached = run_benchmark(&pipeline, &manifest, None, &cfg, &cache).unwrap();
    assert_eq!(cache.misses(), 0);
    let fresh = run_benchmark(&pipeline, &manifest, None, &cfg, &DescriptionCache::new()).unwrap();
    assert_eq!(cached.records, fresh.records);
}

#[test]
fn manifest_on_disk_drives_a_run() {
    let (world, manifest) = common::planted_vqa(5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.jsonl");
    manifest.save(&path).unwrap();
    let loaded = DatasetManifest::load(&path).unwrap();
    let backends = BackendSet::from_world(&world);
    let pipeline = Pipeline::new(&backends, None, None).unwrap();
    let cfg = BenchmarkConfig {
        modules: Some(ModuleConfig::vqa()),
        ..Default::default()
    };
    let run = run_benchmark(&pipeline, &loaded, None, &cfg, &DescriptionCache::new()).unwrap();
    assert_eq!(run.metric.n, 5);
    assert_eq!(run.metric.failures, 0);
}
