//! Acceptance gate. Prints one line per criterion and exits non-zero if any
//! criterion fails. P8 needs a served contrastive encoder and a CIFAR-10
//! manifest; it is skipped unless `LENS_P8_ENCODER_URL`, `LENS_P8_DIM` and
//! `LENS_P8_MANIFEST` are set.

mod common;

use std::collections::{BTreeSet, HashMap};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lens_core::backends::mock::{MockEncoder, MockImage, MockWorld};
use lens_core::backends::remote::RemoteEncoder;
use lens_core::backends::{GenerationParams, MAX_CAPTIONS};
use lens_core::evaluation::{
    accuracy, mean_per_class_accuracy, roc_auc, run_benchmark, run_caption_sweep, vqa_accuracy,
    write_run_dir, BenchmarkConfig, DatasetManifest, DescriptionCache, EvalError, EvalMode,
    EvalRecord, Gold, ManifestExample, ManifestHeader, MetricKind,
};
use lens_core::prompting::{render_few_shot, render_prompt, TaskKind};
use lens_core::reasoning::Answer;
use lens_core::vision::{tag_image, Module, ModuleConfig};
use lens_core::vocabulary::TagVocabulary;
use lens_core::ImageRef;

type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Check {
    ensure(elapsed < limit, || {
        format!("took {elapsed:.2?}, limit {limit:.0?}")
    })
}

fn p1_prompt_golden() -> Check {
    let start = Instant::now();
    for case in common::golden_cases() {
        let rendered = render_few_shot(&case.description, &case.question, &case.shots)
            .map_err(|e| e.to_string())?
            .rendered;
        let path = common::fixtures_dir().join(format!("prompt_{}.txt", case.name));
        let expected =
            std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(rendered == expected, || {
            format!("{} prompt differs from fixture", case.name)
        })?;
        if case.name == "memes" {
            ensure(
                rendered.contains("OCR: this is an image with written \""),
                || "memes prompt lacks the OCR sentence".into(),
            )?;
        }
    }
    within(start.elapsed(), Duration::from_secs(1))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn small_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim)
            .map(|_| f64::from(rng.gen_range(-2i32..=2)))
            .collect();
        if v.iter().any(|x| *x != 0.0) {
            return v;
        }
    }
}

fn p2_top_k() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let dim = 4;
    for trial in 0..1000 {
        let size = rng.gen_range(1..=200usize);
        let k = rng.gen_range(1..=20usize);
        let tags: Vec<String> = (0..size).map(|i| format!("t{i}")).collect();
        let vocab = TagVocabulary::from_classes("trial", &tags).map_err(|e| e.to_string())?;
        // Few distinct vectors in a low dimension, so ties are common.
        let image = small_vector(&mut rng, dim);
        let mut enc = MockEncoder::new(dim).with_image("img", image.clone());
        let mut text_vectors = Vec::new();
        for t in &tags {
            let v = small_vector(&mut rng, dim);
            enc = enc.with_text(format!("A photo of {t}"), v.clone());
            text_vectors.push(v);
        }
        let got =
            tag_image(&ImageRef::from_id("img"), &vocab, &enc, k).map_err(|e| e.to_string())?;

        let u = unit(&image);
        let mut oracle: Vec<(usize, f64)> = text_vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (i, unit(v).iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()))
            .collect();
        // Stable sort: equal scores stay in vocabulary order.
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores"));
        oracle.truncate(k);

        ensure(got.len() == oracle.len(), || {
            format!("trial {trial}: length mismatch")
        })?;
        for (g, (i, s)) in got.iter().zip(&oracle) {
            ensure(g.text == tags[*i], || {
                format!(
                    "trial {trial}: got {} where oracle has {}",
                    g.text, tags[*i]
                )
            })?;
            ensure((g.score - s).abs() < 1e-12, || {
                format!("trial {trial}: score mismatch")
            })?;
        }
    }
    within(start.elapsed(), Duration::from_secs(30))
}

fn record(id: usize, predicted: &str, gold: Gold, positive_score: Option<f64>) -> EvalRecord {
    let mut answer = Answer::open(predicted);
    answer.positive_score = positive_score;
    EvalRecord {
        example_id: format!("r{id}"),
        image_id: format!("i{id}"),
        predicted: answer,
        gold,
        per_example_score: 0.0,
        prompt_hash: None,
        prompt: None,
        failure: None,
    }
}

fn labelled(id: usize, predicted: &str, label: &str) -> EvalRecord {
    record(
        id,
        predicted,
        Gold {
            answers: vec![],
            label: Some(label.into()),
        },
        None,
    )
}

fn oracle_accuracy(pairs: &[(String, String)]) -> f64 {
    let hits = pairs.iter().filter(|(p, g)| p == g).count();
    hits as f64 / pairs.len() as f64
}

fn oracle_mean_per_class(pairs: &[(String, String)]) -> f64 {
    let mut classes: Vec<&String> = pairs.iter().map(|(_, g)| g).collect();
    classes.sort();
    classes.dedup();
    let per_class: Vec<f64> = classes
        .iter()
        .map(|c| {
            let members: Vec<_> = pairs.iter().filter(|(_, g)| g == *c).collect();
            members.iter().filter(|(p, g)| p == g).count() as f64 / members.len() as f64
        })
        .collect();
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

fn oracle_vqa(items: &[(String, Vec<String>)]) -> f64 {
    let total: f64 = items
        .iter()
        .map(|(p, refs)| {
            let m = refs.iter().filter(|r| *r == p).count() as f64;
            if m >= 3.0 {
                1.0
            } else {
                m / 3.0
            }
        })
        .sum();
    total / items.len() as f64
}

fn oracle_auc(items: &[(f64, bool)]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (sp, _) in items.iter().filter(|(_, l)| *l) {
        for (sn, _) in items.iter().filter(|(_, l)| !*l) {
            pairs += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn close(a: f64, b: f64, what: &str, trial: usize) -> Check {
    ensure((a - b).abs() <= 1e-9, || {
        format!("trial {trial}: {what} {a} vs oracle {b}")
    })
}

fn p3_metrics() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let words = ["red", "blue", "cat", "dog", "2", "yes", "no"];
    for trial in 0..500 {
        let n = rng.gen_range(1..=30);
        let classes = rng.gen_range(1..=5);

        let pairs: Vec<(String, String)> = (0..n)
            .map(|_| {
                (
                    format!("c{}", rng.gen_range(0..classes)),
                    format!("c{}", rng.gen_range(0..classes)),
                )
            })
            .collect();
        let recs: Vec<EvalRecord> = pairs
            .iter()
            .enumerate()
            .map(|(i, (p, g))| labelled(i, p, g))
            .collect();
        close(
            accuracy(&recs).unwrap(),
            oracle_accuracy(&pairs),
            "accuracy",
            trial,
        )?;
        close(
            mean_per_class_accuracy(&recs).unwrap(),
            oracle_mean_per_class(&pairs),
            "mean-per-class",
            trial,
        )?;

        let items: Vec<(String, Vec<String>)> = (0..n)
            .map(|_| {
                let refs = (0..10)
                    .map(|_| words[rng.gen_range(0..words.len())].to_string())
                    .collect();
                (words[rng.gen_range(0..words.len())].to_string(), refs)
            })
            .collect();
        let recs: Vec<EvalRecord> = items
            .iter()
            .enumerate()
            .map(|(i, (p, refs))| {
                record(
                    i,
                    p,
                    Gold {
                        answers: refs.clone(),
                        label: None,
                    },
                    None,
                )
            })
            .collect();
        close(
            vqa_accuracy(&recs).unwrap(),
            oracle_vqa(&items),
            "vqa",
            trial,
        )?;

        let mut scored: Vec<(f64, bool)> = (0..n.max(2))
            .map(|_| (f64::from(rng.gen_range(0..8u8)) / 8.0, rng.gen_bool(0.4)))
            .collect();
        scored[0].1 = true;
        scored[1].1 = false;
        let recs: Vec<EvalRecord> = scored
            .iter()
            .enumerate()
            .map(|(i, (s, l))| {
                let label = if *l { "pos" } else { "neg" };
                record(
                    i,
                    "",
                    Gold {
                        answers: vec![],
                        label: Some(label.into()),
                    },
                    Some(*s),
                )
            })
            .collect();
        close(
            roc_auc(&recs, "pos").unwrap(),
            oracle_auc(&scored),
            "roc-auc",
            trial,
        )?;
    }

    let pair = |s: f64, l: &str| {
        record(
            0,
            "",
            Gold {
                answers: vec![],
                label: Some(l.into()),
            },
            Some(s),
        )
    };
    let auc = roc_auc(
        &[
            pair(0.9, "1"),
            pair(0.4, "1"),
            pair(0.2, "0"),
            pair(0.8, "0"),
        ],
        "1",
    )
    .unwrap();
    ensure(auc == 0.75, || format!("AUC fixed case gave {auc}"))?;

    let skewed = [
        labelled(0, "a", "a"),
        labelled(1, "a", "b"),
        labelled(2, "a", "b"),
        labelled(3, "a", "b"),
    ];
    let (mpc, acc) = (
        mean_per_class_accuracy(&skewed).unwrap(),
        accuracy(&skewed).unwrap(),
    );
    ensure(mpc == 0.5 && acc == 0.25, || {
        format!("per-class {mpc}, pooled {acc}")
    })?;

    let refs: Vec<String> = [
        "cat", "cat", "cat", "dog", "dog", "kitty", "cat", "a cat", "pet", "animal",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let v = vqa_accuracy(&[record(
        0,
        "kitty",
        Gold {
            answers: refs,
            label: None,
        },
        None,
    )])
    .unwrap();
    ensure(v == 1.0 / 3.0, || format!("VQA fixed case gave {v}"))?;
    within(start.elapsed(), Duration::from_secs(30))
}

fn p4_configuration() -> Check {
    let p = GenerationParams::default();
    ensure(p.num_beams == 5 && p.length_penalty == -1.0, || {
        format!(
            "defaults are beams={} length_penalty={}",
            p.num_beams, p.length_penalty
        )
    })?;
    ensure(MAX_CAPTIONS == 50, || "caption cap is not 50".into())?;
    for (n, ok) in [(50, true), (51, false), (0, false)] {
        let params = GenerationParams::top_k_sampling(50, n, Some(0));
        ensure(params.validate().is_ok() == ok, || {
            format!("num_captions={n} accepted={}", !ok)
        })?;
        let mut cfg = ModuleConfig::vqa();
        cfg.num_captions = n;
        ensure(cfg.validate().is_ok() == ok, || {
            format!("module config num_captions={n}")
        })?;
    }
    let set = |m: &[Module]| m.iter().copied().collect::<BTreeSet<_>>();
    let all = set(&[
        Module::Tags,
        Module::Attributes,
        Module::Captions,
        Module::Ocr,
    ]);
    let expected = [
        (
            TaskKind::Recognition,
            set(&[Module::Tags, Module::Attributes]),
        ),
        (TaskKind::Vqa, set(&[Module::Captions])),
        (TaskKind::Memes, all.clone()),
        (TaskKind::Sentiment, all),
    ];
    for (kind, modules) in expected {
        let cfg = ModuleConfig::for_task(kind);
        ensure(cfg.enabled_modules == modules, || {
            format!("{kind:?} preset is {:?}", cfg.enabled_modules)
        })?;
    }
    ensure(ModuleConfig::vqa().num_captions == 50, || {
        "VQA preset caption count".into()
    })?;
    ensure(ModuleConfig::memes().num_captions == 1, || {
        "memes preset caption count".into()
    })?;
    let beam = ModuleConfig::memes().caption_params();
    ensure(beam.num_beams == 5 && beam.top_k.is_none(), || {
        "single caption must use beam search".into()
    })?;
    let sampled = ModuleConfig::vqa().caption_params();
    ensure(
        sampled.top_k == Some(50) && sampled.num_captions == 50,
        || "intensive captioning must use top-k sampling".into(),
    )
}

fn few_shot_world() -> (MockWorld, DatasetManifest, DatasetManifest) {
    let mut world = MockWorld::default();
    let header = ManifestHeader {
        name: "few-shot".into(),
        split: "test".into(),
        evaluation: MetricKind::VqaAccuracy,
        mode: EvalMode::Open,
        task: TaskKind::Vqa,
        question_template: None,
        answer_space: None,
        positive_label: None,
    };
    let make = |prefix: &str, n: usize, world: &mut MockWorld| {
        (0..n)
            .map(|i| {
                let id = format!("{prefix}{i:03}");
                world.images.insert(
                    id.clone(),
                    MockImage {
                        captions: vec![format!("a photo of object{id}")],
                        ..Default::default()
                    },
                );
                ManifestExample {
                    id: format!("ex-{id}"),
                    image: format!("mock://{id}"),
                    image_id: None,
                    question: Some("What is shown?".into()),
                    answers: vec![format!("class{}", i % 5); 3],
                    label: None,
                    ocr_text: None,
                }
            })
            .collect::<Vec<_>>()
    };
    let eval = make("e", 10, &mut world);
    let support = make("s", 20, &mut world);
    (
        world,
        DatasetManifest::new(header.clone(), eval),
        DatasetManifest::new(header, support),
    )
}

fn p5_few_shot() -> Check {
    let (world, eval, support) = few_shot_world();
    let pipeline = common::pipeline(&world);
    let cache = DescriptionCache::new();
    let eval_tokens: Vec<String> = eval
        .image_refs()
        .into_iter()
        .map(|r| format!("object{}", r.id))
        .collect();
    for seed in 0..100 {
        for shots in [0usize, 1, 3] {
            let cfg = BenchmarkConfig {
                shots,
                seed,
                record_prompts: true,
                ..Default::default()
            };
            let run = run_benchmark(&pipeline, &eval, Some(&support), &cfg, &cache)
                .map_err(|e| e.to_string())?;
            for r in &run.records {
                ensure(r.failure.is_none(), || {
                    format!("{} failed: {:?}", r.example_id, r.failure)
                })?;
                let prompt = r.prompt.as_deref().unwrap_or_default();
                let headers = prompt
                    .lines()
                    .filter(|l| l.starts_with("Question:"))
                    .count();
                ensure(headers == shots + 1, || {
                    format!("seed {seed}, {shots} shots: {headers} Question headers")
                })?;
                let blocks: Vec<&str> = prompt.split("\n\n").collect();
                for shot in &blocks[..blocks.len() - 1] {
                    ensure(
                        !eval_tokens.iter().any(|t| shot.contains(t.as_str())),
                        || format!("seed {seed}: an evaluation image leaked into a shot"),
                    )?;
                }
            }
        }
    }
    let overlapping = DatasetManifest::new(support.header.clone(), eval.examples[..2].to_vec());
    let cfg = BenchmarkConfig {
        shots: 1,
        ..Default::default()
    };
    match run_benchmark(&pipeline, &eval, Some(&overlapping), &cfg, &cache) {
        Err(EvalError::SupportOverlap(_)) => Ok(()),
        other => Err(format!(
            "overlapping support accepted: {:?}",
            other.map(|r| r.metric)
        )),
    }
}

fn p6_caption_sweep() -> Check {
    let (world, manifest) = common::planted_vqa(28);
    let pipeline = common::pipeline(&world);
    let cache = DescriptionCache::new();
    let cfg = BenchmarkConfig {
        seed: 3,
        record_prompts: true,
        ..Default::default()
    };
    let counts = [1usize, 5, 20, 50];
    let runs = run_caption_sweep(&pipeline, &manifest, None, &cfg, &counts, &cache)
        .map_err(|e| e.to_string())?;
    ensure(cache.misses() == manifest.examples.len(), || {
        format!(
            "captions generated {} times for {} images",
            cache.misses(),
            manifest.examples.len()
        )
    })?;
    let values: Vec<f64> = runs.iter().map(|(_, r)| r.metric.value).collect();
    ensure(values.windows(2).all(|w| w[0] <= w[1]), || {
        format!("sweep not monotone: {values:?}")
    })?;
    // The planted world reveals more answers as captions grow, so a flat
    // sweep would mean the prefix is not reaching the prompt.
    ensure(values[0] < values[values.len() - 1], || {
        format!("sweep is flat: {values:?}")
    })?;

    let mut full = cfg.module_config(&manifest);
    full.num_captions = 50;
    let task = manifest.task_spec();
    for (n, run) in &runs {
        for (record, (example, image)) in run
            .records
            .iter()
            .zip(manifest.examples.iter().zip(manifest.image_refs()))
        {
            let desc = pipeline
                .describe(&image, &full, None)
                .map_err(|e| e.to_string())?;
            let question = task
                .question(example.question.as_deref())
                .map_err(|e| e.to_string())?;
            let expected = render_prompt(&desc.with_caption_prefix(*n), &question)
                .map_err(|e| e.to_string())?
                .rendered;
            ensure(record.prompt.as_deref() == Some(expected.as_str()), || {
                format!(
                    "{n}-caption prompt for {} is not the cached prefix",
                    example.id
                )
            })?;
        }
    }
    Ok(())
}

fn p7_determinism() -> Check {
    let start = Instant::now();
    let run_once = |dir: &std::path::Path| -> Result<(), String> {
        let (world, all) = common::memes_world(60);
        let eval = DatasetManifest::new(all.header.clone(), all.examples[..50].to_vec());
        let support = DatasetManifest::new(all.header.clone(), all.examples[50..].to_vec());
        let pipeline = common::pipeline(&world);
        let mut modules = ModuleConfig::memes();
        modules.num_captions = 5;
        let cfg = BenchmarkConfig {
            modules: Some(modules),
            shots: 1,
            seed: 42,
            ..Default::default()
        };
        let run = run_benchmark(
            &pipeline,
            &eval,
            Some(&support),
            &cfg,
            &DescriptionCache::new(),
        )
        .map_err(|e| e.to_string())?;
        ensure(run.metric.failures == 0, || {
            format!("{} failures", run.metric.failures)
        })?;
        write_run_dir(dir, &run).map_err(|e| e.to_string())
    };
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_once(a.path())?;
    run_once(b.path())?;
    for file in ["records.jsonl", "metrics.json", "fingerprint.json"] {
        let x = std::fs::read(a.path().join(file)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path().join(file)).map_err(|e| e.to_string())?;
        ensure(!x.is_empty() && x == y, || {
            format!("{file} differs between runs")
        })?;
    }
    within(start.elapsed(), Duration::from_secs(10))
}

enum Outcome {
    Pass,
    Fail(String),
    Skip(String),
}

fn p8_real_encoder() -> Outcome {
    let vars = ["LENS_P8_ENCODER_URL", "LENS_P8_DIM", "LENS_P8_MANIFEST"];
    let values: HashMap<&str, String> = vars
        .iter()
        .filter_map(|v| std::env::var(v).ok().map(|x| (*v, x)))
        .collect();
    if values.len() < vars.len() {
        return Outcome::Skip(format!("set {} to run", vars.join(", ")));
    }
    let start = Instant::now();
    let check = || -> Check {
        let dim: usize = values["LENS_P8_DIM"]
            .parse()
            .map_err(|e| format!("LENS_P8_DIM: {e}"))?;
        let encoder = RemoteEncoder::new(
            "p8",
            dim,
            values["LENS_P8_ENCODER_URL"].clone(),
            std::env::var("LENS_P8_API_KEY").ok(),
        );
        let manifest =
            DatasetManifest::load(&values["LENS_P8_MANIFEST"]).map_err(|e| e.to_string())?;
        let classes = manifest
            .header
            .answer_space
            .clone()
            .ok_or("manifest has no answer space")?;
        let vocab = TagVocabulary::from_classes("cifar10", &classes).map_err(|e| e.to_string())?;
        let index =
            lens_core::vision::TagIndex::build(&encoder, &vocab).map_err(|e| e.to_string())?;
        let mut correct = 0usize;
        let subset: Vec<_> = manifest
            .examples
            .iter()
            .zip(manifest.image_refs())
            .take(200)
            .collect();
        for (example, image) in &subset {
            let emb =
                lens_core::backends::embed_image(&encoder, image).map_err(|e| e.to_string())?;
            let top = index.rank(&emb, 1).map_err(|e| e.to_string())?;
            correct += usize::from(example.label.as_deref() == Some(top[0].text.as_str()));
        }
        let acc = correct as f64 / subset.len() as f64;
        ensure(acc >= 0.6, || format!("top-1 accuracy {acc:.3} below 0.6"))?;
        within(start.elapsed(), Duration::from_secs(600))
    };
    match check() {
        Ok(()) => Outcome::Pass,
        Err(e) => Outcome::Fail(e),
    }
}

type Criterion = (&'static str, &'static str, fn() -> Check);

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("P1", "prompt byte-exactness", p1_prompt_golden),
        ("P2", "top-k correctness", p2_top_k),
        ("P3", "metric oracles", p3_metrics),
        ("P4", "configuration fidelity", p4_configuration),
        ("P5", "few-shot protocol", p5_few_shot),
        ("P6", "caption-sweep plumbing", p6_caption_sweep),
        ("P7", "end-to-end determinism", p7_determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let start = Instant::now();
        match check() {
            Ok(()) => println!("{id} PASS {name} ({:.2?})", start.elapsed()),
            Err(e) => {
                failed += 1;
                println!("{id} FAIL {name}: {e}");
            }
        }
    }
    match p8_real_encoder() {
        Outcome::Pass => println!("P8 PASS real-encoder smoke floor"),
        Outcome::Skip(why) => println!("P8 SKIP real-encoder smoke floor: {why}"),
        Outcome::Fail(e) => {
            failed += 1;
            println!("P8 FAIL real-encoder smoke floor: {e}");
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
