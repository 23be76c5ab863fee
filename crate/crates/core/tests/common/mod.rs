//! Worlds and datasets shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::PathBuf;

use lens_core::backends::mock::{CaptionPolicy, MockImage, MockWorld};
use lens_core::backends::BackendSet;
use lens_core::evaluation::{
    DatasetManifest, EvalMode, ManifestExample, ManifestHeader, MetricKind,
};
use lens_core::prompting::{Shot, TaskKind, TaskSpec};
use lens_core::vision::{ScoredText, VisualDescription};
use lens_core::vocabulary::{AttributeVocabulary, TagVocabulary};
use lens_core::Pipeline;

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn scored(items: &[(&str, f64)]) -> Vec<ScoredText> {
    items
        .iter()
        .map(|(t, s)| ScoredText {
            text: t.to_string(),
            score: *s,
        })
        .collect()
}

pub struct GoldenCase {
    pub name: &'static str,
    pub description: VisualDescription,
    pub question: String,
    pub shots: Vec<Shot>,
}

/// One fixed description and question per task kind, rendered through the
/// task's question template.
pub fn golden_cases() -> Vec<GoldenCase> {
    let q = |kind: TaskKind, example: Option<&str>| {
        TaskSpec::default_for(kind).question(example).unwrap()
    };
    vec![
        GoldenCase {
            name: "recognition",
            description: VisualDescription {
                tags: Some(scored(&[
                    ("golden retriever", 0.31),
                    ("labrador retriever", 0.29),
                    ("dog", 0.27),
                    ("puppy", 0.25),
                    ("tennis ball", 0.21),
                ])),
                attributes: Some(scored(&[
                    ("which has a long, dense golden coat", 0.28),
                    ("which has floppy ears", 0.26),
                    ("which is a medium-sized dog", 0.24),
                ])),
                ..Default::default()
            },
            question: q(TaskKind::Recognition, None),
            shots: vec![],
        },
        GoldenCase {
            name: "vqa",
            description: VisualDescription {
                captions: Some(vec![
                    "a red double decker bus driving down a street".into(),
                    "a bus parked next to a sidewalk in a city".into(),
                    "a red bus with people waiting at a stop".into(),
                ]),
                ..Default::default()
            },
            question: q(TaskKind::Vqa, Some("What color is the bus?")),
            shots: vec![Shot {
                description: VisualDescription {
                    captions: Some(vec![
                        "two giraffes standing in a grassy field".into(),
                        "giraffes eating leaves from a tall tree".into(),
                    ]),
                    ..Default::default()
                },
                question: "How many giraffes are there?".into(),
                answer: "2".into(),
            }],
        },
        GoldenCase {
            name: "memes",
            description: VisualDescription {
                tags: Some(scored(&[("cat", 0.30), ("sofa", 0.22)])),
                attributes: Some(scored(&[("which has whiskers", 0.25)])),
                captions: Some(vec!["a cat lying on a couch".into()]),
                ocr_text: Some("when the weekend finally arrives".into()),
            },
            question: q(TaskKind::Memes, None),
            shots: vec![],
        },
        GoldenCase {
            name: "sentiment",
            description: VisualDescription {
                tags: Some(scored(&[("text", 0.33), ("poster", 0.20)])),
                attributes: Some(scored(&[("which has printed letters", 0.21)])),
                captions: Some(vec!["a white sign with black writing on it".into()]),
                ocr_text: Some("a gorgeous, witty, seductive movie.".into()),
            },
            question: q(TaskKind::Sentiment, None),
            shots: vec![],
        },
    ]
}

fn header(name: &str, metric: MetricKind, mode: EvalMode, task: TaskKind) -> ManifestHeader {
    ManifestHeader {
        name: name.into(),
        split: "test".into(),
        evaluation: metric,
        mode,
        task,
        question_template: None,
        answer_space: None,
        positive_label: None,
    }
}

fn example(id: &str, image: &str) -> ManifestExample {
    ManifestExample {
        id: id.into(),
        image: format!("mock://{image}"),
        image_id: None,
        question: None,
        answers: vec![],
        label: None,
        ocr_text: None,
    }
}

pub const PLANTED_ANSWERS: &[&str] = &[
    "zebra",
    "kite",
    "pizza",
    "surfboard",
    "giraffe",
    "umbrella",
    "bicycle",
    "clock",
    "banana",
    "train",
];

/// Number of leading uninformative captions for planted image `i`.
pub fn planted_threshold(i: usize) -> usize {
    [0, 0, 1, 3, 4, 8, 12, 19, 25, 33, 40, 48, 49, 60][i % 14]
}

/// A VQA world where image `i` has `planted_threshold(i)` uninformative
/// captions followed by captions naming its answer. Revealing more captions
/// can only help the majority-vote mock LLM.
pub fn planted_vqa(n: usize) -> (MockWorld, DatasetManifest) {
    let mut world = MockWorld::default();
    world.captions.policy = CaptionPolicy::Prefix;
    let mut examples = Vec::new();
    for i in 0..n {
        let id = format!("vqa{i:03}");
        let answer = PLANTED_ANSWERS[i % PLANTED_ANSWERS.len()];
        let t = planted_threshold(i);
        let captions = (0..50)
            .map(|j| {
                if j < t {
                    "a picture of the image".to_string()
                } else {
                    format!("a photo of a {answer} on the backdrop{j}")
                }
            })
            .collect();
        world.images.insert(
            id.clone(),
            MockImage {
                captions,
                ..Default::default()
            },
        );
        let mut e = example(&id, &id);
        e.question = Some("What is in the picture?".into());
        e.answers = vec![answer.into(); 10];
        examples.push(e);
    }
    let manifest = DatasetManifest::new(
        header(
            "planted-vqa",
            MetricKind::VqaAccuracy,
            EvalMode::Open,
            TaskKind::Vqa,
        ),
        examples,
    );
    (world, manifest)
}

pub const CLASSES: &[&str] = &[
    "cat",
    "dog",
    "horse",
    "truck",
    "ship",
    "frog",
    "bird",
    "deer",
    "airplane",
    "automobile",
];

/// Images sit near the prompt of their class, with noise that makes a
/// fraction of them ambiguous.
pub fn recognition_world(n: usize, prefix: &str) -> (MockWorld, DatasetManifest) {
    let mut world = MockWorld {
        dimension: 32,
        seed: 7,
        ..Default::default()
    };
    world.captions.policy = CaptionPolicy::Sample;
    world.captions.default_pool = vec![
        "a photo of something outdoors".into(),
        "a blurry photo".into(),
        "a small picture of an animal or vehicle".into(),
    ];
    let mut h = header(
        "toy-recognition",
        MetricKind::MeanPerClass,
        EvalMode::Close,
        TaskKind::Recognition,
    );
    h.answer_space = Some(CLASSES.iter().map(|c| c.to_string()).collect());
    let mut examples = Vec::new();
    for i in 0..n {
        let id = format!("{prefix}{i:03}");
        let class = CLASSES[i % CLASSES.len()];
        world.images.insert(
            id.clone(),
            MockImage {
                near_text: Some(format!("A photo of {class}")),
                noise: 0.6 + 0.1 * (i % 5) as f64,
                ..Default::default()
            },
        );
        let mut e = example(&id, &id);
        e.label = Some(class.into());
        examples.push(e);
    }
    (world, DatasetManifest::new(h, examples))
}

pub fn tag_vocabulary() -> TagVocabulary {
    TagVocabulary::from_classes("toy", CLASSES).unwrap()
}

pub fn attribute_vocabulary() -> AttributeVocabulary {
    AttributeVocabulary::new(
        CLASSES.iter().map(|c| {
            (
                c.to_string(),
                vec![
                    format!("has features of a {c}"),
                    "is in a photo".to_string(),
                ],
            )
        }),
        "fixture",
    )
}

/// A memes world: every module on, seeded caption sampling, OCR text that
/// carries a noisy signal about the label.
pub fn memes_world(n: usize) -> (MockWorld, DatasetManifest) {
    let (mut world, _) = recognition_world(n, "meme");
    world.llm.token_logprobs.insert("hateful".into(), -2.0);
    world.llm.token_logprobs.insert("not".into(), -1.5);
    let mut h = header(
        "toy-memes",
        MetricKind::RocAuc,
        EvalMode::Open,
        TaskKind::Memes,
    );
    h.answer_space = Some(vec!["hateful".into(), "not hateful".into()]);
    h.positive_label = Some("hateful".into());
    let mut examples = Vec::new();
    for i in 0..n {
        let id = format!("meme{i:03}");
        let hateful = i % 3 == 0;
        let mut e = example(&id, &id);
        e.label = Some(if hateful { "hateful" } else { "not hateful" }.into());
        e.ocr_text = Some(match (hateful, i % 4) {
            (true, 0) => "they are all the same, hateful people".into(),
            (true, _) => "go back to where you came from".into(),
            (false, 1) => "hateful mondays, am i right".into(),
            (false, _) => format!("caption number {i} about my weekend"),
        });
        examples.push(e);
    }
    (world, DatasetManifest::new(h, examples))
}

pub fn pipeline(world: &MockWorld) -> Pipeline {
    let backends = BackendSet::from_world(world);
    Pipeline::new(
        &backends,
        Some(&tag_vocabulary()),
        Some(&attribute_vocabulary()),
    )
    .unwrap()
}
