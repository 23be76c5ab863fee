//! Published reference numbers, kept for side-by-side reports. Values are
//! percentages.

/// Encoder and language-model pairings of the recognition table, in column
/// order. The last two columns use the encoder for zero-shot classification
/// directly.
pub const RECOGNITION_COLUMNS: [&str; 6] = [
    "LENS L14 Flan-T5 XL",
    "LENS L14 Flan-T5 XXL",
    "LENS H14 Flan-T5 XL",
    "LENS H14 Flan-T5 XXL",
    "CLIP L14",
    "CLIP H14",
];

pub const RECOGNITION: &[(&str, [f64; 6])] = &[
    ("Pets", [90.1, 92.0, 92.6, 92.4, 87.8, 90.1]),
    ("DTD", [47.6, 49.0, 57.8, 58.5, 50.7, 53.7]),
    ("Aircraft", [31.1, 30.1, 38.5, 38.5, 29.5, 38.0]),
    ("Caltech101", [71.3, 71.9, 75.4, 75.5, 70.4, 75.6]),
    ("Flowers102", [73.0, 76.4, 76.6, 76.7, 75.5, 74.9]),
    ("Food101", [90.9, 90.9, 90.8, 92.1, 89.8, 92.6]),
    ("Cars", [75.9, 76.3, 92.9, 93.6, 75.9, 93.4]),
    ("Cifar10", [95.0, 94.9, 95.7, 95.5, 95.0, 95.6]),
    ("ImageNet-1k", [69.6, 69.2, 73.0, 73.1, 70.7, 75.6]),
];

/// The printed "Vision Avg." row of the recognition table.
pub const RECOGNITION_AVERAGE: [f64; 6] = [71.6, 72.3, 77.0, 77.3, 71.7, 76.6];

pub const VL_COLUMNS: [&str; 5] = [
    "VQAv2 test-dev",
    "OK-VQA",
    "Rendered-SST2",
    "Hateful Memes dev",
    "Hateful Memes test-seen",
];

pub struct VlRow {
    pub model: &'static str,
    pub trainable_params: &'static str,
    pub scores: [Option<f64>; 5],
}

const fn vl(
    model: &'static str,
    trainable_params: &'static str,
    scores: [Option<f64>; 5],
) -> VlRow {
    VlRow {
        model,
        trainable_params,
        scores,
    }
}

pub const VISION_LANGUAGE: &[VlRow] = &[
    vl(
        "Kosmos-1",
        "1.6B",
        [Some(51.0), None, Some(67.1), Some(63.9), None],
    ),
    vl(
        "Flamingo3B",
        "1.4B",
        [Some(49.2), Some(41.2), None, None, Some(53.7)],
    ),
    vl(
        "Flamingo9B",
        "1.8B",
        [Some(51.8), Some(44.7), None, None, Some(57.0)],
    ),
    vl(
        "Flamingo80B",
        "10.2B",
        [Some(56.3), Some(50.6), None, None, Some(46.4)],
    ),
    vl(
        "BLIP-2 ViT-L FlanT5XL",
        "103M",
        [Some(62.3), Some(39.4), None, None, None],
    ),
    vl(
        "BLIP-2 ViT-g FlanT5XXL",
        "108M",
        [Some(65.0), Some(45.9), None, None, None],
    ),
    vl(
        "LENS Flan-T5 XL",
        "0",
        [Some(57.9), Some(32.8), Some(83.3), Some(58.0), Some(59.3)],
    ),
    vl(
        "LENS Flan-T5 XXL",
        "0",
        [Some(62.6), Some(43.3), Some(82.0), Some(59.4), Some(62.5)],
    ),
];

/// Average recognition accuracy by visual vocabulary.
pub const VOCABULARY_ABLATION: &[(&str, f64)] = &[
    ("Objects", 76.6),
    ("Attributes", 74.7),
    ("Objects + Attributes", 77.0),
];

/// Per-dataset recognition accuracy by visual vocabulary: objects,
/// attributes, both.
pub const VOCABULARY_ABLATION_DETAIL: &[(&str, [f64; 3])] = &[
    ("Pets", [90.1, 91.0, 92.6]),
    ("DTD", [53.7, 51.5, 57.8]),
    ("Aircraft", [38.0, 36.5, 38.5]),
    ("Caltech101", [75.6, 71.6, 75.4]),
    ("Flowers102", [74.9, 75.6, 76.6]),
    ("Food101", [92.6, 89.1, 90.8]),
    ("Cars", [93.4, 92.1, 92.9]),
    ("Cifar10", [95.6, 93.4, 95.7]),
    ("ImageNet-1k", [75.6, 71.5, 73.0]),
];

/// Printed average row of the detailed ablation, which leaves ImageNet out.
pub const VOCABULARY_ABLATION_DETAIL_AVERAGE: [f64; 3] = [76.8, 75.1, 77.5];

/// Hateful Memes dev ROC-AUC by module combination.
pub const MEMES_ABLATION: &[(&str, f64)] = &[
    ("OCR", 57.2),
    ("Objects + OCR", 58.4),
    ("Attributes + OCR", 59.3),
    ("Caption + OCR", 57.2),
    ("All", 59.4),
];

/// VQA accuracy by number of intensive captions; zero means question only.
pub const CAPTION_SWEEP: &[(usize, f64)] =
    &[(0, 37.2), (1, 52.5), (5, 56.6), (20, 59.1), (50, 60.4)];

/// Mean over the rows of one column, skipping datasets in `exclude`.
pub fn vision_average<const N: usize>(
    rows: &[(&str, [f64; N])],
    column: usize,
    exclude: &[&str],
) -> f64 {
    let kept: Vec<f64> = rows
        .iter()
        .filter(|(name, _)| !exclude.contains(name))
        .map(|(_, v)| v[column])
        .collect();
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Looks up the published LENS numbers for a registered dataset name.
pub fn lens_reference(dataset: &str, split: &str) -> Vec<(String, f64)> {
    let recognition_key = match dataset.to_ascii_lowercase().as_str() {
        "oxford-iiit pets" => Some("Pets"),
        "describable textures" => Some("DTD"),
        "caltech-101" => Some("Caltech101"),
        "oxford flowers 102" => Some("Flowers102"),
        "fgvc aircraft" => Some("Aircraft"),
        "food101" => Some("Food101"),
        "cifar10" => Some("Cifar10"),
        "imagenet-1k" => Some("ImageNet-1k"),
        _ => None,
    };
    if let Some(key) = recognition_key {
        let (_, row) = RECOGNITION
            .iter()
            .find(|(n, _)| *n == key)
            .expect("known row");
        return RECOGNITION_COLUMNS[..4]
            .iter()
            .zip(row)
            .map(|(c, v)| (c.to_string(), *v))
            .collect();
    }
    let column = match (dataset.to_ascii_lowercase().as_str(), split) {
        ("vqa 2.0", _) => Some(0),
        ("ok-vqa", _) => Some(1),
        ("rendered sst2", _) => Some(2),
        ("hateful memes", "dev") => Some(3),
        ("hateful memes", "test-seen") => Some(4),
        _ => None,
    };
    let Some(column) = column else {
        return Vec::new();
    };
    VISION_LANGUAGE
        .iter()
        .filter(|r| r.model.starts_with("LENS"))
        .filter_map(|r| r.scores[column].map(|v| (r.model.to_string(), v)))
        .collect()
}
