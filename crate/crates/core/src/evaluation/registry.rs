//! Known benchmark datasets with their split, size and metric.

use super::manifest::EvalMode;
use super::metrics::MetricKind;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistryEntry {
    pub name: &'static str,
    pub split: &'static str,
    pub size: usize,
    pub mode: EvalMode,
    pub metric: MetricKind,
}

const fn entry(
    name: &'static str,
    split: &'static str,
    size: usize,
    mode: EvalMode,
    metric: MetricKind,
) -> RegistryEntry {
    RegistryEntry {
        name,
        split,
        size,
        mode,
        metric,
    }
}

use EvalMode::{Close, Open};
use MetricKind::{Accuracy, MeanPerClass, RocAuc, VqaAccuracy};

pub const REGISTRY: &[RegistryEntry] = &[
    entry("Oxford-IIIT Pets", "test", 3669, Close, MeanPerClass),
    entry("Describable Textures", "test", 1880, Close, Accuracy),
    entry("Caltech-101", "test", 6085, Close, Accuracy),
    entry("Oxford Flowers 102", "test", 6149, Close, MeanPerClass),
    entry("FGVC Aircraft", "test", 3333, Close, MeanPerClass),
    entry("Food101", "test", 25250, Close, Accuracy),
    entry("Cifar10", "test", 10000, Close, Accuracy),
    entry("ImageNet-1k", "validation", 50000, Close, Accuracy),
    entry("Hateful Memes", "dev", 500, Open, RocAuc),
    entry("Hateful Memes", "test-seen", 1000, Open, RocAuc),
    entry("VQA 2.0", "testdev", 107394, Open, VqaAccuracy),
    entry("OK-VQA", "validation", 5046, Open, VqaAccuracy),
    entry("Rendered SST2", "validation", 1821, Open, VqaAccuracy),
];

/// Case-insensitive lookup by dataset name and split.
pub fn registry_entry(name: &str, split: &str) -> Option<&'static RegistryEntry> {
    REGISTRY
        .iter()
        .find(|e| e.name.eq_ignore_ascii_case(name) && e.split.eq_ignore_ascii_case(split))
}
