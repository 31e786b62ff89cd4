//! Template-driven synthetic regulatory documents and dataset assembly.
//!
//! Documents are generated independently from derived seeds, then divided
//! into train/val/test pools before any sample is assembled, so samples can
//! only combine documents of one pool. The final split is recomputed from
//! the samples' document graph and checked for leakage.

mod bank;
mod config;
mod document;
mod sample;
mod split;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use bank::{ActionTemplate, SynthBank, ThresholdTemplate};
pub use config::{apportion, default_tier_targets, GeneratorConfig, SplitRatios, TierTarget, MAX_DOCS_PER_SAMPLE};
pub use document::{document_id, generate_document, generate_documents, GeneratedDocument, SegmentConstraint};
pub use sample::{assemble_samples, classify, prompt_contexts, Assembly, Padding, Sample};
pub use split::{components, split_by_document, Component, DatasetSplit, SplitName};

use crate::model::{ErrorType, Tier};
use crate::seed::{derive_seed, rng};

pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const SCHEMA_FILE: &str = "schema.json";
const SCHEMA_JSON: &str = include_str!("../../data/schema.json");

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("pool `{pool}` ({available} documents) cannot supply a {} sample", .tier.name())]
    TierInfeasible { tier: Tier, pool: String, available: usize },
    #[error("{0} documents requested for one sample; at most {MAX_DOCS_PER_SAMPLE} allowed")]
    TooManyDocuments(usize),
    #[error("{tokens} tokens over {n_docs} documents fits no tier")]
    OutOfRange { tokens: usize, n_docs: usize },
    #[error("splits {starved:?} receive no samples; {} component(s) too large to place", .offending.len())]
    UnsatisfiableSplit { starved: Vec<SplitName>, offending: Vec<Component> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Counts for one split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReport {
    pub samples: usize,
    pub documents: usize,
    pub tiers: BTreeMap<Tier, usize>,
    /// One pair per (sample, error type) with an eligible element.
    pub pairs: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub documents: usize,
    pub documents_with_thresholds: usize,
    pub splits: BTreeMap<SplitName, SplitReport>,
    pub tier_fallbacks: usize,
    pub leakage: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub documents: Vec<GeneratedDocument>,
    pub samples: Vec<Sample>,
    pub split: DatasetSplit,
    pub report: DatasetReport,
}

impl Dataset {
    pub fn sample_docs(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.samples.iter().map(|s| (s.id.as_str(), s.doc_ids.as_slice()))
    }
}

/// Error types that have at least one element in a sample's gold analysis.
pub fn eligible_types(sample: &Sample) -> Vec<ErrorType> {
    let mut types: Vec<ErrorType> = sample
        .analysis
        .key_constraints
        .iter()
        .filter_map(|k| k.detail.as_ref())
        .flat_map(|c| c.element_types())
        .collect();
    types.sort();
    types.dedup();
    types
}

/// Divides document indices into three pools by ratio, stratified on
/// whether a document can anchor a sample, so every non-empty pool gets an
/// anchor whenever there are enough of them.
fn partition_documents(docs: &[GeneratedDocument], config: &GeneratorConfig) -> [Vec<usize>; 3] {
    let ratios = config.split_ratios.as_array();
    let mut pools: [Vec<usize>; 3] = Default::default();
    for (label, anchored) in [("anchored", true), ("plain", false)] {
        let mut ids: Vec<usize> = (0..docs.len()).filter(|&i| docs[i].has_thresholds() == anchored).collect();
        ids.shuffle(&mut rng(derive_seed(config.rng_seed, &["partition", label])));
        let mut counts = apportion(ids.len(), &ratios);
        let wanted = ratios.iter().filter(|r| **r > 0.0).count();
        if anchored && ids.len() >= wanted {
            for k in 0..3 {
                if ratios[k] > 0.0 && counts[k] == 0 {
                    let donor = (0..3).max_by_key(|&j| counts[j]).expect("three pools");
                    counts[donor] -= 1;
                    counts[k] += 1;
                }
            }
        }
        let mut rest = ids.as_slice();
        for k in 0..3 {
            let (head, tail) = rest.split_at(counts[k]);
            pools[k].extend_from_slice(head);
            rest = tail;
        }
    }
    for p in &mut pools {
        p.sort();
    }
    pools
}

/// Generates documents, assembles samples per pool, and splits them.
pub fn build_dataset(config: &GeneratorConfig) -> Result<Dataset, SynthError> {
    config.validate()?;
    let documents = generate_documents(config);
    let pools = partition_documents(&documents, config);
    let per_split = apportion(config.n_samples, &config.split_ratios.as_array());
    let mut samples = Vec::with_capacity(config.n_samples);
    let mut fallbacks = 0;
    for (k, name) in SplitName::ALL.into_iter().enumerate() {
        if per_split[k] == 0 {
            continue;
        }
        let pool: Vec<&GeneratedDocument> = pools[k].iter().map(|&i| &documents[i]).collect();
        let a = assemble_samples(&pool, per_split[k], config, name.name(), samples.len())?;
        fallbacks += a.fallbacks;
        samples.extend(a.samples);
    }
    let split = split_by_document(samples.iter().map(|s| (s.id.as_str(), s.doc_ids.as_slice())), &config.split_ratios)?;

    let mut report = DatasetReport {
        documents: documents.len(),
        documents_with_thresholds: documents.iter().filter(|d| d.has_thresholds()).count(),
        tier_fallbacks: fallbacks,
        ..Default::default()
    };
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    for name in SplitName::ALL {
        let r = report.splits.entry(name).or_default();
        for id in split.samples(name) {
            let s = by_id[id.as_str()];
            r.samples += 1;
            *r.tiers.entry(s.tier).or_insert(0) += 1;
            r.pairs += eligible_types(s).len();
        }
        r.documents = split.document_assignment.values().filter(|v| **v == name).count();
    }
    report.leakage = split.leakage(samples.iter().map(|s| (s.id.as_str(), s.doc_ids.as_slice())));
    Ok(Dataset { documents, samples, split, report })
}

/// Writes the dataset files into `dir` and returns their paths.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
    std::fs::create_dir_all(dir)?;
    let paths: Vec<PathBuf> = [DOCUMENTS_FILE, SAMPLES_FILE, SPLIT_FILE, SCHEMA_FILE].iter().map(|f| dir.join(f)).collect();
    crate::jsonl::write(&paths[0], &ds.documents)?;
    crate::jsonl::write(&paths[1], &ds.samples)?;
    std::fs::write(&paths[2], serde_json::to_string_pretty(&ds.split).map_err(std::io::Error::from)? + "\n")?;
    std::fs::write(&paths[3], SCHEMA_JSON)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig { n_documents: 30, n_samples: 65, rng_seed: 11, ..Default::default() }
    }

    #[test]
    fn dataset_has_no_leakage_and_exact_split_counts() {
        let ds = build_dataset(&small()).unwrap();
        assert_eq!(ds.report.leakage, 0);
        assert_eq!(ds.samples.len(), 65);
        let counts: Vec<usize> = SplitName::ALL.iter().map(|s| ds.split.samples(*s).len()).collect();
        assert_eq!(counts, vec![50, 5, 10]);
        for s in &ds.samples {
            assert_eq!(eligible_types(s).len(), 5);
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = build_dataset(&small()).unwrap();
        let b = build_dataset(&small()).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.split, b.split);
        assert_eq!(a.documents, b.documents);
    }

    #[test]
    fn zero_documents_is_a_config_error() {
        let cfg = GeneratorConfig { n_documents: 0, ..Default::default() };
        assert!(matches!(build_dataset(&cfg), Err(SynthError::Config(_))));
    }
}
