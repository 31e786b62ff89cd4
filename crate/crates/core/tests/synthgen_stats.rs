//! Distributional and structural checks on generated datasets.

use std::collections::{BTreeMap, BTreeSet};

use faithkit::canonical::tokenize;
use faithkit::model::{ErrorType, Tier};
use faithkit::synthgen::{
    apportion, build_dataset, eligible_types, generate_documents, split_by_document, DatasetSplit, GeneratorConfig, SplitName, SplitRatios, SynthError,
};
use proptest::prelude::*;

#[test]
fn threshold_documents_follow_the_configured_rate() {
    let cfg = GeneratorConfig { n_documents: 1000, rng_seed: 42, ..Default::default() };
    let docs = generate_documents(&cfg);
    let frac = docs.iter().filter(|d| d.has_thresholds()).count() as f64 / 1000.0;
    assert!((frac - 0.7).abs() <= 0.03, "{frac}");

    let none = GeneratorConfig { threshold_probability: 0.0, n_documents: 50, ..Default::default() };
    assert!(generate_documents(&none).iter().all(|d| !d.has_thresholds()));
}

#[test]
fn default_dataset_meets_its_targets() {
    let cfg = GeneratorConfig::default();
    let ds = build_dataset(&cfg).unwrap();
    assert_eq!(ds.samples.len(), cfg.n_samples);
    assert_eq!(ds.report.leakage, 0);

    // every document belongs to exactly one split
    let mut owner: BTreeMap<&str, SplitName> = BTreeMap::new();
    for s in &ds.samples {
        let split = ds.split.split_of_sample(&s.id).unwrap();
        for d in &s.doc_ids {
            assert_eq!(*owner.entry(d).or_insert(split), split, "{d}");
        }
    }

    // lengths recomputed from scratch land inside the declared window
    let docs: BTreeMap<&str, usize> = ds.documents.iter().map(|d| (d.document.id.as_str(), d.token_count())).collect();
    let mut per_tier: BTreeMap<Tier, usize> = BTreeMap::new();
    for s in &ds.samples {
        let pad: usize = s.padding.render().iter().map(|seg| tokenize(&seg.text).len()).sum();
        let total = tokenize(&s.query).len() + s.doc_ids.iter().map(|d| docs[d.as_str()]).sum::<usize>() + pad;
        assert_eq!(total, s.token_count, "{}", s.id);
        let target = cfg.target(s.tier);
        assert!(target.admits_tokens(total) && target.admits_docs(s.doc_ids.len()), "{} {total}", s.id);
        assert!(s.doc_ids.len() <= 15);
        assert_eq!(eligible_types(s), ErrorType::ALL.to_vec());
        *per_tier.entry(s.tier).or_default() += 1;
    }

    // without fallbacks the tier mix is the apportioned one per split
    assert_eq!(ds.report.tier_fallbacks, 0);
    let per_split = apportion(cfg.n_samples, &cfg.split_ratios.as_array());
    let props: Vec<f64> = Tier::ALL.iter().map(|t| cfg.tier_proportions[t]).collect();
    let mut expected = [0usize; 3];
    for n in per_split {
        for (k, c) in apportion(n, &props).into_iter().enumerate() {
            expected[k] += c;
        }
    }
    for (k, t) in Tier::ALL.iter().enumerate() {
        assert_eq!(per_tier.get(t).copied().unwrap_or(0), expected[k], "{t:?}");
    }
}

#[test]
fn seeds_drive_everything() {
    let a = GeneratorConfig { n_documents: 25, n_samples: 40, rng_seed: 1, ..Default::default() };
    let b = GeneratorConfig { rng_seed: 2, ..a.clone() };
    let (x, y, z) = (build_dataset(&a).unwrap(), build_dataset(&a).unwrap(), build_dataset(&b).unwrap());
    assert_eq!(x.samples, y.samples);
    assert_ne!(x.samples, z.samples);
}

fn assigned_once(split: &DatasetSplit, ids: &BTreeSet<String>) -> bool {
    let mut seen = BTreeSet::new();
    for s in SplitName::ALL {
        for id in split.samples(s) {
            if !seen.insert(id.clone()) {
                return false;
            }
        }
    }
    &seen == ids
}

proptest! {
    #[test]
    fn splits_never_leak(edges in prop::collection::vec(prop::collection::vec(0usize..40, 1..4), 1..120)) {
        let samples: Vec<(String, Vec<String>)> = edges
            .iter()
            .enumerate()
            .map(|(i, ds)| (format!("s{i}"), ds.iter().map(|d| format!("D{d}")).collect()))
            .collect();
        let view = || samples.iter().map(|(id, ds)| (id.as_str(), ds.as_slice()));
        match split_by_document(view(), &SplitRatios::default()) {
            Ok(split) => {
                prop_assert_eq!(split.leakage(view()), 0);
                let ids: BTreeSet<String> = samples.iter().map(|s| s.0.clone()).collect();
                prop_assert!(assigned_once(&split, &ids));
            }
            Err(SynthError::UnsatisfiableSplit { .. }) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }
}
