use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::model::Tier;

/// Hard cap on documents per sample.
pub const MAX_DOCS_PER_SAMPLE: usize = 15;

/// Token and document-count window of a tier. Token bounds are half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierTarget {
    pub token_min: usize,
    pub token_max: usize,
    pub doc_min: usize,
    pub doc_max: usize,
}

impl TierTarget {
    pub fn admits_tokens(&self, tokens: usize) -> bool {
        (self.token_min..self.token_max).contains(&tokens)
    }

    pub fn admits_docs(&self, n: usize) -> bool {
        (self.doc_min..=self.doc_max).contains(&n)
    }
}

pub fn default_tier_targets() -> BTreeMap<Tier, TierTarget> {
    BTreeMap::from([
        (Tier::Short, TierTarget { token_min: 8_000, token_max: 16_000, doc_min: 1, doc_max: 3 }),
        (Tier::Medium, TierTarget { token_min: 16_000, token_max: 32_000, doc_min: 3, doc_max: 8 }),
        (Tier::Long, TierTarget { token_min: 32_000, token_max: 64_000, doc_min: 8, doc_max: 15 }),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    /// 10000 / 1000 / 2000.
    fn default() -> Self {
        Self { train: 10.0 / 13.0, val: 1.0 / 13.0, test: 2.0 / 13.0 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), SynthError> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !(0.0..=1.0).contains(r)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SynthError::Config(format!("split ratios must be in [0,1] and sum to 1, got {all:?}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub rng_seed: u64,
    pub n_documents: usize,
    /// Samples over all splits; each yields up to five preference pairs.
    pub n_samples: usize,
    pub topic_domains: Vec<String>,
    pub threshold_probability: f64,
    pub tier_targets: BTreeMap<Tier, TierTarget>,
    /// Share of samples per tier within each split.
    pub tier_proportions: BTreeMap<Tier, f64>,
    pub split_ratios: SplitRatios,
    /// Constraint segments per document.
    pub constraints_per_doc: (usize, usize),
    /// Informative (non-requirement) segments per document.
    pub informative_per_doc: (usize, usize),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            n_documents: 150,
            n_samples: 2600,
            topic_domains: super::SynthBank::builtin().topics.clone(),
            threshold_probability: 0.7,
            tier_targets: default_tier_targets(),
            tier_proportions: BTreeMap::from([(Tier::Short, 0.61), (Tier::Medium, 0.26), (Tier::Long, 0.13)]),
            split_ratios: SplitRatios::default(),
            constraints_per_doc: (6, 12),
            informative_per_doc: (12, 30),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n_documents == 0 {
            return bad("n_documents must be positive".into());
        }
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.topic_domains.is_empty() {
            return bad("topic_domains is empty".into());
        }
        if !(0.0..=1.0).contains(&self.threshold_probability) {
            return bad(format!("threshold_probability {} outside [0, 1]", self.threshold_probability));
        }
        for tier in Tier::ALL {
            let Some(t) = self.tier_targets.get(&tier) else {
                return bad(format!("missing tier target for {}", tier.name()));
            };
            if t.token_min >= t.token_max || t.doc_min == 0 || t.doc_min > t.doc_max || t.doc_max > MAX_DOCS_PER_SAMPLE {
                return bad(format!("invalid tier target for {}: {t:?}", tier.name()));
            }
        }
        let share: f64 = self.tier_proportions.values().sum();
        if self.tier_proportions.values().any(|p| *p < 0.0) || (share - 1.0).abs() > 1e-9 {
            return bad("tier proportions must be non-negative and sum to 1".into());
        }
        let ranges = [self.constraints_per_doc, self.informative_per_doc];
        if ranges.iter().any(|(lo, hi)| lo > hi) || self.constraints_per_doc.0 == 0 {
            return bad("per-document segment ranges must be non-empty".into());
        }
        self.split_ratios.validate()
    }

    pub fn target(&self, tier: Tier) -> TierTarget {
        self.tier_targets[&tier]
    }
}

/// Splits `n` into integer parts proportional to `weights` (largest
/// remainder, ties to the earlier part).
pub fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = n - parts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        parts[i] += 1;
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(13, &SplitRatios::default().as_array()), vec![10, 1, 2]);
        assert_eq!(apportion(2600, &SplitRatios::default().as_array()), vec![2000, 200, 400]);
        assert_eq!(apportion(100, &[0.61, 0.26, 0.13]), vec![61, 26, 13]);
        assert_eq!(apportion(7, &[1.0, 1.0, 1.0]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn default_config_is_valid() {
        GeneratorConfig::default().validate().unwrap();
        let mut c = GeneratorConfig { n_documents: 0, ..Default::default() };
        assert!(c.validate().is_err());
        c.n_documents = 5;
        c.threshold_probability = 1.5;
        assert!(c.validate().is_err());
    }
}
