use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::config::{apportion, MAX_DOCS_PER_SAMPLE};
use super::{GeneratedDocument, GeneratorConfig, SegmentConstraint, SynthBank, SynthError};
use crate::canonical::{tokenize, UnitTable};
use crate::model::{format_threshold, render_constraint, ComplianceAnalysis, Constraint, ErrorType, EvidenceCitation, KeyConstraint, Segment, Tier};
use crate::perturb::scale_threshold;
use crate::seed::{derive_seed, rng};

/// Neutral context appended to reach a tier's length. Stored as a recipe and
/// regenerated on demand; it never carries detail elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub seed: u64,
    pub segments: usize,
    pub tokens: usize,
}

impl Padding {
    fn build(seed: u64, min_tokens: usize, bank: &SynthBank) -> Padding {
        let mut r = rng(seed);
        let (mut segments, mut tokens) = (0, 0);
        while tokens < min_tokens {
            tokens += bank.filler_tokens(r.gen_range(0..bank.filler.len()));
            segments += 1;
        }
        Padding { seed, segments, tokens }
    }

    pub fn render(&self) -> Vec<Segment> {
        let bank = SynthBank::builtin();
        let mut r = rng(self.seed);
        (0..self.segments)
            .map(|i| Segment::new(format!("pad_{}", i + 1), bank.filler[r.gen_range(0..bank.filler.len())].clone()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub tier: Tier,
    pub doc_ids: Vec<String>,
    pub query: String,
    pub padding: Padding,
    /// `|q|` plus every document and padding segment.
    pub token_count: usize,
    pub analysis: ComplianceAnalysis,
}

impl Sample {
    /// Compact prompt for preference pairs: the query plus every cited
    /// passage.
    pub fn pair_prompt(&self) -> String {
        let mut out = self.query.clone();
        for kc in &self.analysis.key_constraints {
            if let Some(e) = &kc.evidence {
                out.push_str(&format!(" context : {} {} {}", e.doc_id, e.seg_id, e.quote));
            }
        }
        out
    }
}

/// Splits a pair prompt back into its query and cited passages.
pub fn prompt_contexts(prompt: &str) -> (String, Vec<EvidenceCitation>) {
    let mut parts = prompt.split(" context : ");
    let query = parts.next().unwrap_or_default().to_string();
    let cites = parts
        .filter_map(|p| {
            let mut it = p.splitn(3, ' ');
            let doc_id = it.next()?.to_string();
            let seg_id = it.next()?.to_string();
            Some(EvidenceCitation { doc_id, seg_id, quote: it.next().unwrap_or_default().to_string() })
        })
        .collect();
    (query, cites)
}

/// Tier of a sample with `tokens` total length over `n_docs` documents.
pub fn classify(tokens: usize, n_docs: usize, config: &GeneratorConfig) -> Result<Tier, SynthError> {
    if n_docs > MAX_DOCS_PER_SAMPLE {
        return Err(SynthError::TooManyDocuments(n_docs));
    }
    let tier = Tier::ALL
        .into_iter()
        .find(|t| config.target(*t).admits_tokens(tokens))
        .ok_or(SynthError::OutOfRange { tokens, n_docs })?;
    if !config.target(tier).admits_docs(n_docs) {
        return Err(SynthError::OutOfRange { tokens, n_docs });
    }
    Ok(tier)
}

struct Scenario {
    fact: String,
    current: String,
    violation: bool,
    risk: Option<String>,
}

/// Operating fact for a threshold requirement: a value on either side of the
/// limit, stated in the requirement's unit.
fn threshold_scenario(c: &Constraint, units: &UnitTable, r: &mut ChaCha8Rng) -> Scenario {
    let limit = c.threshold.expect("threshold requirement");
    let over = r.gen_bool(0.5);
    let (lo, hi) = if over { (1.05, 1.3) } else { (0.6, 0.95) };
    let factor = match c.comparator {
        crate::model::Comparator::Ge | crate::model::Comparator::Gt => 2.0 - r.gen_range(lo..hi),
        _ => r.gen_range(lo..hi),
    };
    let mut value = scale_threshold(limit, factor);
    if value == limit {
        value += Decimal::new(1, 1);
    }
    let unit = c.unit.as_deref().and_then(|u| units.display(u)).unwrap_or_default();
    let measure = c.predicate.as_deref().unwrap_or("value");
    let current = format!("{} {unit}", format_threshold(value));
    let breached = !c.comparator.holds(value, limit);
    Scenario {
        fact: format!("{} {measure} is {current}", c.scope),
        violation: breached && c.level.is_mandatory(),
        risk: breached.then(|| format!("{} {measure} of {current} breaches the {} {unit} limit", c.scope, format_threshold(limit))),
        current,
    }
}

fn action_scenario(c: &Constraint, r: &mut ChaCha8Rng) -> Scenario {
    let action = c.predicate.as_deref().unwrap_or("comply");
    let does = r.gen_bool(0.5);
    let fact = if does { format!("{} {action}", c.scope) } else { format!("{} do not {action}", c.scope) };
    let breached = does == c.level.is_prohibition();
    Scenario {
        current: fact.clone(),
        violation: breached && c.level.is_mandatory(),
        risk: breached.then(|| format!("{fact} contrary to the requirement")),
        fact,
    }
}

fn key_constraint(doc: &GeneratedDocument, sc: &SegmentConstraint, s: &Scenario) -> KeyConstraint {
    let quote = doc.document.segment(&sc.seg_id).map(|g| g.text.clone()).unwrap_or_default();
    KeyConstraint {
        constraint: render_constraint(&sc.constraint),
        kind: if sc.constraint.threshold.is_some() { ErrorType::Threshold } else { ErrorType::Level },
        current: Some(s.current.clone()),
        violation: s.violation,
        evidence: Some(EvidenceCitation { doc_id: doc.document.id.clone(), seg_id: sc.seg_id.clone(), quote }),
        detail: Some(sc.constraint.clone()),
    }
}

/// Builds the query and the gold analysis for a document set whose first
/// member holds an anchor requirement.
fn annotate(docs: &[&GeneratedDocument], r: &mut ChaCha8Rng) -> (String, ComplianceAnalysis) {
    let bank = SynthBank::builtin();
    let units = UnitTable::builtin();
    let primary_doc = docs[0];
    let anchors: Vec<&SegmentConstraint> = primary_doc.anchors().collect();
    let primary = *anchors.choose(r).expect("primary document has an anchor");
    let others: Vec<(&GeneratedDocument, &SegmentConstraint)> = docs
        .iter()
        .flat_map(|d| d.constraints.iter().map(move |c| (*d, c)))
        .filter(|(d, c)| !(d.document.id == primary_doc.document.id && c.seg_id == primary.seg_id))
        .collect();

    let mut picked = vec![(primary_doc, primary)];
    if let Some(&second) = others.choose(r) {
        picked.push(second);
    }
    let mut facts = Vec::new();
    let mut key_constraints = Vec::new();
    let mut risks = Vec::new();
    for (doc, sc) in picked {
        let s = match sc.constraint.threshold {
            Some(_) => threshold_scenario(&sc.constraint, units, r),
            None => action_scenario(&sc.constraint, r),
        };
        let mut fact = s.fact.clone();
        if let Some(cond) = &sc.constraint.condition {
            fact = format!("{fact} {cond}");
        }
        facts.push(fact);
        risks.extend(s.risk.clone());
        key_constraints.push(key_constraint(doc, sc, &s));
    }
    let template = bank.queries.choose(r).expect("non-empty query bank");
    let query = template.replace("{topic}", &primary_doc.topic).replace("{facts}", &facts.join(" and "));
    let analysis = ComplianceAnalysis {
        is_compliant: key_constraints.iter().all(|k| !k.violation),
        key_constraints,
        risks,
        evidence: vec![],
    };
    (query, analysis)
}

/// Per-pool assembly outcome.
#[derive(Debug, Clone, Default)]
pub struct Assembly {
    pub samples: Vec<Sample>,
    /// Samples placed in a smaller tier than planned because the pool could
    /// not supply enough documents.
    pub fallbacks: usize,
}

/// Assembles `n` samples from one document pool. Tier counts follow the
/// configured proportions; every sample's documents come from `pool` only.
pub fn assemble_samples(
    pool: &[&GeneratedDocument],
    n: usize,
    config: &GeneratorConfig,
    label: &str,
    first_index: usize,
) -> Result<Assembly, SynthError> {
    let bank = SynthBank::builtin();
    let weights: Vec<f64> = Tier::ALL.iter().map(|t| config.tier_proportions.get(t).copied().unwrap_or(0.0)).collect();
    let counts = apportion(n, &weights);
    let primaries: Vec<&GeneratedDocument> = pool.iter().copied().filter(|d| d.anchors().next().is_some()).collect();
    let mut out = Assembly::default();
    let mut index = first_index;
    for (planned, count) in Tier::ALL.into_iter().zip(counts) {
        let mut demoted: Option<(Tier, usize)> = None;
        for _ in 0..count {
            let id = format!("sample_{:05}", index + 1);
            index += 1;
            let mut r = rng(derive_seed(config.rng_seed, &["sample", label, &id]));
            let tier = Tier::ALL[..=planned as usize]
                .iter()
                .rev()
                .copied()
                .find(|t| config.target(*t).doc_min <= pool.len())
                .filter(|_| !primaries.is_empty())
                .ok_or(SynthError::TierInfeasible { tier: planned, pool: label.to_string(), available: pool.len() })?;
            if tier != planned {
                out.fallbacks += 1;
                demoted.get_or_insert((tier, 0)).1 += 1;
            }
            let target = config.target(tier);
            let n_docs = r.gen_range(target.doc_min..=target.doc_max.min(pool.len()));
            let primary = *primaries.choose(&mut r).expect("checked non-empty");
            let rest: Vec<&GeneratedDocument> = pool.iter().copied().filter(|d| d.document.id != primary.document.id).collect();
            let mut docs = vec![primary];
            docs.extend(rest.choose_multiple(&mut r, n_docs - 1).copied());

            let (query, analysis) = annotate(&docs, &mut r);
            let base = tokenize(&query).len() + docs.iter().map(|d| d.token_count()).sum::<usize>();
            let slack = bank.max_filler_tokens();
            if base >= target.token_max || target.token_max - target.token_min <= slack {
                return Err(SynthError::TierInfeasible { tier, pool: label.to_string(), available: pool.len() });
            }
            let goal = r.gen_range(target.token_min.max(base)..target.token_max - slack);
            let padding = Padding::build(r.gen(), goal - base, bank);
            let token_count = base + padding.tokens;
            debug_assert_eq!(classify(token_count, docs.len(), config).ok(), Some(tier));
            out.samples.push(Sample {
                id,
                tier,
                doc_ids: docs.iter().map(|d| d.document.id.clone()).collect(),
                query,
                padding,
                token_count,
                analysis,
            });
        }
        if let Some((tier, k)) = demoted {
            log::warn!("pool {label}: {} tier needs more than {} documents; {k} sample(s) assembled as {}", planned.name(), pool.len(), tier.name());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::generate_documents;

    #[test]
    fn tier_examples() {
        let cfg = GeneratorConfig::default();
        assert_eq!(classify(20_000, 3, &cfg).unwrap(), Tier::Medium);
        assert_eq!(classify(9_000, 1, &cfg).unwrap(), Tier::Short);
        assert!(matches!(classify(40_000, 16, &cfg), Err(SynthError::TooManyDocuments(16))));
        assert!(classify(4_000, 1, &cfg).is_err());
        assert!(classify(9_000, 8, &cfg).is_err());
    }

    #[test]
    fn padding_regenerates_its_token_count() {
        let p = Padding::build(5, 3000, SynthBank::builtin());
        let segs = p.render();
        assert_eq!(segs.len(), p.segments);
        assert_eq!(segs.iter().map(|s| s.token_count).sum::<usize>(), p.tokens);
        assert!(p.tokens >= 3000);
    }

    #[test]
    fn samples_land_in_their_tier() {
        let cfg = GeneratorConfig { n_documents: 40, rng_seed: 3, ..Default::default() };
        let docs = generate_documents(&cfg);
        let pool: Vec<&GeneratedDocument> = docs.iter().collect();
        let a = assemble_samples(&pool, 60, &cfg, "all", 0).unwrap();
        assert_eq!(a.samples.len(), 60);
        assert_eq!(a.fallbacks, 0);
        for s in &a.samples {
            assert_eq!(classify(s.token_count, s.doc_ids.len(), &cfg).unwrap(), s.tier);
            s.analysis.validate().unwrap();
            let k = &s.analysis.key_constraints[0];
            let all: Vec<ErrorType> = k.detail.as_ref().unwrap().element_types();
            assert_eq!(all, ErrorType::ALL.to_vec());
            assert_eq!(s.analysis.is_compliant, s.analysis.key_constraints.iter().all(|k| !k.violation));
        }
        let again = assemble_samples(&pool, 60, &cfg, "all", 0).unwrap();
        assert_eq!(a.samples, again.samples);
    }

    #[test]
    fn small_pools_fall_back_or_fail() {
        let cfg = GeneratorConfig { n_documents: 12, rng_seed: 1, ..Default::default() };
        let docs = generate_documents(&cfg);
        let with_anchor: Vec<&GeneratedDocument> = docs.iter().filter(|d| d.has_thresholds()).take(2).collect();
        let a = assemble_samples(&with_anchor, 10, &cfg, "tiny", 0).unwrap();
        assert!(a.samples.iter().all(|s| s.tier == Tier::Short));
        assert_eq!(a.fallbacks, 4);
        assert!(matches!(assemble_samples(&[], 3, &cfg, "empty", 0), Err(SynthError::TierInfeasible { .. })));
    }
}
