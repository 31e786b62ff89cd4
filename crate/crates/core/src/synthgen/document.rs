use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GeneratorConfig, SynthBank};
use crate::model::{render_constraint, Constraint, Document, Level, Segment, Source};
use crate::seed::{derive_seed, rng};
use crate::templates::SubstitutionTables;

/// Ground truth of one requirement segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentConstraint {
    #[serde(rename = "seg")]
    pub seg_id: String,
    pub constraint: Constraint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedDocument {
    pub document: Document,
    pub topic: String,
    pub constraints: Vec<SegmentConstraint>,
}

impl GeneratedDocument {
    pub fn has_thresholds(&self) -> bool {
        self.constraints.iter().any(|c| c.constraint.threshold.is_some())
    }

    /// Requirements carrying every detail slot: threshold, unit, scope,
    /// level and condition.
    pub fn anchors(&self) -> impl Iterator<Item = &SegmentConstraint> {
        self.constraints.iter().filter(|c| c.constraint.threshold.is_some() && c.constraint.condition.is_some())
    }

    pub fn token_count(&self) -> usize {
        self.document.token_count()
    }
}

pub fn document_id(index: usize) -> String {
    format!("SYN_{:04}", index + 1)
}

fn sample_level(r: &mut ChaCha8Rng, negated: bool) -> Level {
    let x: f64 = r.gen();
    match (negated, x) {
        (true, x) if x < 0.6 => Level::ShallNot,
        (true, _) => Level::MustNot,
        (false, x) if x < 0.4 => Level::Shall,
        (false, x) if x < 0.65 => Level::Must,
        (false, x) if x < 0.85 => Level::Should,
        (false, _) => Level::May,
    }
}

fn pick_condition(r: &mut ChaCha8Rng) -> String {
    let conditions: Vec<&str> = SubstitutionTables::builtin().conditions.phrases().collect();
    conditions.choose(r).expect("non-empty condition table").to_string()
}

fn threshold_constraint(bank: &SynthBank, r: &mut ChaCha8Rng, level: Level, condition: Option<String>) -> Constraint {
    let t = bank.thresholds.choose(r).expect("non-empty threshold bank");
    Constraint {
        threshold: Some(t.value(r.gen_range(0..t.values.len()))),
        unit: Some(t.unit.clone()),
        scope: t.scope.clone(),
        level,
        condition,
        comparator: t.comparator,
        predicate: Some(t.measure.clone()),
    }
}

fn action_constraint(bank: &SynthBank, r: &mut ChaCha8Rng, condition: Option<String>) -> Constraint {
    let a = bank.actions.choose(r).expect("non-empty action bank");
    Constraint {
        threshold: None,
        unit: None,
        scope: a.scope.clone(),
        level: sample_level(r, a.negated),
        condition,
        comparator: Default::default(),
        predicate: Some(a.action.clone()),
    }
}

/// Generates one synthetic document from its own seed.
///
/// With probability `threshold_probability` the document carries numeric
/// thresholds; each of its requirements is then a threshold with the same
/// probability, and the first one is always a mandatory threshold with a
/// condition so every detail slot is represented.
pub fn generate_document(config: &GeneratorConfig, index: usize, seed: u64) -> GeneratedDocument {
    let bank = SynthBank::builtin();
    let mut r = rng(seed);
    let topic = config.topic_domains.choose(&mut r).expect("validated non-empty").clone();
    let p = config.threshold_probability;
    let with_thresholds = r.gen_bool(p);
    let n_req = r.gen_range(config.constraints_per_doc.0..=config.constraints_per_doc.1);
    let n_info = r.gen_range(config.informative_per_doc.0..=config.informative_per_doc.1);

    let mut reqs = Vec::with_capacity(n_req);
    for k in 0..n_req {
        let condition = r.gen_bool(0.5).then(|| pick_condition(&mut r));
        let c = if with_thresholds && k == 0 {
            let level = if r.gen_bool(0.6) { Level::Shall } else { Level::Must };
            let condition = pick_condition(&mut r);
            threshold_constraint(bank, &mut r, level, Some(condition))
        } else if with_thresholds && r.gen_bool(p) {
            let level = sample_level(&mut r, false);
            threshold_constraint(bank, &mut r, level, condition)
        } else {
            action_constraint(bank, &mut r, condition)
        };
        reqs.push(c);
    }

    // Interleave requirements with informative text; the opening segment
    // always states the topic.
    let mut kinds: Vec<Option<usize>> = (0..n_req).map(Some).chain(std::iter::repeat(None).take(n_info)).collect();
    kinds.shuffle(&mut r);
    let mut segments = vec![Segment::new("seg_1", format!("this document applies to hydrogen {topic} installations"))];
    let mut constraints = Vec::with_capacity(n_req);
    for kind in kinds {
        let seg_id = format!("seg_{}", segments.len() + 1);
        let text = match kind {
            Some(k) => {
                constraints.push(SegmentConstraint { seg_id: seg_id.clone(), constraint: reqs[k].clone() });
                render_constraint(&reqs[k])
            }
            None => bank.filler.choose(&mut r).expect("non-empty filler").clone(),
        };
        segments.push(Segment::new(seg_id, text));
    }
    GeneratedDocument {
        document: Document { id: document_id(index), source: Source::Synthetic, segments },
        topic,
        constraints,
    }
}

/// Generates `config.n_documents` documents, each from a seed derived from
/// the global seed and its index.
pub fn generate_documents(config: &GeneratorConfig) -> Vec<GeneratedDocument> {
    (0..config.n_documents)
        .map(|i| generate_document(config, i, derive_seed(config.rng_seed, &["document", &i.to_string()])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::{parse_constraint, UnitTable};

    #[test]
    fn deterministic_and_valid() {
        let cfg = GeneratorConfig::default();
        let a = generate_document(&cfg, 3, 99);
        assert_eq!(a, generate_document(&cfg, 3, 99));
        a.document.validate().unwrap();
        assert!(a.token_count() < 4000);
        for c in &a.constraints {
            c.constraint.validate().unwrap();
            assert!(a.document.segment(&c.seg_id).is_some());
        }
    }

    #[test]
    fn requirement_segments_round_trip() {
        let cfg = GeneratorConfig::default();
        for i in 0..50 {
            let d = generate_document(&cfg, i, i as u64);
            for c in &d.constraints {
                let text = &d.document.segment(&c.seg_id).unwrap().text;
                assert_eq!(&parse_constraint(text, UnitTable::builtin()).unwrap(), &c.constraint, "{text}");
            }
        }
    }

    #[test]
    fn threshold_documents_carry_an_anchor() {
        let cfg = GeneratorConfig::default();
        for i in 0..100 {
            let d = generate_document(&cfg, i, 1000 + i as u64);
            assert_eq!(d.has_thresholds(), d.anchors().next().is_some());
        }
    }
}
