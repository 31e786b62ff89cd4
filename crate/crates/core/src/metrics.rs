//! Detail Error Rate, compliance accuracy and evidence scoring.
//!
//! Matching predicates are type dependent. Thresholds compare exactly after
//! canonical decimal parsing, units compare canonical ids, and scope, level
//! and condition spans compare by token F1 on normalized tokens, accepted at
//! F1 ≥ 0.8. Spans scoring inside `[0.7, 0.9]` are flagged as ambiguous; the
//! default policy still decides them by the 0.8 line, the strict policy
//! leaves them out of the rate entirely.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::canonical::{parse_number, parse_slots, token_f1, token_f1_slices, tokenize, CanonicalError, RawSlots, TokenSpan, UnitTable};
use crate::model::{ComplianceAnalysis, DetailElement, Document, ErrorType, EvidenceCitation, KeyConstraint, Tier};
use crate::templates::RenderTemplates;

pub const MATCH_F1: f64 = 0.8;
pub const AMBIGUOUS_LOW: f64 = 0.7;
pub const AMBIGUOUS_HIGH: f64 = 0.9;
/// Best-window token F1 needed for a non-verbatim quote to count as
/// consistent with its source segment.
pub const CONSISTENCY_F1: f64 = 0.9;
pub const CONSISTENCY_METHOD: &str = "verbatim substring or best-window token F1 >= 0.9 (lexical proxy for semantic similarity)";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("no detail elements to evaluate")]
    EmptyEvaluation,
    #[error("length mismatch: {pred} predictions vs {gold} gold labels")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("ground truth `{value}` of {ty} element is not canonical: {source}")]
    GroundTruth { ty: ErrorType, value: String, source: CanonicalError },
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Judgement {
    Match,
    Mismatch,
    /// Span F1 inside the ambiguous band; `accepted` is the F1 ≥ 0.8 decision.
    Ambiguous { f1: f64, accepted: bool },
}

impl Judgement {
    pub fn is_error(self) -> bool {
        match self {
            Judgement::Match => false,
            Judgement::Mismatch => true,
            Judgement::Ambiguous { accepted, .. } => !accepted,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmbiguityPolicy {
    /// Ambiguous spans are decided by the 0.8 line and counted.
    #[default]
    Threshold,
    /// Ambiguous spans are excluded from numerator and denominator.
    Strict,
}

fn judge_span(gt: &str, pred: &str) -> Judgement {
    let f1 = token_f1(&TokenSpan::normalize(gt), &TokenSpan::normalize(pred));
    let accepted = f1 >= MATCH_F1;
    if (AMBIGUOUS_LOW..=AMBIGUOUS_HIGH).contains(&f1) {
        Judgement::Ambiguous { f1, accepted }
    } else if accepted {
        Judgement::Match
    } else {
        Judgement::Mismatch
    }
}

/// Applies the type's matching predicate. A missing prediction is a
/// mismatch; an unreadable predicted number or unit is a mismatch too, while
/// a non-canonical ground truth is an error.
pub fn match_element(e: &DetailElement, table: &UnitTable) -> Result<Judgement, MetricsError> {
    let gt_err = |source| MetricsError::GroundTruth { ty: e.element_type, value: e.ground_truth.clone(), source };
    let Some(pred) = e.prediction.as_deref() else {
        return Ok(Judgement::Mismatch);
    };
    let verdict = |same: bool| if same { Judgement::Match } else { Judgement::Mismatch };
    Ok(match e.element_type {
        ErrorType::Threshold => {
            let gt = parse_number(&e.ground_truth).map_err(gt_err)?;
            verdict(parse_number(pred).is_ok_and(|p| p == gt))
        }
        ErrorType::Unit => {
            let gt = table.canonicalize(&e.ground_truth).map_err(gt_err)?;
            verdict(table.canonicalize(pred).is_ok_and(|p| p == gt))
        }
        ErrorType::Scope | ErrorType::Level | ErrorType::Condition => judge_span(&e.ground_truth, pred),
    })
}

/// Mismatch/total counts per type. Tallies merge by addition, so partial
/// results computed in any order combine to the same totals.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerTally {
    pub mismatches: BTreeMap<ErrorType, usize>,
    pub totals: BTreeMap<ErrorType, usize>,
    pub ambiguous: usize,
    pub excluded: usize,
}

impl DerTally {
    pub fn record(&mut self, ty: ErrorType, j: Judgement, policy: AmbiguityPolicy) {
        if let Judgement::Ambiguous { .. } = j {
            self.ambiguous += 1;
            if policy == AmbiguityPolicy::Strict {
                self.excluded += 1;
                return;
            }
        }
        *self.totals.entry(ty).or_insert(0) += 1;
        if j.is_error() {
            *self.mismatches.entry(ty).or_insert(0) += 1;
        }
    }

    pub fn merge(&mut self, other: &DerTally) {
        for (ty, n) in &other.mismatches {
            *self.mismatches.entry(*ty).or_insert(0) += n;
        }
        for (ty, n) in &other.totals {
            *self.totals.entry(*ty).or_insert(0) += n;
        }
        self.ambiguous += other.ambiguous;
        self.excluded += other.excluded;
    }

    pub fn k_total(&self) -> usize {
        self.totals.values().sum()
    }

    pub fn der(&self) -> Result<Der, MetricsError> {
        let k = self.k_total();
        if k == 0 {
            return Err(MetricsError::EmptyEvaluation);
        }
        let wrong: usize = self.mismatches.values().sum();
        let by_type = self
            .totals
            .iter()
            .filter(|(_, n)| **n > 0)
            .map(|(ty, n)| (*ty, self.mismatches.get(ty).copied().unwrap_or(0) as f64 / *n as f64))
            .collect();
        Ok(Der { overall: wrong as f64 / k as f64, by_type, k_total: k, ambiguous_count: self.ambiguous })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Der {
    pub overall: f64,
    /// Only types with at least one element appear.
    pub by_type: BTreeMap<ErrorType, f64>,
    pub k_total: usize,
    pub ambiguous_count: usize,
}

pub fn tally(elements: &[DetailElement], table: &UnitTable, policy: AmbiguityPolicy) -> Result<DerTally, MetricsError> {
    let mut t = DerTally::default();
    for e in elements {
        t.record(e.element_type, match_element(e, table)?, policy);
    }
    Ok(t)
}

/// Overall and per-type detail error rates. The overall rate weights each
/// type by its element count; it is not the mean of the per-type rates.
pub fn compute_der(elements: &[DetailElement], table: &UnitTable, policy: AmbiguityPolicy) -> Result<Der, MetricsError> {
    tally(elements, table, policy)?.der()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl EvidenceScores {
    fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let precision = if predicted > 0 { tp as f64 / predicted as f64 } else if gold == 0 { 1.0 } else { 0.0 };
        let recall = if gold > 0 { tp as f64 / gold as f64 } else if predicted == 0 { 1.0 } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { precision, recall, f1, true_positives: tp, predicted, gold }
    }

    /// Micro-average: counts add, ratios are recomputed.
    pub fn merge(&self, other: &EvidenceScores) -> Self {
        Self::from_counts(
            self.true_positives + other.true_positives,
            self.predicted + other.predicted,
            self.gold + other.gold,
        )
    }
}

fn citation_keys(cites: &[EvidenceCitation]) -> BTreeSet<(&str, &str)> {
    cites.iter().map(|c| (c.doc_id.as_str(), c.seg_id.as_str())).collect()
}

/// Citation precision/recall/F1 on `(doc, seg)` identity; quotes are
/// ignored here and judged by [`evidence_consistency`].
pub fn evidence_scores(pred: &[EvidenceCitation], gold: &[EvidenceCitation]) -> EvidenceScores {
    let p = citation_keys(pred);
    let g = citation_keys(gold);
    EvidenceScores::from_counts(p.intersection(&g).count(), p.len(), g.len())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub score: f64,
    pub consistent: usize,
    pub total: usize,
    /// `(doc, seg)` pairs that resolve to no segment; counted inconsistent.
    pub dangling: Vec<(String, String)>,
}

impl ConsistencyReport {
    fn finish(mut self) -> Self {
        self.score = if self.total == 0 { 1.0 } else { self.consistent as f64 / self.total as f64 };
        self
    }

    pub fn merge(&self, other: &ConsistencyReport) -> Self {
        let mut dangling = self.dangling.clone();
        dangling.extend(other.dangling.iter().cloned());
        ConsistencyReport {
            score: 0.0,
            consistent: self.consistent + other.consistent,
            total: self.total + other.total,
            dangling,
        }
        .finish()
    }
}

/// Best token F1 between `quote` and any window of `source` whose length is
/// within one token of the quote's.
pub fn best_window_f1(quote: &str, source: &str) -> f64 {
    let q = TokenSpan::normalize(quote);
    let s = TokenSpan::normalize(source);
    if q.is_empty() {
        return if s.is_empty() { 1.0 } else { 0.0 };
    }
    let st = s.tokens();
    let mut best = token_f1_slices(q.tokens(), st);
    for width in q.len().saturating_sub(1).max(1)..=q.len() + 1 {
        if width > st.len() {
            break;
        }
        for w in st.windows(width) {
            best = best.max(token_f1_slices(q.tokens(), w));
        }
    }
    best
}

/// Fraction of citations whose quote appears verbatim in the cited segment
/// or reaches best-window F1 ≥ 0.9 against it. Empty input scores 1.0.
pub fn evidence_consistency(pred: &[EvidenceCitation], docs: &[Document]) -> ConsistencyReport {
    let index: BTreeMap<&str, &Document> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut report = ConsistencyReport { total: pred.len(), ..Default::default() };
    for c in pred {
        let Some(seg) = index.get(c.doc_id.as_str()).and_then(|d| d.segment(&c.seg_id)) else {
            report.dangling.push((c.doc_id.clone(), c.seg_id.clone()));
            continue;
        };
        if (!c.quote.is_empty() && seg.text.contains(c.quote.as_str())) || best_window_f1(&c.quote, &seg.text) >= CONSISTENCY_F1 {
            report.consistent += 1;
        }
    }
    report.finish()
}

pub fn compliance_accuracy(preds: &[bool], gold: &[bool]) -> Result<f64, MetricsError> {
    if preds.len() != gold.len() {
        return Err(MetricsError::LengthMismatch { pred: preds.len(), gold: gold.len() });
    }
    if gold.is_empty() {
        return Err(MetricsError::EmptyEvaluation);
    }
    let hits = preds.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// All citations of an analysis: per-constraint ones plus the top-level list.
pub fn all_citations(a: &ComplianceAnalysis) -> Vec<EvidenceCitation> {
    let mut out: Vec<EvidenceCitation> = a.key_constraints.iter().filter_map(|k| k.evidence.clone()).collect();
    out.extend(a.evidence.iter().cloned());
    out
}

fn raw_slot(slots: &RawSlots, ty: ErrorType) -> Option<String> {
    match ty {
        ErrorType::Threshold => slots.threshold.clone(),
        ErrorType::Unit => slots.unit.clone(),
        ErrorType::Scope => slots.scope.clone(),
        ErrorType::Level => slots.level.clone(),
        ErrorType::Condition => slots.condition.clone(),
    }
}

fn cite_key(k: &KeyConstraint) -> Option<(&str, &str)> {
    k.evidence.as_ref().map(|e| (e.doc_id.as_str(), e.seg_id.as_str()))
}

fn predicted_slot(kc: &KeyConstraint, ty: ErrorType, units: &UnitTable, tpl: &RenderTemplates) -> Option<String> {
    match &kc.detail {
        Some(d) => d.slot_text_with(ty, units, tpl),
        None => raw_slot(&parse_slots(&tokenize(&kc.constraint), tpl), ty),
    }
}

/// Pairs each gold key constraint with a predicted one (same citation first,
/// then same position) and emits one element per gold detail slot.
pub fn detail_elements(sample_id: &str, gold: &ComplianceAnalysis, pred: Option<&ComplianceAnalysis>, units: &UnitTable) -> Vec<DetailElement> {
    let tpl = RenderTemplates::builtin();
    let preds: &[KeyConstraint] = pred.map(|p| p.key_constraints.as_slice()).unwrap_or_default();
    let mut used = vec![false; preds.len()];
    let mut out = Vec::new();
    for (gi, g) in gold.key_constraints.iter().enumerate() {
        let Some(gdetail) = crate::response::key_constraint_detail(&g.constraint, g.detail.as_ref(), units) else {
            continue;
        };
        let by_cite = cite_key(g).and_then(|gc| (0..preds.len()).find(|&i| !used[i] && cite_key(&preds[i]) == Some(gc)));
        let matched = by_cite.or_else(|| (gi < preds.len() && !used[gi]).then_some(gi));
        if let Some(i) = matched {
            used[i] = true;
        }
        for ty in gdetail.element_types() {
            out.push(DetailElement {
                element_type: ty,
                ground_truth: gdetail.slot_text_with(ty, units, tpl).unwrap_or_default(),
                prediction: matched.and_then(|i| predicted_slot(&preds[i], ty, units, tpl)),
                sample_id: sample_id.to_string(),
                constraint_id: format!("{sample_id}#{gi}"),
            });
        }
    }
    out
}

/// A gold sample as seen by the evaluator.
#[derive(Debug, Clone)]
pub struct GoldSample<'a> {
    pub id: &'a str,
    pub tier: Option<Tier>,
    pub analysis: &'a ComplianceAnalysis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub der_overall: f64,
    pub der_by_type: BTreeMap<ErrorType, f64>,
    pub der_by_tier: BTreeMap<Tier, f64>,
    pub compliance_accuracy: f64,
    pub evidence_precision: f64,
    pub evidence_recall: f64,
    pub evidence_f1: f64,
    pub evidence_consistency: f64,
    pub consistency_method: String,
    pub ambiguous_policy: AmbiguityPolicy,
    pub ambiguous_count: usize,
    pub dangling_citations: usize,
    pub missing_predictions: usize,
    pub n_samples: usize,
    pub k_total: usize,
}

/// Scores predictions against gold samples. A sample with no prediction
/// counts as a wrong verdict with every detail missing.
pub fn evaluate(
    gold: &[GoldSample<'_>],
    predictions: &BTreeMap<String, ComplianceAnalysis>,
    docs: &[Document],
    units: &UnitTable,
    policy: AmbiguityPolicy,
) -> Result<EvalReport, MetricsError> {
    let mut overall = DerTally::default();
    let mut per_tier: BTreeMap<Tier, DerTally> = BTreeMap::new();
    let mut verdicts = (Vec::new(), Vec::new());
    let mut evidence = EvidenceScores::from_counts(0, 0, 0);
    let mut evidence_started = false;
    let mut consistency = ConsistencyReport::default().finish();
    let mut missing = 0;
    for s in gold {
        let pred = predictions.get(s.id);
        if pred.is_none() {
            missing += 1;
        }
        let t = tally(&detail_elements(s.id, s.analysis, pred, units), units, policy)?;
        if let Some(tier) = s.tier {
            per_tier.entry(tier).or_default().merge(&t);
        }
        overall.merge(&t);
        verdicts.0.push(pred.map(|p| p.is_compliant) == Some(s.analysis.is_compliant));
        verdicts.1.push(true);
        let pred_cites = pred.map(all_citations).unwrap_or_default();
        let scores = evidence_scores(&pred_cites, &all_citations(s.analysis));
        evidence = if evidence_started { evidence.merge(&scores) } else { scores };
        evidence_started = true;
        consistency = consistency.merge(&evidence_consistency(&pred_cites, docs));
    }
    let der = overall.der()?;
    let der_by_tier = per_tier
        .iter()
        .filter_map(|(tier, t)| t.der().ok().map(|d| (*tier, d.overall)))
        .collect();
    Ok(EvalReport {
        der_overall: der.overall,
        der_by_type: der.by_type,
        der_by_tier,
        compliance_accuracy: compliance_accuracy(&verdicts.0, &verdicts.1)?,
        evidence_precision: evidence.precision,
        evidence_recall: evidence.recall,
        evidence_f1: evidence.f1,
        evidence_consistency: consistency.score,
        consistency_method: CONSISTENCY_METHOD.to_string(),
        ambiguous_policy: policy,
        ambiguous_count: der.ambiguous_count,
        dangling_citations: consistency.dangling.len(),
        missing_predictions: missing,
        n_samples: gold.len(),
        k_total: der.k_total,
    })
}
