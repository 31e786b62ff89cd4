//! Minimal detail perturbation: build a rejected response that differs from a
//! correct one in exactly one detail element, and locate the changed tokens.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rust_decimal::prelude::FromPrimitive;
use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};

use crate::canonical::{token_f1, TokenSpan, UnitTable};
use crate::model::{ComplianceAnalysis, Constraint, ErrorType, PreferencePair};
use crate::response::{layout_response_with, ElementSpan, ResponseLayout};
use crate::seed::{derive_seed, rng};
use crate::templates::{RenderTemplates, SubstitutionTables};

/// Substitutes for scope and condition phrases must stay below this token F1
/// against the original, which keeps them out of the ambiguous band.
pub const SUBSTITUTE_MAX_F1: f64 = 0.7;

const THRESHOLD_DRAWS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PerturbError {
    #[error("response has no {0} element")]
    NoEligibleElement(ErrorType),
    #[error("chosen and rejected responses are identical")]
    EmptyDiff,
    #[error("no admissible replacement for {ty} element `{value}`")]
    NoReplacement { ty: ErrorType, value: String },
}

/// Multiplicative factor set for threshold perturbation: `[low] ∪ [high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorRanges {
    pub low: (Decimal, Decimal),
    pub high: (Decimal, Decimal),
}

impl Default for FactorRanges {
    fn default() -> Self {
        let d = |s: &str| s.parse::<Decimal>().expect("literal");
        Self { low: (d("0.8"), d("0.9")), high: (d("1.1"), d("1.2")) }
    }
}

impl FactorRanges {
    /// Whether `perturbed / original` lies in the factor set, checked exactly.
    pub fn admits(&self, original: Decimal, perturbed: Decimal) -> bool {
        let within = |(lo, hi): (Decimal, Decimal)| {
            let (a, b) = (original * lo, original * hi);
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            perturbed >= a && perturbed <= b
        };
        within(self.low) || within(self.high)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub error_type: ErrorType,
    pub rng_seed: u64,
    pub factors: FactorRanges,
}

impl PerturbationSpec {
    pub fn new(error_type: ErrorType, rng_seed: u64) -> Self {
        Self { error_type, rng_seed, factors: FactorRanges::default() }
    }
}

/// `round(value × factor, 1)`.
pub fn scale_threshold(value: Decimal, factor: f64) -> Decimal {
    let f = Decimal::from_f64(factor).unwrap_or(Decimal::ONE);
    (value * f).round_dp_with_strategy(1, RoundingStrategy::MidpointAwayFromZero).normalize()
}

fn sample_threshold(value: Decimal, factors: &FactorRanges, rng: &mut ChaCha8Rng) -> Option<Decimal> {
    let to_f = |d: Decimal| -> f64 { d.try_into().unwrap_or(0.0) };
    for _ in 0..THRESHOLD_DRAWS {
        let (lo, hi) = if rng.gen_bool(0.5) { factors.low } else { factors.high };
        let f = rng.gen_range(to_f(lo)..=to_f(hi));
        let candidate = scale_threshold(value, f);
        // Rounding can push the ratio outside the factor set or back onto the
        // original value; resample in that case.
        if candidate != value && factors.admits(value, candidate) {
            return Some(candidate);
        }
    }
    // Small values: fall back to the admissible one-decimal grid points.
    let step = Decimal::new(1, 1);
    let lo = (value.abs() * factors.low.0).round_dp_with_strategy(1, RoundingStrategy::ToNegativeInfinity);
    let hi = (value.abs() * factors.high.1).round_dp_with_strategy(1, RoundingStrategy::ToPositiveInfinity);
    let mut grid = Vec::new();
    let mut v = lo;
    while v <= hi {
        let cand = if value.is_sign_negative() { -v } else { v };
        if cand != value && factors.admits(value, cand) {
            grid.push(cand.normalize());
        }
        v += step;
    }
    grid.choose(rng).copied()
}

fn pick_substitute(original: &str, options: Option<&[String]>, rng: &mut ChaCha8Rng) -> Option<String> {
    let orig = TokenSpan::normalize(original);
    let admissible: Vec<&String> = options
        .unwrap_or_default()
        .iter()
        .filter(|o| token_f1(&orig, &TokenSpan::normalize(o)) < SUBSTITUTE_MAX_F1)
        .collect();
    admissible.choose(rng).map(|s| (*s).clone())
}

/// Longest-common-prefix/suffix alignment of two token sequences that differ
/// in one contiguous block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiffBlock {
    pub prefix: usize,
    pub suffix: usize,
    pub chosen_len: usize,
    pub rejected_len: usize,
}

impl DiffBlock {
    pub fn compute<S: PartialEq>(chosen: &[S], rejected: &[S]) -> Self {
        let prefix = chosen.iter().zip(rejected).take_while(|(a, b)| a == b).count();
        let max_suffix = chosen.len().min(rejected.len()) - prefix;
        let suffix = chosen
            .iter()
            .rev()
            .zip(rejected.iter().rev())
            .take(max_suffix)
            .take_while(|(a, b)| a == b)
            .count();
        Self { prefix, suffix, chosen_len: chosen.len(), rejected_len: rejected.len() }
    }

    pub fn chosen_changed(&self) -> Range<usize> {
        self.prefix..self.chosen_len - self.suffix
    }

    pub fn rejected_changed(&self) -> Range<usize> {
        self.prefix..self.rejected_len - self.suffix
    }

    /// Width of the changed block in aligned coordinates.
    pub fn block_len(&self) -> usize {
        self.chosen_changed().len().max(self.rejected_changed().len())
    }

    pub fn aligned_len(&self) -> usize {
        self.prefix + self.block_len() + self.suffix
    }

    pub fn positions(&self) -> Vec<usize> {
        (self.prefix..self.prefix + self.block_len()).collect()
    }

    /// Token indices `(chosen, rejected)` occupying aligned position `t`;
    /// either side may be absent inside the changed block.
    pub fn sides(&self, t: usize) -> (Option<usize>, Option<usize>) {
        let block = self.block_len();
        if t < self.prefix {
            (Some(t), Some(t))
        } else if t < self.prefix + block {
            let k = t - self.prefix;
            let w = (k < self.chosen_changed().len()).then_some(self.prefix + k);
            let l = (k < self.rejected_changed().len()).then_some(self.prefix + k);
            (w, l)
        } else {
            let from_end = self.aligned_len() - t;
            (Some(self.chosen_len - from_end), Some(self.rejected_len - from_end))
        }
    }
}

/// Aligned positions where `chosen` and `rejected` differ: everything outside
/// the longest common prefix and suffix.
pub fn diff_positions<S: PartialEq>(chosen: &[S], rejected: &[S]) -> Result<Vec<usize>, PerturbError> {
    let block = DiffBlock::compute(chosen, rejected);
    if block.block_len() == 0 {
        return Err(PerturbError::EmptyDiff);
    }
    Ok(block.positions())
}

/// A perturbation together with where it happened.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub pair: PreferencePair,
    pub constraint_index: usize,
    /// Span of the perturbed element in the chosen response.
    pub element: ElementSpan,
    /// Span of the replacement in the rejected response (empty when dropped).
    pub replacement: Range<usize>,
    pub rejected_analysis: ComplianceAnalysis,
}

impl Perturbation {
    /// Changed tokens on both sides lie inside the perturbed element's span.
    pub fn is_minimal(&self) -> bool {
        let block = DiffBlock::compute(&self.pair.chosen, &self.pair.rejected);
        let (w, l) = (block.chosen_changed(), block.rejected_changed());
        let inside = |r: &Range<usize>, outer: &Range<usize>| r.is_empty() || (r.start >= outer.start && r.end <= outer.end);
        block.block_len() > 0
            && inside(&w, &self.element.span)
            && inside(&l, &self.replacement)
            && self.pair.positions == block.positions()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Perturber<'a> {
    pub units: &'a UnitTable,
    pub tables: &'a SubstitutionTables,
    pub templates: &'a RenderTemplates,
}

impl Default for Perturber<'static> {
    fn default() -> Self {
        Self {
            units: UnitTable::builtin(),
            tables: SubstitutionTables::builtin(),
            templates: RenderTemplates::builtin(),
        }
    }
}

impl<'a> Perturber<'a> {
    pub fn layout(&self, analysis: &ComplianceAnalysis) -> ResponseLayout {
        layout_response_with(analysis, self.units, self.templates)
    }

    /// Replaces one uniformly chosen element of `spec.error_type` in `chosen`.
    pub fn perturb(&self, chosen: &ComplianceAnalysis, prompt: &str, spec: &PerturbationSpec) -> Result<Perturbation, PerturbError> {
        let ty = spec.error_type;
        let layout = self.layout(chosen);
        let eligible: Vec<&ElementSpan> = layout.elements_of(ty).collect();
        let mut rng = rng(spec.rng_seed);
        let target = (*eligible.choose(&mut rng).ok_or(PerturbError::NoEligibleElement(ty))?).clone();

        let original = chosen.key_constraints[target.constraint_index]
            .detail
            .as_ref()
            .expect("elements only come from structured constraints");
        let modified = self.replace(original, ty, &spec.factors, &mut rng)?;

        let mut rejected_analysis = chosen.clone();
        let kc = &mut rejected_analysis.key_constraints[target.constraint_index];
        kc.constraint = crate::model::layout_constraint_with(&modified, self.units, self.templates).text();
        kc.detail = Some(modified);
        let rejected = self.layout(&rejected_analysis);

        let positions = diff_positions(&layout.tokens, &rejected.tokens)?;
        let replacement = rejected
            .elements
            .iter()
            .find(|e| e.constraint_index == target.constraint_index && e.error_type == ty)
            .map(|e| e.span.clone())
            .unwrap_or(target.span.start..target.span.start);
        Ok(Perturbation {
            pair: PreferencePair {
                prompt: prompt.to_string(),
                chosen: layout.tokens,
                rejected: rejected.tokens,
                error_type: ty,
                positions,
                seed: spec.rng_seed,
            },
            constraint_index: target.constraint_index,
            element: target,
            replacement,
            rejected_analysis,
        })
    }

    fn replace(&self, c: &Constraint, ty: ErrorType, factors: &FactorRanges, rng: &mut ChaCha8Rng) -> Result<Constraint, PerturbError> {
        let mut out = c.clone();
        let no_replacement = |value: String| PerturbError::NoReplacement { ty, value };
        match ty {
            ErrorType::Threshold => {
                let value = c.threshold.ok_or(PerturbError::NoEligibleElement(ty))?;
                out.threshold = Some(sample_threshold(value, factors, rng).ok_or_else(|| no_replacement(value.to_string()))?);
            }
            ErrorType::Unit => {
                let unit = c.unit.as_deref().ok_or(PerturbError::NoEligibleElement(ty))?;
                let dim = self.units.dimension(unit).ok_or_else(|| no_replacement(unit.to_string()))?;
                let options: Vec<&str> = self.units.units_of(dim).into_iter().filter(|u| *u != unit).collect();
                out.unit = Some(options.choose(rng).ok_or_else(|| no_replacement(unit.to_string()))?.to_string());
            }
            ErrorType::Scope => {
                out.scope = pick_substitute(&c.scope, self.tables.scopes.get(&c.scope), rng)
                    .ok_or_else(|| no_replacement(c.scope.clone()))?;
            }
            ErrorType::Level => out.level = c.level.perturbed(),
            ErrorType::Condition => {
                let cond = c.condition.as_deref().ok_or(PerturbError::NoEligibleElement(ty))?;
                let drop = rng.gen_bool(0.5);
                out.condition = if drop {
                    None
                } else {
                    // Conditions missing from the table can only be dropped.
                    pick_substitute(cond, self.tables.conditions.get(cond), rng)
                };
            }
        }
        Ok(out)
    }
}

/// A response to perturb: id (for seed derivation), prompt and analysis.
#[derive(Debug, Clone)]
pub struct ResponseInput<'r> {
    pub id: &'r str,
    pub prompt: &'r str,
    pub analysis: &'r ComplianceAnalysis,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeBalance {
    pub requested: usize,
    pub emitted: usize,
    pub skipped: usize,
    pub share: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub total: usize,
    pub by_type: BTreeMap<ErrorType, TypeBalance>,
}

impl BalanceReport {
    /// Largest deviation of any requested type's share from an even split.
    pub fn max_imbalance(&self) -> f64 {
        let k = self.by_type.len();
        if k == 0 {
            return 0.0;
        }
        let even = 1.0 / k as f64;
        self.by_type.values().map(|b| (b.share - even).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Default)]
pub struct PairBuild {
    pub pairs: Vec<PreferencePair>,
    pub report: BalanceReport,
}

/// One pair per (response, type) where the response has an element of that
/// type. Responses lacking a type are skipped and counted in the report.
pub fn build_pairs(perturber: &Perturber<'_>, responses: &[ResponseInput<'_>], types: &[ErrorType], seed: u64) -> Result<PairBuild, PerturbError> {
    let mut build = PairBuild::default();
    for ty in types {
        build.report.by_type.entry(*ty).or_default();
    }
    for r in responses {
        for &ty in types {
            let spec = PerturbationSpec::new(ty, derive_seed(seed, &[r.id, ty.name()]));
            let entry = build.report.by_type.get_mut(&ty).expect("seeded above");
            entry.requested += 1;
            match perturber.perturb(r.analysis, r.prompt, &spec) {
                Ok(p) => {
                    entry.emitted += 1;
                    build.pairs.push(p.pair);
                }
                Err(PerturbError::NoEligibleElement(_)) => entry.skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    build.report.total = build.pairs.len();
    let total = build.report.total.max(1) as f64;
    for b in build.report.by_type.values_mut() {
        b.share = b.emitted as f64 / total;
    }
    let skipped: usize = build.report.by_type.values().map(|b| b.skipped).sum();
    if skipped > 0 {
        log::info!("skipped {skipped} (response, type) combinations without an eligible element");
    }
    Ok(build)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Comparator, EvidenceCitation, KeyConstraint, Level};

    fn dec(s: &str) -> Decimal {
        s.parse().unwrap()
    }

    fn analysis(threshold: Option<&str>, condition: Option<&str>, level: Level, scope: &str) -> ComplianceAnalysis {
        let c = Constraint {
            threshold: threshold.map(dec),
            unit: threshold.map(|_| "mpa".to_string()),
            scope: scope.into(),
            level,
            condition: condition.map(String::from),
            comparator: Comparator::Le,
            predicate: Some(if threshold.is_some() { "pressure" } else { "hold valid certification" }.into()),
        };
        ComplianceAnalysis {
            is_compliant: false,
            key_constraints: vec![KeyConstraint {
                constraint: crate::model::render_constraint(&c),
                kind: ErrorType::Threshold,
                current: None,
                violation: true,
                evidence: Some(EvidenceCitation { doc_id: "D1".into(), seg_id: "seg_1".into(), quote: String::new() }),
                detail: Some(c),
            }],
            risks: vec![],
            evidence: vec![],
        }
    }

    #[test]
    fn unit_swap_keeps_number() {
        let a = analysis(Some("70.0"), None, Level::Shall, "stationary storage");
        let p = Perturber::default();
        // Every same-dimension replacement must keep the numeric token.
        let mut saw_bar = false;
        for seed in 0..40 {
            let out = p.perturb(&a, "q", &PerturbationSpec::new(ErrorType::Unit, seed)).unwrap();
            let text = out.pair.rejected.join(" ");
            assert!(text.contains("not exceed 70.0 "), "{text}");
            assert_eq!(out.pair.positions.len(), 1);
            saw_bar |= text.contains("70.0 bar");
        }
        assert!(saw_bar);
    }

    #[test]
    fn level_swap_example() {
        let a = analysis(None, None, Level::Shall, "operators");
        let out = Perturber::default().perturb(&a, "q", &PerturbationSpec::new(ErrorType::Level, 3)).unwrap();
        assert!(out.pair.chosen.join(" ").contains("operators shall hold"));
        assert!(out.pair.rejected.join(" ").contains("operators should hold"));
        assert!(out.is_minimal());
    }

    #[test]
    fn threshold_factor_example() {
        assert_eq!(scale_threshold(dec("70.0"), 1.1), dec("77.0"));
        assert_eq!(format!("{}", crate::model::format_threshold(scale_threshold(dec("70.0"), 1.1))), "77.0");
    }

    #[test]
    fn threshold_samples_stay_in_factor_set() {
        let f = FactorRanges::default();
        for v in ["1.0", "1.3", "3.5", "70.0", "87.5", "12000.0"] {
            let v = dec(v);
            for s in 0..200 {
                let got = sample_threshold(v, &f, &mut rng(s)).unwrap();
                assert!(f.admits(v, got) && got != v, "{v} -> {got}");
                assert!(got.scale() <= 1);
            }
        }
        assert!(!f.admits(dec("70"), dec("70")));
        assert!(f.admits(dec("70"), dec("56")) && f.admits(dec("70"), dec("84")));
        assert!(!f.admits(dec("70"), dec("84.1")));
    }

    #[test]
    fn diff_position_examples() {
        let w: Vec<&str> = "a b c".split(' ').collect();
        assert_eq!(diff_positions(&w, &w), Err(PerturbError::EmptyDiff));
        let l: Vec<&str> = "a x c".split(' ').collect();
        assert_eq!(diff_positions(&w, &l).unwrap(), vec![1]);

        // Dropping a five-token clause before the final period.
        let w: Vec<&str> = "x shall y when pressure exceeds 50.0 MPa .".split(' ').collect();
        let l: Vec<&str> = "x shall y .".split(' ').collect();
        let p = diff_positions(&w, &l).unwrap();
        assert_eq!(p, vec![3, 4, 5, 6, 7]);
        let b = DiffBlock::compute(&w, &l);
        assert_eq!(b.sides(3), (Some(3), None));
        assert_eq!(b.sides(8), (Some(8), Some(3)));
    }

    #[test]
    fn condition_perturbation_drops_or_alters() {
        let a = analysis(Some("70.0"), Some("when pressure exceeds 50.0 MPa"), Level::Shall, "stationary storage");
        let p = Perturber::default();
        let (mut dropped, mut altered) = (0, 0);
        for seed in 0..50 {
            let out = p.perturb(&a, "q", &PerturbationSpec::new(ErrorType::Condition, seed)).unwrap();
            assert!(out.is_minimal());
            match &out.rejected_analysis.key_constraints[0].detail.as_ref().unwrap().condition {
                None => {
                    dropped += 1;
                    assert_eq!(out.pair.positions.len(), 5);
                    assert_eq!(out.pair.chosen.len() - out.pair.rejected.len(), 5);
                }
                Some(_) => altered += 1,
            }
        }
        assert!(dropped > 10 && altered > 10);
    }

    #[test]
    fn missing_type_is_reported() {
        let a = analysis(None, None, Level::Must, "operators");
        let err = Perturber::default().perturb(&a, "q", &PerturbationSpec::new(ErrorType::Threshold, 1)).unwrap_err();
        assert_eq!(err, PerturbError::NoEligibleElement(ErrorType::Threshold));
    }

    #[test]
    fn substitution_tables_have_admissible_entries() {
        let t = SubstitutionTables::builtin();
        for (phrase, alts) in t.scopes.iter().chain(t.conditions.iter()) {
            let mut r = rng(0);
            assert!(pick_substitute(phrase, Some(alts), &mut r).is_some(), "{phrase}");
        }
    }

    #[test]
    fn build_pairs_counts_and_determinism() {
        let full = analysis(Some("70.0"), Some("during refuelling operations"), Level::Shall, "stationary storage");
        let no_cond = analysis(Some("35.0"), None, Level::Shall, "stationary storage");
        let ids: Vec<String> = (0..100).map(|i| format!("r{i}")).collect();
        let inputs: Vec<ResponseInput> =
            ids.iter().map(|id| ResponseInput { id, prompt: "q", analysis: &full }).collect();
        let p = Perturber::default();
        let a = build_pairs(&p, &inputs, &ErrorType::ALL, 9).unwrap();
        assert_eq!(a.pairs.len(), 500);
        for b in a.report.by_type.values() {
            assert_eq!(b.emitted, 100);
            assert!((b.share - 0.2).abs() < 1e-12);
        }
        let b = build_pairs(&p, &inputs, &ErrorType::ALL, 9).unwrap();
        assert_eq!(serde_json::to_string(&a.pairs).unwrap(), serde_json::to_string(&b.pairs).unwrap());

        let mixed: Vec<ResponseInput> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| ResponseInput { id, prompt: "q", analysis: if i % 2 == 0 { &full } else { &no_cond } })
            .collect();
        let m = build_pairs(&p, &mixed, &ErrorType::ALL, 9).unwrap();
        assert_eq!(m.report.by_type[&ErrorType::Condition].skipped, 50);
        assert_eq!(m.report.by_type[&ErrorType::Condition].emitted, 50);
        assert!(m.report.max_imbalance() > 0.01);
    }
}
