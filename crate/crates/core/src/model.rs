//! Domain types shared across the toolkit.
//!
//! All types are plain immutable values with serde support. Field names of
//! [`ComplianceAnalysis`] and [`EvidenceCitation`] follow the structured
//! output format models are asked to produce (`is_compliant`,
//! `key_constraints`, `risks`, `evidence` with `doc`/`seg`/`quote`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::canonical::{tokenize, UnitTable};
use crate::templates::RenderTemplates;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("document `{0}` has no segments")]
    EmptyDocument(String),
    #[error("document `{doc}` repeats segment id `{seg}`")]
    DuplicateSegment { doc: String, seg: String },
    #[error("segment `{0}` token_count does not match its text")]
    TokenCount(String),
    #[error("constraint has a threshold but no unit")]
    ThresholdWithoutUnit,
    #[error("constraint scope is empty")]
    EmptyScope,
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error("violated constraint `{0}` carries no evidence citation")]
    MissingEvidence(String),
    #[error("unknown error type `{0}`")]
    UnknownErrorType(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Source {
    Gb,
    Cfr,
    Eurlex,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub text: String,
    pub token_count: usize,
}

impl Segment {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let token_count = tokenize(&text).len();
        Self { id: id.into(), text, token_count }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub source: Source,
    pub segments: Vec<Segment>,
}

impl Document {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.segments.is_empty() {
            return Err(ModelError::EmptyDocument(self.id.clone()));
        }
        let mut seen = BTreeSet::new();
        for seg in &self.segments {
            if !seen.insert(seg.id.as_str()) {
                return Err(ModelError::DuplicateSegment { doc: self.id.clone(), seg: seg.id.clone() });
            }
            if tokenize(&seg.text).len() != seg.token_count {
                return Err(ModelError::TokenCount(seg.id.clone()));
            }
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        self.segments.iter().map(|s| s.token_count).sum()
    }

    pub fn segment(&self, id: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }
}

/// Deontic strength of a requirement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Level {
    Shall,
    Should,
    Must,
    May,
    ShallNot,
    MustNot,
}

impl Level {
    pub const ALL: [Level; 6] =
        [Level::Shall, Level::Should, Level::Must, Level::May, Level::ShallNot, Level::MustNot];

    pub fn tag(self) -> &'static str {
        match self {
            Level::Shall => "SHALL",
            Level::Should => "SHOULD",
            Level::Must => "MUST",
            Level::May => "MAY",
            Level::ShallNot => "SHALL_NOT",
            Level::MustNot => "MUST_NOT",
        }
    }

    pub fn is_mandatory(self) -> bool {
        matches!(self, Level::Shall | Level::Must)
    }

    pub fn is_prohibition(self) -> bool {
        matches!(self, Level::ShallNot | Level::MustNot)
    }

    /// Obligation keyword swap used for level perturbations: shall↔should,
    /// must↔may; negated forms lose their negation.
    pub fn perturbed(self) -> Level {
        match self {
            Level::Shall => Level::Should,
            Level::Should => Level::Shall,
            Level::Must => Level::May,
            Level::May => Level::Must,
            Level::ShallNot => Level::Shall,
            Level::MustNot => Level::Must,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Comparator {
    #[default]
    Le,
    Ge,
    Lt,
    Gt,
    Eq,
}

impl Comparator {
    pub const ALL: [Comparator; 5] =
        [Comparator::Le, Comparator::Ge, Comparator::Lt, Comparator::Gt, Comparator::Eq];

    pub fn tag(self) -> &'static str {
        match self {
            Comparator::Le => "LE",
            Comparator::Ge => "GE",
            Comparator::Lt => "LT",
            Comparator::Gt => "GT",
            Comparator::Eq => "EQ",
        }
    }

    /// Whether `value` satisfies `value <cmp> limit`.
    pub fn holds(self, value: Decimal, limit: Decimal) -> bool {
        match self {
            Comparator::Le => value <= limit,
            Comparator::Ge => value >= limit,
            Comparator::Lt => value < limit,
            Comparator::Gt => value > limit,
            Comparator::Eq => value == limit,
        }
    }
}

/// The five detail error types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorType {
    Threshold,
    Unit,
    Scope,
    Level,
    Condition,
}

impl ErrorType {
    pub const ALL: [ErrorType; 5] =
        [ErrorType::Threshold, ErrorType::Unit, ErrorType::Scope, ErrorType::Level, ErrorType::Condition];

    pub fn name(self) -> &'static str {
        match self {
            ErrorType::Threshold => "threshold",
            ErrorType::Unit => "unit",
            ErrorType::Scope => "scope",
            ErrorType::Level => "level",
            ErrorType::Condition => "condition",
        }
    }

    /// Short tag `t1`..`t5`.
    pub fn short(self) -> &'static str {
        match self {
            ErrorType::Threshold => "t1",
            ErrorType::Unit => "t2",
            ErrorType::Scope => "t3",
            ErrorType::Level => "t4",
            ErrorType::Condition => "t5",
        }
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ErrorType {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        ErrorType::ALL
            .into_iter()
            .find(|t| t.name() == s || t.short() == s || format!("tau{}", &t.short()[1..]) == s)
            .ok_or(ModelError::UnknownErrorType(s))
    }
}

/// A ground-truth requirement: threshold, unit, scope, level and condition,
/// plus the comparator and measured quantity (or required action) needed to
/// render it as text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraint {
    #[serde(default, with = "rust_decimal::serde::str_option")]
    pub threshold: Option<Decimal>,
    /// Canonical unit id.
    #[serde(default)]
    pub unit: Option<String>,
    pub scope: String,
    pub level: Level,
    #[serde(default)]
    pub condition: Option<String>,
    #[serde(default)]
    pub comparator: Comparator,
    /// Measured quantity word for threshold constraints ("pressure"), the
    /// required action otherwise ("hold valid certification").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<String>,
}

impl Constraint {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.threshold.is_some() && self.unit.is_none() {
            return Err(ModelError::ThresholdWithoutUnit);
        }
        if self.scope.trim().is_empty() {
            return Err(ModelError::EmptyScope);
        }
        Ok(())
    }

    /// Detail types this constraint carries. Scope and level are always
    /// present; threshold/unit and condition only when set.
    pub fn element_types(&self) -> Vec<ErrorType> {
        let mut out = Vec::with_capacity(5);
        if self.threshold.is_some() {
            out.push(ErrorType::Threshold);
        }
        if self.unit.is_some() {
            out.push(ErrorType::Unit);
        }
        out.push(ErrorType::Scope);
        out.push(ErrorType::Level);
        if self.condition.is_some() {
            out.push(ErrorType::Condition);
        }
        out
    }

    /// Canonical text of one detail slot, if present.
    pub fn slot_text(&self, ty: ErrorType) -> Option<String> {
        self.slot_text_with(ty, UnitTable::builtin(), RenderTemplates::builtin())
    }

    pub fn slot_text_with(&self, ty: ErrorType, units: &UnitTable, tpl: &RenderTemplates) -> Option<String> {
        match ty {
            ErrorType::Threshold => self.threshold.map(format_threshold),
            ErrorType::Unit => self.unit.as_ref().map(|u| units.display(u).unwrap_or(u).to_string()),
            ErrorType::Scope => Some(self.scope.clone()),
            ErrorType::Level => Some(tpl.level(self.level).to_string()),
            ErrorType::Condition => self.condition.clone(),
        }
    }
}

/// One-decimal (at least) rendering of a threshold value: `70` → `"70.0"`.
pub fn format_threshold(value: Decimal) -> String {
    let v = value.normalize();
    if v.scale() == 0 {
        format!("{v}.0")
    } else {
        v.to_string()
    }
}

/// Tokens of a rendered constraint plus the token range of every detail slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintLayout {
    pub tokens: Vec<String>,
    pub spans: BTreeMap<ErrorType, Range<usize>>,
}

impl ConstraintLayout {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Canonical text form of a constraint, using the bundled templates.
///
/// `stationary storage pressure shall not exceed 70.0 MPa` for a threshold
/// constraint, `operators should hold valid certification` otherwise; a
/// condition, when present, is appended as a trailing clause.
pub fn render_constraint(c: &Constraint) -> String {
    layout_constraint(c).text()
}

pub fn layout_constraint(c: &Constraint) -> ConstraintLayout {
    layout_constraint_with(c, UnitTable::builtin(), RenderTemplates::builtin())
}

pub fn layout_constraint_with(c: &Constraint, units: &UnitTable, tpl: &RenderTemplates) -> ConstraintLayout {
    let mut tokens: Vec<String> = Vec::new();
    let mut spans = BTreeMap::new();
    let push = |tokens: &mut Vec<String>, text: &str| -> Range<usize> {
        let start = tokens.len();
        tokens.extend(tokenize(text));
        start..tokens.len()
    };

    spans.insert(ErrorType::Scope, push(&mut tokens, &c.scope));
    match c.threshold {
        Some(value) => {
            let dimension = c.unit.as_deref().and_then(|u| units.dimension(u));
            let measure = c
                .predicate
                .as_deref()
                .or_else(|| dimension.and_then(|d| tpl.measure(d)))
                .unwrap_or("value");
            push(&mut tokens, measure);
            spans.insert(ErrorType::Level, push(&mut tokens, tpl.level(c.level)));
            push(&mut tokens, tpl.comparator(c.comparator));
            spans.insert(ErrorType::Threshold, push(&mut tokens, &format_threshold(value)));
            if let Some(unit) = &c.unit {
                let display = units.display(unit).unwrap_or(unit);
                spans.insert(ErrorType::Unit, push(&mut tokens, display));
            }
        }
        None => {
            spans.insert(ErrorType::Level, push(&mut tokens, tpl.level(c.level)));
            if let Some(p) = &c.predicate {
                push(&mut tokens, p);
            }
        }
    }
    if let Some(cond) = &c.condition {
        spans.insert(ErrorType::Condition, push(&mut tokens, cond));
    }
    ConstraintLayout { tokens, spans }
}

/// Context-length bucket of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Short,
    Medium,
    Long,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Short, Tier::Medium, Tier::Long];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Short => "short",
            Tier::Medium => "medium",
            Tier::Long => "long",
        }
    }
}

/// One typed detail slot with its ground truth and (optional) prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetailElement {
    pub element_type: ErrorType,
    pub ground_truth: String,
    pub prediction: Option<String>,
    pub sample_id: String,
    pub constraint_id: String,
}

/// `(doc, seg, quote)` binding a conclusion to source text.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EvidenceCitation {
    #[serde(rename = "doc")]
    pub doc_id: String,
    #[serde(rename = "seg")]
    pub seg_id: String,
    pub quote: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyConstraint {
    /// Rendered requirement text.
    pub constraint: String,
    #[serde(rename = "type")]
    pub kind: ErrorType,
    #[serde(default)]
    pub current: Option<String>,
    pub violation: bool,
    #[serde(default)]
    pub evidence: Option<EvidenceCitation>,
    /// Structured slots; when absent they are recovered by parsing
    /// `constraint`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Constraint>,
}

/// Structured compliance analysis: verdict, key constraints, risks, evidence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplianceAnalysis {
    pub is_compliant: bool,
    pub key_constraints: Vec<KeyConstraint>,
    #[serde(default)]
    pub risks: Vec<String>,
    #[serde(default)]
    pub evidence: Vec<EvidenceCitation>,
}

impl ComplianceAnalysis {
    pub fn validate(&self) -> Result<(), ModelError> {
        for kc in &self.key_constraints {
            if kc.violation && kc.evidence.is_none() {
                return Err(ModelError::MissingEvidence(kc.constraint.clone()));
            }
            if let Some(d) = &kc.detail {
                d.validate()?;
            }
        }
        Ok(())
    }
}

/// Chosen/rejected responses differing only at `positions`.
///
/// Positions are in aligned coordinates: indices below the shared prefix are
/// ordinary token indices; the changed block follows, sized to the longer of
/// the two sides; the shared suffix is aligned from the end. For equal-length
/// responses this coincides with plain token indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: Vec<String>,
    pub rejected: Vec<String>,
    pub error_type: ErrorType,
    pub positions: Vec<usize>,
    pub seed: u64,
}
