//! Text form of a [`ComplianceAnalysis`] as a model would emit it, with the
//! token span of every detail element, and the inverse parser.
//!
//! ```text
//! verdict : violation . requirement : <constraint> . evidence : <doc> <seg> . requirement : ...
//! ```

use std::ops::Range;

use crate::canonical::{parse_slots, tokenize, RawSlots, UnitTable};
use crate::model::{layout_constraint_with, ComplianceAnalysis, Constraint, ErrorType, EvidenceCitation, KeyConstraint};
use crate::templates::RenderTemplates;

pub const VERDICT_COMPLIANT: &str = "compliant";
pub const VERDICT_VIOLATION: &str = "violation";

/// One detail slot located inside a rendered response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElementSpan {
    pub constraint_index: usize,
    pub error_type: ErrorType,
    pub span: Range<usize>,
    pub ground_truth: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseLayout {
    pub tokens: Vec<String>,
    pub elements: Vec<ElementSpan>,
}

impl ResponseLayout {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn elements_of(&self, ty: ErrorType) -> impl Iterator<Item = &ElementSpan> {
        self.elements.iter().filter(move |e| e.error_type == ty)
    }
}

/// Structured constraint for a key constraint: its `detail` if present,
/// otherwise parsed from its text.
pub fn key_constraint_detail(text: &str, detail: Option<&Constraint>, units: &UnitTable) -> Option<Constraint> {
    detail.cloned().or_else(|| crate::canonical::parse_constraint(text, units).ok())
}

/// Renders the verdict, every key constraint and its citation. Constraints
/// without structured detail are rendered from their text verbatim and
/// contribute no element spans.
pub fn layout_response(analysis: &ComplianceAnalysis) -> ResponseLayout {
    layout_response_with(analysis, UnitTable::builtin(), RenderTemplates::builtin())
}

pub fn layout_response_with(analysis: &ComplianceAnalysis, units: &UnitTable, tpl: &RenderTemplates) -> ResponseLayout {
    let mut tokens: Vec<String> = Vec::new();
    let mut elements = Vec::new();
    let verdict = if analysis.is_compliant { VERDICT_COMPLIANT } else { VERDICT_VIOLATION };
    tokens.extend(["verdict", ":", verdict, "."].map(String::from));
    for (ci, kc) in analysis.key_constraints.iter().enumerate() {
        tokens.extend(["requirement", ":"].map(String::from));
        let base = tokens.len();
        match &kc.detail {
            Some(c) => {
                let lay = layout_constraint_with(c, units, tpl);
                for (ty, span) in &lay.spans {
                    elements.push(ElementSpan {
                        constraint_index: ci,
                        error_type: *ty,
                        span: span.start + base..span.end + base,
                        ground_truth: c.slot_text_with(*ty, units, tpl).unwrap_or_default(),
                    });
                }
                tokens.extend(lay.tokens);
            }
            None => tokens.extend(tokenize(&kc.constraint)),
        }
        tokens.push(".".into());
        if let Some(ev) = &kc.evidence {
            tokens.extend(["evidence", ":"].map(String::from));
            tokens.extend(tokenize(&ev.doc_id));
            tokens.extend(tokenize(&ev.seg_id));
            tokens.push(".".into());
        }
    }
    elements.sort_by_key(|e| (e.span.start, e.error_type));
    ResponseLayout { tokens, elements }
}

/// A requirement recovered from response tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRequirement {
    pub text: String,
    pub slots: RawSlots,
    pub evidence: Option<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub is_compliant: Option<bool>,
    pub requirements: Vec<ParsedRequirement>,
}

impl ParsedResponse {
    /// Best-effort analysis from response text: slots are left to be
    /// re-parsed from the requirement text, and violation flags, which the
    /// text form does not carry, default to false.
    pub fn to_analysis(&self) -> ComplianceAnalysis {
        let key_constraints = self
            .requirements
            .iter()
            .map(|r| KeyConstraint {
                constraint: r.text.clone(),
                kind: if r.slots.threshold.is_some() { ErrorType::Threshold } else { ErrorType::Level },
                current: None,
                violation: false,
                evidence: r.evidence.as_ref().map(|(d, s)| EvidenceCitation { doc_id: d.clone(), seg_id: s.clone(), quote: String::new() }),
                detail: None,
            })
            .collect();
        ComplianceAnalysis { is_compliant: self.is_compliant.unwrap_or(false), key_constraints, risks: vec![], evidence: vec![] }
    }
}

fn is_field(tokens: &[String], i: usize, name: &str) -> bool {
    tokens.get(i).is_some_and(|t| t == name) && tokens.get(i + 1).is_some_and(|t| t == ":")
}

/// Inverse of [`layout_response`], lenient about missing pieces.
pub fn parse_response(tokens: &[String]) -> ParsedResponse {
    parse_response_with(tokens, RenderTemplates::builtin())
}

pub fn parse_response_with(tokens: &[String], tpl: &RenderTemplates) -> ParsedResponse {
    let mut is_compliant = None;
    let mut requirements: Vec<ParsedRequirement> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if is_field(tokens, i, "verdict") {
            is_compliant = tokens.get(i + 2).map(|v| v == VERDICT_COMPLIANT);
            i += 3;
        } else if is_field(tokens, i, "requirement") {
            let start = i + 2;
            let mut end = start;
            while end < tokens.len()
                && !(tokens[end] == "." && (end + 1 == tokens.len() || is_field(tokens, end + 1, "evidence") || is_field(tokens, end + 1, "requirement")))
            {
                end += 1;
            }
            let body = &tokens[start..end];
            requirements.push(ParsedRequirement { text: body.join(" "), slots: parse_slots(body, tpl), evidence: None });
            i = end + 1;
        } else if is_field(tokens, i, "evidence") {
            if let (Some(doc), Some(seg), Some(req)) = (tokens.get(i + 2), tokens.get(i + 3), requirements.last_mut()) {
                req.evidence = Some((doc.clone(), seg.clone()));
            }
            i += 4;
        } else {
            i += 1;
        }
    }
    ParsedResponse { is_compliant, requirements }
}
