//! Numeric, unit and span canonicalization, the rule-based tokenizer, and the
//! token-level F1 matcher used by the detail matching predicates.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::OnceLock;

use rust_decimal::Decimal;

use crate::model::{Comparator, Constraint};
use crate::templates::RenderTemplates;

const UNITS_TSV: &str = include_str!("../data/units.tsv");

/// Tokenizer revision; bump when splitting rules change.
pub const TOKENIZER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CanonicalError {
    #[error("no numeric literal in `{0}`")]
    Parse(String),
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error("unit table line {line}: {msg}")]
    Table { line: usize, msg: String },
    #[error("cannot parse constraint `{text}`: {reason}")]
    Constraint { text: String, reason: String },
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '°' | 'µ')
}

/// Splits text into tokens: whitespace separates, decimal numbers (with an
/// optional exponent) are single tokens, letters following a number start a
/// new token, and every other non-word character is a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && matches!(chars[i], 'e' | 'E') {
                let mut j = i + 1;
                if j < chars.len() && matches!(chars[j], '+' | '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            out.push(chars[start..i].iter().collect());
        } else if is_word_char(c) {
            let start = i;
            while i < chars.len() && is_word_char(chars[i]) {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

fn is_punct_token(t: &str) -> bool {
    t.chars().all(|c| !is_word_char(c))
}

/// Lowercased tokens with punctuation-only tokens removed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSpan {
    tokens: Vec<String>,
}

impl TokenSpan {
    pub fn normalize(text: &str) -> Self {
        Self::from_tokens(tokenize(text))
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let tokens = tokens
            .into_iter()
            .filter(|t| !t.as_ref().is_empty() && !is_punct_token(t.as_ref()))
            .map(|t| t.as_ref().to_lowercase())
            .collect();
        Self { tokens }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn counts(tokens: &[String]) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for t in tokens {
            *m.entry(t.as_str()).or_insert(0) += 1;
        }
        m
    }
}

/// Harmonic mean of token precision and recall under multiset overlap.
/// Two empty spans agree (1.0); one empty span scores 0.0.
pub fn token_f1(a: &TokenSpan, b: &TokenSpan) -> f64 {
    token_f1_slices(a.tokens(), b.tokens())
}

pub(crate) fn token_f1_slices(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let ca = TokenSpan::counts(a);
    let cb = TokenSpan::counts(b);
    let overlap: usize = ca.iter().map(|(t, n)| (*n).min(cb.get(t).copied().unwrap_or(0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    // 2PR/(P+R) with P = o/|a|, R = o/|b| reduces to 2o/(|a|+|b|).
    2.0 * overlap as f64 / (a.len() + b.len()) as f64
}

/// Parses the first decimal literal in `s` (plain or scientific) into a
/// normalized decimal, so `"70"`, `"70.0"` and `"7e1"` compare equal.
pub fn parse_number(s: &str) -> Result<Decimal, CanonicalError> {
    let trimmed = s.trim();
    if let Some(d) = parse_literal(trimmed) {
        return Ok(d);
    }
    let tokens = tokenize(trimmed);
    for (i, tok) in tokens.iter().enumerate() {
        if tok.starts_with(|c: char| c.is_ascii_digit()) {
            if let Some(d) = parse_literal(tok) {
                let negative = i > 0 && tokens[i - 1] == "-" && (i == 1 || !tokens[i - 2].starts_with(|c: char| c.is_ascii_digit()));
                return Ok(if negative { -d } else { d });
            }
        }
    }
    Err(CanonicalError::Parse(s.to_string()))
}

fn parse_literal(s: &str) -> Option<Decimal> {
    if s.is_empty() {
        return None;
    }
    let d = if s.contains(['e', 'E']) {
        Decimal::from_scientific(s).ok()?
    } else {
        Decimal::from_str(s).ok()?
    };
    Some(d.normalize())
}

/// Surface form → canonical unit id, plus the dimension of every id.
#[derive(Debug, Clone, Default)]
pub struct UnitTable {
    entries: BTreeMap<String, String>,
    dimension: BTreeMap<String, String>,
    display: BTreeMap<String, String>,
}

fn unit_key(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_lowercase()
}

impl UnitTable {
    /// Parses `surface<TAB>canonical<TAB>dimension` records. The first
    /// surface seen for a canonical id becomes its display form, and every
    /// canonical id also maps to itself.
    pub fn parse(src: &str) -> Result<Self, CanonicalError> {
        let mut table = UnitTable::default();
        for (i, raw) in src.lines().enumerate() {
            let line = raw.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(CanonicalError::Table { line: i + 1, msg: "expected 3 tab-separated columns".into() });
            }
            table.insert(cols[0].trim(), cols[1].trim(), cols[2].trim()).map_err(|msg| CanonicalError::Table {
                line: i + 1,
                msg,
            })?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, surface: &str, canonical: &str, dimension: &str) -> Result<(), String> {
        if surface.is_empty() || canonical.is_empty() || dimension.is_empty() {
            return Err("empty field".into());
        }
        match self.dimension.get(canonical) {
            Some(d) if d != dimension => {
                return Err(format!("`{canonical}` declared with dimensions `{d}` and `{dimension}`"));
            }
            _ => {}
        }
        for key in [unit_key(surface), unit_key(canonical)] {
            match self.entries.get(&key) {
                Some(existing) if existing != canonical => {
                    return Err(format!("surface `{key}` maps to both `{existing}` and `{canonical}`"));
                }
                _ => {
                    self.entries.insert(key, canonical.to_string());
                }
            }
        }
        self.dimension.insert(canonical.to_string(), dimension.to_string());
        self.display.entry(canonical.to_string()).or_insert_with(|| surface.to_string());
        Ok(())
    }

    pub fn builtin() -> &'static UnitTable {
        static CELL: OnceLock<UnitTable> = OnceLock::new();
        CELL.get_or_init(|| UnitTable::parse(UNITS_TSV).expect("bundled units.tsv"))
    }

    pub fn canonicalize(&self, s: &str) -> Result<&str, CanonicalError> {
        self.entries
            .get(&unit_key(s))
            .map(String::as_str)
            .ok_or_else(|| CanonicalError::UnknownUnit(s.to_string()))
    }

    pub fn dimension(&self, canonical: &str) -> Option<&str> {
        self.dimension.get(canonical).map(String::as_str)
    }

    pub fn display(&self, canonical: &str) -> Option<&str> {
        self.display.get(canonical).map(String::as_str)
    }

    pub fn surface_count(&self) -> usize {
        self.entries.len()
    }

    /// Canonical ids of `dimension`, sorted.
    pub fn units_of(&self, dimension: &str) -> Vec<&str> {
        self.dimension.iter().filter(|(_, d)| *d == dimension).map(|(u, _)| u.as_str()).collect()
    }
}

/// Free function form of [`UnitTable::canonicalize`].
pub fn canonicalize_unit<'t>(s: &str, table: &'t UnitTable) -> Result<&'t str, CanonicalError> {
    table.canonicalize(s)
}

/// Slot strings recovered from requirement text without validating them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawSlots {
    pub scope: Option<String>,
    pub predicate: Option<String>,
    pub level: Option<String>,
    pub comparator: Option<Comparator>,
    pub threshold: Option<String>,
    pub unit: Option<String>,
    pub condition: Option<String>,
}

const LEVEL_WORDS: [&str; 4] = ["shall", "should", "must", "may"];

struct ThresholdTail {
    comparator: Comparator,
    threshold: String,
    unit: Option<String>,
}

fn match_threshold_tail(tokens: &[String], tpl: &RenderTemplates) -> Option<ThresholdTail> {
    for (cmp, phrase) in tpl.comparators() {
        let words = tokenize(phrase);
        if tokens.len() > words.len()
            && tokens.iter().zip(&words).all(|(a, b)| a.eq_ignore_ascii_case(b))
            && tokens[words.len()].starts_with(|c: char| c.is_ascii_digit())
        {
            let rest = &tokens[words.len() + 1..];
            return Some(ThresholdTail {
                comparator: cmp,
                threshold: tokens[words.len()].clone(),
                unit: (!rest.is_empty()).then(|| rest.concat()),
            });
        }
    }
    None
}

/// Recovers slot strings from tokens of rendered requirement text. Lenient:
/// missing pieces are left as `None`.
pub fn parse_slots(tokens: &[String], tpl: &RenderTemplates) -> RawSlots {
    let join = |ts: &[String]| (!ts.is_empty()).then(|| ts.join(" "));
    let level_at = tokens.iter().position(|t| LEVEL_WORDS.iter().any(|w| t.eq_ignore_ascii_case(w)));
    let Some(li) = level_at else {
        let cond_at = tokens.iter().position(|t| tpl.is_marker(t)).unwrap_or(tokens.len());
        return RawSlots {
            scope: join(&tokens[..cond_at]),
            condition: join(&tokens[cond_at..]),
            ..RawSlots::default()
        };
    };
    let cond_at = tokens[li + 1..]
        .iter()
        .position(|t| tpl.is_marker(t))
        .map(|p| p + li + 1)
        .unwrap_or(tokens.len());
    let condition = join(&tokens[cond_at..]);
    let negated = tokens.get(li + 1).is_some_and(|t| t.eq_ignore_ascii_case("not")) && li + 1 < cond_at;

    // Prefer whichever reading of an optional "not" yields a threshold clause;
    // otherwise a trailing "not" belongs to the level.
    let mut readings = Vec::with_capacity(2);
    if negated {
        readings.push(li + 2);
    }
    readings.push(li + 1);
    let body = |start: usize| &tokens[start.min(cond_at)..cond_at];
    for &start in &readings {
        if let Some(tail) = match_threshold_tail(body(start), tpl) {
            let (scope, predicate) = if li >= 2 {
                (join(&tokens[..li - 1]), Some(tokens[li - 1].clone()))
            } else {
                (join(&tokens[..li]), None)
            };
            return RawSlots {
                scope,
                predicate,
                level: Some(tokens[li..start].join(" ").to_lowercase()),
                comparator: Some(tail.comparator),
                threshold: Some(tail.threshold),
                unit: tail.unit,
                condition,
            };
        }
    }
    let start = readings[0];
    RawSlots {
        scope: join(&tokens[..li]),
        predicate: join(body(start)),
        level: Some(tokens[li..start].join(" ").to_lowercase()),
        comparator: None,
        threshold: None,
        unit: None,
        condition,
    }
}

/// Parses rendered requirement text back into a [`Constraint`]; the inverse
/// of [`crate::model::render_constraint`] on well-formed input.
pub fn parse_constraint(text: &str, units: &UnitTable) -> Result<Constraint, CanonicalError> {
    parse_constraint_with(text, units, RenderTemplates::builtin())
}

pub fn parse_constraint_with(text: &str, units: &UnitTable, tpl: &RenderTemplates) -> Result<Constraint, CanonicalError> {
    let fail = |reason: &str| CanonicalError::Constraint { text: text.to_string(), reason: reason.to_string() };
    let slots = parse_slots(&tokenize(text), tpl);
    let level = slots
        .level
        .as_deref()
        .and_then(|l| tpl.level_from_text(l))
        .ok_or_else(|| fail("no obligation keyword"))?;
    let scope = slots.scope.ok_or_else(|| fail("empty scope"))?;
    let threshold = slots.threshold.as_deref().map(parse_number).transpose()?;
    let unit = match slots.unit.as_deref() {
        Some(u) => Some(units.canonicalize(u)?.to_string()),
        None if threshold.is_some() => return Err(fail("threshold without unit")),
        None => None,
    };
    Ok(Constraint {
        threshold,
        unit,
        scope,
        level,
        condition: slots.condition,
        comparator: slots.comparator.unwrap_or_default(),
        predicate: slots.predicate,
    })
}
