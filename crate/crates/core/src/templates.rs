//! Versioned rendering templates and curated substitution tables.
//!
//! Every phrase that ends up in generated text comes from one of the data
//! files under `data/`, so a dataset is reproducible byte-for-byte from its
//! seed plus the template versions recorded in the run manifest.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;

use crate::model::{Comparator, Level};

const RENDER_TOML: &str = include_str!("../data/render.toml");
const SCOPES_TSV: &str = include_str!("../data/scopes.tsv");
const CONDITIONS_TSV: &str = include_str!("../data/conditions.tsv");

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("line {line}: {msg}")]
    Table { line: usize, msg: String },
    #[error("missing template entry `{0}`")]
    Missing(String),
}

#[derive(Debug, Clone, Deserialize)]
pub struct RenderTemplates {
    pub version: u32,
    /// Words that open a conditional clause.
    pub markers: Vec<String>,
    levels: BTreeMap<String, String>,
    comparators: BTreeMap<String, String>,
    /// Default measured-quantity word per unit dimension.
    measures: BTreeMap<String, String>,
}

impl RenderTemplates {
    pub fn parse(src: &str) -> Result<Self, TemplateError> {
        let t: RenderTemplates = toml::from_str(src)?;
        for level in Level::ALL {
            if !t.levels.contains_key(level.tag()) {
                return Err(TemplateError::Missing(level.tag().to_string()));
            }
        }
        for cmp in Comparator::ALL {
            if !t.comparators.contains_key(cmp.tag()) {
                return Err(TemplateError::Missing(cmp.tag().to_string()));
            }
        }
        Ok(t)
    }

    pub fn builtin() -> &'static RenderTemplates {
        static CELL: OnceLock<RenderTemplates> = OnceLock::new();
        CELL.get_or_init(|| RenderTemplates::parse(RENDER_TOML).expect("bundled render.toml"))
    }

    pub fn level(&self, level: Level) -> &str {
        &self.levels[level.tag()]
    }

    pub fn comparator(&self, cmp: Comparator) -> &str {
        &self.comparators[cmp.tag()]
    }

    pub fn measure(&self, dimension: &str) -> Option<&str> {
        self.measures.get(dimension).map(String::as_str)
    }

    pub fn is_marker(&self, token: &str) -> bool {
        self.markers.iter().any(|m| m.eq_ignore_ascii_case(token))
    }

    /// Level whose rendering matches `text` (case-insensitive, single spaces).
    pub fn level_from_text(&self, text: &str) -> Option<Level> {
        let norm = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        Level::ALL.into_iter().find(|l| self.level(*l) == norm)
    }

    pub fn comparators(&self) -> impl Iterator<Item = (Comparator, &str)> {
        Comparator::ALL.into_iter().map(move |c| (c, self.comparator(c)))
    }
}

/// Phrase → replacement phrases, read from a two-column TSV whose second
/// column is `|`-separated.
#[derive(Debug, Clone, Default)]
pub struct PhraseTable {
    entries: BTreeMap<String, Vec<String>>,
}

impl PhraseTable {
    pub fn parse(src: &str) -> Result<Self, TemplateError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in src.lines().enumerate() {
            let line = raw.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, alts) = line.split_once('\t').ok_or_else(|| TemplateError::Table {
                line: i + 1,
                msg: "expected two tab-separated columns".into(),
            })?;
            let alts: Vec<String> = alts
                .split('|')
                .map(|a| a.trim().to_string())
                .filter(|a| !a.is_empty())
                .collect();
            if alts.is_empty() {
                return Err(TemplateError::Table { line: i + 1, msg: "no replacements".into() });
            }
            if entries.insert(key.trim().to_string(), alts).is_some() {
                return Err(TemplateError::Table { line: i + 1, msg: format!("duplicate phrase `{key}`") });
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, phrase: &str) -> Option<&[String]> {
        self.entries.get(phrase).map(Vec::as_slice)
    }

    pub fn phrases(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// The scope and condition tables used by the perturbation engine.
#[derive(Debug, Clone)]
pub struct SubstitutionTables {
    pub scopes: PhraseTable,
    pub conditions: PhraseTable,
}

impl SubstitutionTables {
    pub fn builtin() -> &'static SubstitutionTables {
        static CELL: OnceLock<SubstitutionTables> = OnceLock::new();
        CELL.get_or_init(|| SubstitutionTables {
            scopes: PhraseTable::parse(SCOPES_TSV).expect("bundled scopes.tsv"),
            conditions: PhraseTable::parse(CONDITIONS_TSV).expect("bundled conditions.tsv"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_tables_load() {
        let t = RenderTemplates::builtin();
        assert_eq!(t.level(Level::Shall), "shall");
        assert_eq!(t.comparator(Comparator::Le), "not exceed");
        assert_eq!(t.level_from_text("Shall  Not"), Some(Level::ShallNot));
        let s = SubstitutionTables::builtin();
        assert!(s.scopes.get("stationary storage").unwrap().contains(&"all storage systems".to_string()));
        assert!(s.conditions.phrases().count() >= 10);
    }

    #[test]
    fn phrase_table_rejects_bad_lines() {
        assert!(PhraseTable::parse("only-one-column\n").is_err());
        assert!(PhraseTable::parse("a\t|\n").is_err());
        assert!(PhraseTable::parse("a\tb\na\tc\n").is_err());
    }
}
