use std::sync::OnceLock;

use rust_decimal::Decimal;
use serde::Deserialize;

use crate::canonical::{parse_number, tokenize};
use crate::model::Comparator;
use crate::templates::TemplateError;

const SYNTH_TOML: &str = include_str!("../../data/synth.toml");

#[derive(Debug, Clone, Deserialize)]
pub struct ThresholdTemplate {
    pub scope: String,
    pub measure: String,
    pub unit: String,
    pub comparator: Comparator,
    pub values: Vec<String>,
}

impl ThresholdTemplate {
    pub fn value(&self, i: usize) -> Decimal {
        parse_number(&self.values[i]).expect("bank values are numeric")
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct ActionTemplate {
    pub scope: String,
    pub action: String,
    pub negated: bool,
}

/// Template bank for synthetic documents and queries.
#[derive(Debug, Clone, Deserialize)]
pub struct SynthBank {
    pub version: u32,
    pub topics: Vec<String>,
    pub thresholds: Vec<ThresholdTemplate>,
    pub actions: Vec<ActionTemplate>,
    pub filler: Vec<String>,
    pub queries: Vec<String>,
    #[serde(skip)]
    filler_tokens: Vec<usize>,
}

impl SynthBank {
    pub fn parse(src: &str) -> Result<Self, TemplateError> {
        let mut bank: SynthBank = toml::from_str(src)?;
        for (what, empty) in [
            ("topics", bank.topics.is_empty()),
            ("thresholds", bank.thresholds.is_empty()),
            ("actions", bank.actions.is_empty()),
            ("filler", bank.filler.is_empty()),
            ("queries", bank.queries.is_empty()),
        ] {
            if empty {
                return Err(TemplateError::Missing(what.into()));
            }
        }
        if let Some(t) = bank.thresholds.iter().find(|t| t.values.is_empty() || t.values.iter().any(|v| parse_number(v).is_err())) {
            return Err(TemplateError::Missing(format!("numeric values for {}", t.scope)));
        }
        bank.filler_tokens = bank.filler.iter().map(|f| tokenize(f).len()).collect();
        Ok(bank)
    }

    pub fn builtin() -> &'static SynthBank {
        static CELL: OnceLock<SynthBank> = OnceLock::new();
        CELL.get_or_init(|| SynthBank::parse(SYNTH_TOML).expect("bundled synth.toml"))
    }

    pub fn filler_tokens(&self, i: usize) -> usize {
        self.filler_tokens[i]
    }

    pub fn max_filler_tokens(&self) -> usize {
        self.filler_tokens.iter().copied().max().unwrap_or(0)
    }
}
