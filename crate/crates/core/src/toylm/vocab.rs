use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const BOS: &str = "<bos>";
pub const SEP: &str = "<sep>";
pub const UNK: &str = "<unk>";
pub const CITE: &str = "<cite>";
pub const QUOTE: &str = "<quote>";
const SPECIALS: [&str; 5] = [BOS, SEP, UNK, CITE, QUOTE];

/// Model-level tokens of a word token: numbers are spelled out one
/// character at a time so the vocabulary stays closed under perturbation.
pub fn model_tokens<S: AsRef<str>>(words: &[S]) -> Vec<String> {
    let mut out = Vec::with_capacity(words.len());
    for w in words {
        let w = w.as_ref();
        if w.starts_with(|c: char| c.is_ascii_digit()) {
            out.extend(w.chars().map(String::from));
        } else {
            out.push(w.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Specials first, then every model token seen, sorted. Digits are
    /// always included.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut seen: BTreeSet<String> = ('0'..='9').map(String::from).collect();
        seen.insert(".".into());
        for t in texts {
            seen.extend(model_tokens(t));
        }
        for s in SPECIALS {
            seen.remove(s);
        }
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(seen).collect();
        Vocab::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or_else(|| self.index[UNK])
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn special(&self, s: &str) -> u32 {
        self.index[s]
    }

    /// Ids of the non-special tokens.
    pub fn ordinary(&self) -> std::ops::Range<u32> {
        SPECIALS.len() as u32..self.tokens.len() as u32
    }

    /// Word tokens to ids, spelling out numbers.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        model_tokens(words).iter().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
