use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::AdmissionRecord;
use crate::error::{Error, Result};

/// Index reserved for codes outside the retained set.
pub const UNKNOWN: usize = 0;

/// Retained codes mapped to contiguous indices `1..=len`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Retained codes in index order (`codes[i]` has index `i + 1`).
    codes: Vec<String>,
    /// Training-split frequency of every code seen, retained or not.
    counts: BTreeMap<String, usize>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_parts(codes: Vec<String>, counts: BTreeMap<String, usize>) -> Self {
        let index = codes.iter().enumerate().map(|(i, c)| (c.clone(), i + 1)).collect();
        Self { codes, counts, index }
    }

    /// Rebuild the lookup index after deserialisation.
    pub fn reindex(self) -> Self {
        Self::from_parts(self.codes, self.counts)
    }

    pub fn index_of(&self, code: &str) -> usize {
        self.index.get(code).copied().unwrap_or(UNKNOWN)
    }

    /// Number of indices including UNKNOWN.
    pub fn size(&self) -> usize {
        self.codes.len() + 1
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn count(&self, code: &str) -> usize {
        self.counts.get(code).copied().unwrap_or(0)
    }
}

/// Retain the `top_k` most frequent codes; ties go to the
/// lexicographically smaller code.
pub fn build_vocab(records: &[AdmissionRecord], top_k: usize) -> Result<Vocabulary> {
    if top_k == 0 {
        return Err(Error::config("data.vocab_top_k", "must be >= 1"));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        for e in &r.events {
            *counts.entry(e.code.clone()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyInput("no events to build a vocabulary from".into()));
    }
    let mut ranked: Vec<(&String, &usize)> = counts.iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    let codes = ranked.into_iter().take(top_k).map(|(c, _)| c.clone()).collect();
    Ok(Vocabulary::from_parts(codes, counts))
}
