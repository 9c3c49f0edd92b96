//! Bias attribute word lists: aligned tuples of words marking membership in
//! one of N demographic groups, e.g. (he, she) or (rabbi, priest, imam).
//!
//! Group indices are 1-based throughout the crate (groups 1..=N); tuple
//! indices are 0-based positions in file order. Three built-in lists ship as
//! packaged data: "gender" (N=2), "religion" (N=3), "race" (N=3).

use crate::error::{Error, Result};
use std::collections::{HashMap, HashSet};
use std::path::Path;

const GENDER_TSV: &str = include_str!("../data/gender.tsv");
const RELIGION_TSV: &str = include_str!("../data/religion.tsv");
const RACE_TSV: &str = include_str!("../data/race.tsv");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasAttributeList {
    num_groups: usize,
    tuples: Vec<Vec<String>>,
    pub group_names: Vec<String>,
}

impl BiasAttributeList {
    /// Loads one of the packaged lists by name: "gender", "religion", "race".
    pub fn builtin(name: &str) -> Result<Self> {
        let (text, groups, names): (&str, usize, &[&str]) = match name {
            "gender" => (GENDER_TSV, 2, &["male", "female"]),
            "religion" => (RELIGION_TSV, 3, &["jewish", "christian", "muslim"]),
            "race" => (RACE_TSV, 3, &["black", "caucasian", "asian"]),
            other => {
                return Err(Error::invalid(format!(
                    "lexicon::builtin: unknown list \"{other}\" (expected gender, religion, or race)"
                )))
            }
        };
        let mut list = Self::parse(text, groups, &format!("builtin:{name}"))?;
        list.group_names = names.iter().map(|s| s.to_string()).collect();
        Ok(list)
    }

    pub fn load(path: &Path, expected_groups: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("lexicon::load_wordlist: {}", path.display()), e))?;
        Self::parse(&text, expected_groups, &path.display().to_string())
    }

    /// Parses tab-separated tuples, one per line; '#' lines and blank lines
    /// are skipped. Entries are trimmed and lowercased. Rejects wrong arity,
    /// empty entries, cross-group duplicates, and empty lists, each with the
    /// offending line number.
    pub fn parse(text: &str, expected_groups: usize, origin: &str) -> Result<Self> {
        if expected_groups < 2 {
            return Err(Error::invalid(format!(
                "lexicon::load_wordlist: {origin}: expected_groups must be at least 2, got {expected_groups}"
            )));
        }
        let mut tuples: Vec<Vec<String>> = Vec::new();
        // word -> (group, first line seen), for cross-group rejection
        let mut positions: HashMap<String, (usize, usize)> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() != expected_groups {
                return Err(Error::data(format!(
                    "lexicon::load_wordlist: {origin}: line {}: expected {expected_groups} tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let mut tuple = Vec::with_capacity(expected_groups);
            for (k, field) in fields.iter().enumerate() {
                let word = field.trim().to_lowercase();
                if word.is_empty() {
                    return Err(Error::data(format!(
                        "lexicon::load_wordlist: {origin}: line {}: empty entry in group {}",
                        lineno + 1,
                        k + 1
                    )));
                }
                match positions.get(&word) {
                    Some(&(group, first_line)) if group != k + 1 => {
                        return Err(Error::data(format!(
                            "lexicon::load_wordlist: {origin}: line {}: \"{word}\" already listed under group {group} (line {first_line}); cross-group duplicates are ambiguous",
                            lineno + 1
                        )));
                    }
                    Some(_) => {}
                    None => {
                        positions.insert(word.clone(), (k + 1, lineno + 1));
                    }
                }
                tuple.push(word);
            }
            tuples.push(tuple);
        }
        if tuples.is_empty() {
            return Err(Error::data(format!(
                "lexicon::load_wordlist: {origin}: empty word list"
            )));
        }
        let group_names = (1..=expected_groups).map(|k| format!("group_{k}")).collect();
        Ok(BiasAttributeList {
            num_groups: expected_groups,
            tuples,
            group_names,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn tuples(&self) -> &[Vec<String>] {
        &self.tuples
    }

    /// The word at 0-based `tuple` position for 1-based `group`.
    pub fn word(&self, tuple: usize, group: usize) -> &str {
        &self.tuples[tuple][group - 1]
    }

    /// Lowercased words that carry an internal or trailing period; the
    /// tokenizer keeps these whole instead of splitting the period off.
    pub fn abbreviations(&self) -> HashSet<String> {
        self.tuples
            .iter()
            .flatten()
            .filter(|w| w.contains('.'))
            .cloned()
            .collect()
    }

    pub fn index(&self) -> LexiconIndex {
        LexiconIndex::new(self)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for tuple in &self.tuples {
            out.push_str(&tuple.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())
            .map_err(|e| Error::io(format!("lexicon::save: {}", path.display()), e))
    }
}

/// Word -> (tuple_index, group_index) lookup over a validated list.
/// A word repeated in the same group position across tuples resolves to the
/// first tuple in file order.
#[derive(Debug, Clone)]
pub struct LexiconIndex {
    map: HashMap<String, (usize, usize)>,
    num_groups: usize,
}

impl LexiconIndex {
    pub fn new(list: &BiasAttributeList) -> Self {
        let mut map = HashMap::new();
        for (i, tuple) in list.tuples.iter().enumerate() {
            for (k, word) in tuple.iter().enumerate() {
                map.entry(word.clone()).or_insert((i, k + 1));
            }
        }
        LexiconIndex {
            map,
            num_groups: list.num_groups,
        }
    }

    /// Case-insensitive whole-token match; `None` for unlisted tokens.
    pub fn lookup(&self, token: &str) -> Option<(usize, usize)> {
        if token.is_empty() {
            return None;
        }
        self.map.get(&token.to_lowercase()).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }
}
