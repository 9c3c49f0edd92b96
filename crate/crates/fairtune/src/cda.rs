//! Counterfactual data augmentation: rewrite each sentence under sampled
//! permutations of the demographic groups that occur in it.
//!
//! For a sentence mentioning n of the N groups, the candidate rewrites are
//! all ordered selections of n distinct target groups out of N, in
//! lexicographic order, with the occurred groups (sorted ascending) mapped
//! positionally onto the selection. The identity selection is excluded only
//! when all N groups occur; when fewer occur it still changes nothing but is
//! a legitimate draw, unless `exclude_fixed_identity` is set. Up to S
//! selections are sampled per sentence without replacement.
//!
//! Words listed in several tuples resolve to the first tuple, so a double
//! swap is exact only for words with unique reverse images ("his" becomes
//! "her", which swaps back to "him" because (him, her) is listed first).

use crate::corpus::tokenize_with;
use crate::error::{Error, Result};
use crate::lexicon::{BiasAttributeList, LexiconIndex};
use crate::rng::{self, derive_seed_indexed, rng_from};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy)]
pub struct AugmentOptions {
    /// S: counterfactuals sampled per sentence, must be in 1..=N-1.
    pub samples_per_sentence: usize,
    pub seed: u64,
    /// Keep sentences mentioning no group (as originals only).
    pub keep_neutral: bool,
    /// Also drop selections that fix every occurred group when n < N.
    pub exclude_fixed_identity: bool,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            samples_per_sentence: 1,
            seed: 0,
            keep_neutral: false,
            exclude_fixed_identity: false,
        }
    }
}

/// Ordered, 1-based groups of the lexicon words present in the tokens.
pub fn identify_groups(tokens: &[String], index: &LexiconIndex) -> Vec<usize> {
    let mut groups = BTreeSet::new();
    for t in tokens {
        if let Some((_, group)) = index.lookup(t) {
            groups.insert(group);
        }
    }
    groups.into_iter().collect()
}

/// Number of ordered selections of n distinct targets from N groups.
pub fn selection_count(num_groups: usize, n_occurred: usize) -> usize {
    (num_groups - n_occurred + 1..=num_groups).product()
}

/// Candidate pool size after identity handling.
pub fn candidate_count(num_groups: usize, n_occurred: usize, exclude_fixed_identity: bool) -> usize {
    let total = selection_count(num_groups, n_occurred);
    if n_occurred == num_groups || exclude_fixed_identity {
        total - 1
    } else {
        total
    }
}

/// All candidate target vectors for the occurred groups, in lexicographic
/// order. `occurred` must be sorted ascending; element j of a candidate is
/// the target group for occurred[j].
pub fn candidate_permutations(
    occurred: &[usize],
    num_groups: usize,
    exclude_fixed_identity: bool,
) -> Vec<Vec<usize>> {
    let n = occurred.len();
    let mut out = Vec::with_capacity(selection_count(num_groups, n));
    let mut used = vec![false; num_groups + 1];
    let mut current = Vec::with_capacity(n);
    fn build(
        depth: usize,
        n: usize,
        num_groups: usize,
        used: &mut [bool],
        current: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if depth == n {
            out.push(current.clone());
            return;
        }
        for g in 1..=num_groups {
            if !used[g] {
                used[g] = true;
                current.push(g);
                build(depth + 1, n, num_groups, used, current, out);
                current.pop();
                used[g] = false;
            }
        }
    }
    build(0, n, num_groups, &mut used, &mut current, &mut out);
    if n == num_groups || exclude_fixed_identity {
        out.retain(|targets| targets != occurred);
    }
    out
}

fn mirror_case(original: &str, replacement: &str) -> String {
    let alpha: Vec<char> = original.chars().filter(|c| c.is_alphabetic()).collect();
    if alpha.len() > 1 && alpha.iter().all(|c| c.is_uppercase()) {
        return replacement.to_uppercase();
    }
    if original.chars().next().is_some_and(|c| c.is_uppercase()) {
        let mut chars = replacement.chars();
        return match chars.next() {
            Some(first) => first.to_uppercase().chain(chars).collect(),
            None => String::new(),
        };
    }
    replacement.to_string()
}

/// Rewrites tokens under a target vector: a token in occurred[j]'s group is
/// replaced by the same tuple's word for targets[j], mirroring
/// capitalized/all-caps spelling. Other tokens pass through.
pub fn apply_permutation(
    tokens: &[String],
    list: &BiasAttributeList,
    index: &LexiconIndex,
    occurred: &[usize],
    targets: &[usize],
) -> Vec<String> {
    debug_assert_eq!(occurred.len(), targets.len());
    tokens
        .iter()
        .map(|t| match index.lookup(t) {
            Some((tuple, group)) => match occurred.iter().position(|&g| g == group) {
                Some(j) => mirror_case(t, list.word(tuple, targets[j])),
                None => t.clone(),
            },
            None => t.clone(),
        })
        .collect()
}

/// Sampled counterfactuals for one tokenized sentence, in draw order.
/// Returns (targets, rewritten tokens) pairs; empty when no group occurs.
/// `samples` is clamped to the candidate pool size.
pub fn counterfactuals_for_sentence(
    tokens: &[String],
    list: &BiasAttributeList,
    index: &LexiconIndex,
    samples: usize,
    exclude_fixed_identity: bool,
    rng: &mut impl Rng,
) -> Vec<(Vec<usize>, Vec<String>)> {
    let occurred = identify_groups(tokens, index);
    if occurred.is_empty() {
        return Vec::new();
    }
    let candidates = candidate_permutations(&occurred, list.num_groups(), exclude_fixed_identity);
    let picks = rng::sample_without_replacement(candidates.len(), samples, rng);
    picks
        .into_iter()
        .map(|i| {
            let targets = candidates[i].clone();
            let rewritten = apply_permutation(tokens, list, index, &occurred, &targets);
            (targets, rewritten)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AugmentedExample {
    pub text: String,
    /// Index of the source line in the input.
    #[serde(rename = "origin")]
    pub source_index: usize,
    pub is_original: bool,
    /// Occurred groups of the source sentence, ascending.
    pub occurred: Vec<usize>,
    /// Target groups aligned with `occurred`; None for originals.
    #[serde(rename = "permutation")]
    pub targets: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct AugmentedCorpus {
    pub examples: Vec<AugmentedExample>,
    pub num_groups: usize,
    pub samples_per_sentence: usize,
    pub seed: u64,
}

impl AugmentedCorpus {
    pub fn texts(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.text.clone()).collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let ctx = || format!("cda::write_jsonl: {}", path.display());
        let file = std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
        let mut w = std::io::BufWriter::new(file);
        for ex in &self.examples {
            let line = serde_json::to_string(ex).expect("example serialization");
            writeln!(w, "{line}").map_err(|e| Error::io(ctx(), e))?;
        }
        Ok(())
    }
}

/// Augments every line of text. Each kept sentence contributes its original
/// first, then its counterfactuals in draw order. Sentences mentioning no
/// group are dropped unless `keep_neutral`. Deterministic for a given seed
/// regardless of thread count: sentence i draws from a seed derived as
/// ("cda", i).
pub fn augment_corpus(
    lines: &[String],
    list: &BiasAttributeList,
    opts: &AugmentOptions,
) -> Result<AugmentedCorpus> {
    let n_groups = list.num_groups();
    let s = opts.samples_per_sentence;
    if s == 0 || s > n_groups - 1 {
        return Err(Error::invalid(format!(
            "cda::augment_corpus: samples_per_sentence must be in 1..={} for a {}-group lexicon, got {s}",
            n_groups - 1,
            n_groups
        )));
    }
    let index = list.index();
    let abbreviations = list.abbreviations();
    let per_sentence: Vec<Vec<AugmentedExample>> = lines
        .par_iter()
        .enumerate()
        .map(|(i, line)| {
            let tokens = tokenize_with(line, &abbreviations);
            let occurred = identify_groups(&tokens, &index);
            if occurred.is_empty() {
                return if opts.keep_neutral && !tokens.is_empty() {
                    vec![AugmentedExample {
                        text: line.trim().to_string(),
                        source_index: i,
                        is_original: true,
                        occurred,
                        targets: None,
                    }]
                } else {
                    Vec::new()
                };
            }
            let mut rng = rng_from(derive_seed_indexed(opts.seed, "cda", i as u64));
            let drawn = counterfactuals_for_sentence(
                &tokens,
                list,
                &index,
                s,
                opts.exclude_fixed_identity,
                &mut rng,
            );
            let mut out = Vec::with_capacity(1 + drawn.len());
            out.push(AugmentedExample {
                text: line.trim().to_string(),
                source_index: i,
                is_original: true,
                occurred: occurred.clone(),
                targets: None,
            });
            for (targets, tokens) in drawn {
                out.push(AugmentedExample {
                    text: tokens.join(" "),
                    source_index: i,
                    is_original: false,
                    occurred: occurred.clone(),
                    targets: Some(targets),
                });
            }
            out
        })
        .collect();
    Ok(AugmentedCorpus {
        examples: per_sentence.into_iter().flatten().collect(),
        num_groups: n_groups,
        samples_per_sentence: s,
        seed: opts.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gender() -> (BiasAttributeList, LexiconIndex) {
        let list = BiasAttributeList::builtin("gender").unwrap();
        let index = list.index();
        (list, index)
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|w| w.to_string()).collect()
    }

    #[test]
    fn classic_gender_swap() {
        let (list, index) = gender();
        let tokens = toks("his son met his uncle");
        let occurred = identify_groups(&tokens, &index);
        assert_eq!(occurred, vec![1]);
        let swapped = apply_permutation(&tokens, &list, &index, &occurred, &[2]);
        assert_eq!(swapped.join(" "), "her daughter met her aunt");
    }

    #[test]
    fn swap_is_involutive_outside_shadowed_words() {
        // "her" is listed under both (him, her) and (his, her); first-tuple
        // resolution makes his -> her -> him. For words with unique reverse
        // images the double swap is exact.
        let (list, index) = gender();
        let tokens = toks("he saw the king and the queen with a son and a gentleman");
        let occurred = identify_groups(&tokens, &index);
        assert_eq!(occurred, vec![1, 2]);
        let swapped = apply_permutation(&tokens, &list, &index, &occurred, &[2, 1]);
        assert_eq!(
            swapped.join(" "),
            "she saw the queen and the king with a daughter and a lady"
        );
        let back = apply_permutation(&swapped, &list, &index, &occurred, &[2, 1]);
        assert_eq!(back, tokens);
    }

    #[test]
    fn casing_is_mirrored() {
        let (list, index) = gender();
        let tokens = toks("He met HIS Mother");
        let occurred = identify_groups(&tokens, &index);
        let swapped = apply_permutation(&tokens, &list, &index, &occurred, &[2, 1]);
        assert_eq!(swapped.join(" "), "She met HER Father");
    }

    #[test]
    fn candidates_are_lexicographic_with_identity_rules() {
        // n < N: the fixing selection [1, 3] stays by default
        let c = candidate_permutations(&[1, 3], 3, false);
        assert_eq!(
            c,
            vec![
                vec![1, 2],
                vec![1, 3],
                vec![2, 1],
                vec![2, 3],
                vec![3, 1],
                vec![3, 2]
            ]
        );
        // ... and goes away under exclude_fixed_identity
        let c = candidate_permutations(&[1, 3], 3, true);
        assert!(!c.contains(&vec![1, 3]));
        assert_eq!(c.len(), 5);

        // n == N: identity always removed
        let c = candidate_permutations(&[1, 2, 3], 3, false);
        assert_eq!(c.len(), 5);
        assert!(!c.contains(&vec![1, 2, 3]));

        assert_eq!(selection_count(3, 2), 6);
        assert_eq!(candidate_count(3, 3, false), 5);
        assert_eq!(candidate_count(3, 2, false), 6);
        assert_eq!(candidate_count(3, 2, true), 5);
        assert_eq!(candidate_count(2, 1, false), 2);
    }

    #[test]
    fn augment_emits_original_first_and_matches_cardinality() {
        let list = BiasAttributeList::builtin("religion").unwrap();
        let lines: Vec<String> = vec![
            "the rabbi met the imam".into(),   // n=2 of 3
            "nothing to see here".into(),      // neutral
            "a church and a mosque and a synagogue".into(), // n=3
        ];
        let opts = AugmentOptions {
            samples_per_sentence: 2,
            seed: 7,
            ..AugmentOptions::default()
        };
        let out = augment_corpus(&lines, &list, &opts).unwrap();
        // sentence 0: 1 + min(2, 6) = 3; neutral dropped; sentence 2: 1 + min(2, 5) = 3
        assert_eq!(out.examples.len(), 6);
        assert!(out.examples[0].is_original);
        assert_eq!(out.examples[0].text, lines[0]);
        assert!(!out.examples[1].is_original);
        assert!(!out.examples[2].is_original);
        assert_eq!(out.examples[3].source_index, 2);

        let with_neutral = augment_corpus(
            &lines,
            &list,
            &AugmentOptions {
                keep_neutral: true,
                ..opts
            },
        )
        .unwrap();
        assert_eq!(with_neutral.examples.len(), 7);

        // same seed, same output (thread count cannot matter: per-sentence seeds)
        let again = augment_corpus(&lines, &list, &opts).unwrap();
        assert_eq!(out.examples, again.examples);
    }

    #[test]
    fn sample_cap_is_validated_against_group_count() {
        let (list, _) = gender();
        let lines = vec!["he is here".to_string()];
        let err = augment_corpus(
            &lines,
            &list,
            &AugmentOptions {
                samples_per_sentence: 2,
                ..AugmentOptions::default()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("1..=1"), "{err}");
        assert!(augment_corpus(
            &lines,
            &list,
            &AugmentOptions {
                samples_per_sentence: 0,
                ..AugmentOptions::default()
            }
        )
        .is_err());
    }

    #[test]
    fn two_group_swap_is_forced_and_involutive() {
        // N=2, S=1: the only candidate for n=1 is the other group... plus the
        // fixing one. Draws vary by seed, but every non-identity rewrite must
        // invert back to the original.
        let (list, index) = gender();
        let tokens = toks("the king handed the crown to the queen");
        let occurred = identify_groups(&tokens, &index);
        assert_eq!(occurred, vec![1, 2]);
        // n == N == 2: identity excluded, only [2, 1] remains
        let candidates = candidate_permutations(&occurred, 2, false);
        assert_eq!(candidates, vec![vec![2, 1]]);
        let swapped = apply_permutation(&tokens, &list, &index, &occurred, &[2, 1]);
        assert_eq!(swapped.join(" "), "the queen handed the crown to the king");
        let back = apply_permutation(&swapped, &list, &index, &occurred, &[2, 1]);
        assert_eq!(back, tokens);
    }

    #[test]
    fn jsonl_export_roundtrips() {
        let (list, _) = gender();
        let lines = vec!["his son met his uncle".to_string()];
        let out = augment_corpus(
            &lines,
            &list,
            &AugmentOptions {
                samples_per_sentence: 1,
                seed: 1,
                ..AugmentOptions::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aug.jsonl");
        out.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<AugmentedExample> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(rows, out.examples);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rewrites_preserve_length_and_only_touch_lexicon_words(
            words in proptest::collection::vec(
                prop_oneof![
                    Just("he".to_string()),
                    Just("Her".to_string()),
                    Just("uncle".to_string()),
                    Just("KING".to_string()),
                    Just("table".to_string()),
                    Just("runs".to_string()),
                ],
                1..12
            ),
            seed in 0u64..1000,
        ) {
            let (list, index) = gender();
            let mut rng = rng_from(seed);
            for (targets, rewritten) in
                counterfactuals_for_sentence(&words, &list, &index, 1, false, &mut rng)
            {
                prop_assert_eq!(rewritten.len(), words.len());
                let occurred = identify_groups(&words, &index);
                prop_assert_eq!(occurred.len(), targets.len());
                for (orig, new) in words.iter().zip(&rewritten) {
                    match index.lookup(orig) {
                        None => prop_assert_eq!(orig, new),
                        Some((tuple, group)) => {
                            let j = occurred.iter().position(|&g| g == group).unwrap();
                            prop_assert_eq!(new.to_lowercase(), list.word(tuple, targets[j]));
                        }
                    }
                }
            }
        }
    }
}
