//! Knowledge-retention metrics: cloze fact retrieval ranked against the
//! full vocabulary, and coreference by suffix completion where the model
//! picks whichever candidate makes the better sentence.

use crate::biaseval::SentenceScorer;
use crate::corpus::{Tokenizer, BOS, MASK, SPECIALS};
use crate::error::{Error, Result};
use crate::model::{forward, CoreModel, Objective};
use crate::peft::TuningOverlay;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClozeQuery {
    /// Sentence with the mask token's surface form standing in the slot.
    pub template: String,
    pub answer: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactReport {
    pub p_at_1: f64,
    pub p_at_10: f64,
    pub mrr: f64,
    pub evaluated: usize,
    /// Queries whose answer is not a single in-vocabulary token.
    pub skipped_oov: usize,
    /// Causal mode only: queries whose slot is not sentence-final.
    pub skipped_nonfinal: usize,
}

/// Rank of the gold token in a logit row, ties broken by token id so the
/// rank is deterministic.
pub(crate) fn rank_of(row: &[f64], gold: usize) -> usize {
    let g = row[gold];
    let mut rank = 1;
    for (v, &logit) in row.iter().enumerate() {
        if logit > g || (logit == g && v < gold) {
            rank += 1;
        }
    }
    rank
}

fn mask_surface() -> &'static str {
    SPECIALS[MASK]
}

enum SlotOutcome {
    Distribution(Vec<f64>),
    NonFinal,
}

/// Vocabulary distribution at the query's slot. Masked models read the MASK
/// position directly; causal models need the slot sentence-final and read
/// the next-token distribution after the preceding context.
fn slot_distribution(
    core: &CoreModel,
    overlay: Option<&TuningOverlay>,
    ids: &[usize],
    slot: usize,
) -> Result<SlotOutcome> {
    match core.config.objective {
        Objective::Masked => {
            let logits = forward(core, overlay, ids)?;
            Ok(SlotOutcome::Distribution(logits.row(slot).to_vec()))
        }
        Objective::Causal => {
            if slot != ids.len() - 1 {
                return Ok(SlotOutcome::NonFinal);
            }
            let mut context = Vec::with_capacity(slot + 1);
            context.push(BOS);
            context.extend_from_slice(&ids[..slot]);
            let logits = forward(core, overlay, &context)?;
            Ok(SlotOutcome::Distribution(logits.row(slot).to_vec()))
        }
    }
}

pub fn fact_retrieval(
    core: &CoreModel,
    overlay: Option<&TuningOverlay>,
    tokenizer: &Tokenizer,
    queries: &[ClozeQuery],
) -> Result<FactReport> {
    if queries.is_empty() {
        return Err(Error::invalid("knowledgeeval: no cloze queries"));
    }
    enum Outcome {
        Rank(usize),
        Oov,
        NonFinal,
    }
    let outcomes: Vec<Outcome> = queries
        .par_iter()
        .map(|q| -> Result<Outcome> {
            let tokens = tokenizer.tokenize(&q.template);
            let slots: Vec<usize> = tokens
                .iter()
                .enumerate()
                .filter(|(_, t)| t.as_str() == mask_surface())
                .map(|(i, _)| i)
                .collect();
            let [slot] = slots[..] else {
                return Err(Error::data(format!(
                    "knowledgeeval: template must contain exactly one {}: {:?}",
                    mask_surface(),
                    q.template
                )));
            };
            let answer_tokens = tokenizer.tokenize(&q.answer);
            let gold = match answer_tokens[..] {
                [ref one] => match tokenizer.id_of(one) {
                    Some(id) => id,
                    None => return Ok(Outcome::Oov),
                },
                _ => return Ok(Outcome::Oov),
            };
            let ids = tokenizer.encode_tokens(&tokens);
            match slot_distribution(core, overlay, &ids, slot)? {
                SlotOutcome::NonFinal => Ok(Outcome::NonFinal),
                SlotOutcome::Distribution(row) => Ok(Outcome::Rank(rank_of(&row, gold))),
            }
        })
        .collect::<Result<_>>()?;

    let mut ranks = Vec::new();
    let mut skipped_oov = 0;
    let mut skipped_nonfinal = 0;
    for o in outcomes {
        match o {
            Outcome::Rank(r) => ranks.push(r),
            Outcome::Oov => skipped_oov += 1,
            Outcome::NonFinal => skipped_nonfinal += 1,
        }
    }
    if ranks.is_empty() {
        return Err(Error::invalid(
            "knowledgeeval: every query was skipped (out-of-vocabulary or non-final slot)",
        ));
    }
    let n = ranks.len() as f64;
    Ok(FactReport {
        p_at_1: ranks.iter().filter(|&&r| r <= 1).count() as f64 / n,
        p_at_10: ranks.iter().filter(|&&r| r <= 10).count() as f64 / n,
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        evaluated: ranks.len(),
        skipped_oov,
        skipped_nonfinal,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorefExample {
    pub sentence: String,
    pub pronoun: String,
    pub candidates: [String; 2],
    /// 1-based index of the gold candidate.
    pub correct: usize,
    /// True on the pro-stereotypical subset.
    pub stereotypical: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorefReport {
    pub f1_pro: f64,
    pub f1_anti: f64,
    pub avg: f64,
    pub diff: f64,
    /// Score ties, counted as wrong.
    pub ties: usize,
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// "{sentence} {Pronoun} refers to the {candidate}."
pub fn completed_sentence(sentence: &str, pronoun: &str, candidate: &str) -> String {
    format!("{} {} refers to the {}.", sentence, capitalize(pronoun), candidate)
}

/// Forced binary choice per example, so per-subset F1 equals accuracy.
pub fn winobias_eval(
    scorer: &impl SentenceScorer,
    examples: &[CorefExample],
) -> Result<CorefReport> {
    if examples.is_empty() {
        return Err(Error::invalid("knowledgeeval: no coreference examples"));
    }
    struct Judged {
        stereotypical: bool,
        right: bool,
        tie: bool,
    }
    let judged: Vec<Judged> = examples
        .par_iter()
        .map(|ex| -> Result<Judged> {
            if !(ex.correct == 1 || ex.correct == 2) {
                return Err(Error::data(format!(
                    "knowledgeeval: correct must be 1 or 2, got {}",
                    ex.correct
                )));
            }
            if ex.candidates[0] == ex.candidates[1] {
                return Err(Error::data(format!(
                    "knowledgeeval: candidates must be distinct: {:?}",
                    ex.candidates
                )));
            }
            let s0 = scorer.score(&completed_sentence(&ex.sentence, &ex.pronoun, &ex.candidates[0]))?;
            let s1 = scorer.score(&completed_sentence(&ex.sentence, &ex.pronoun, &ex.candidates[1]))?;
            let tie = s0 == s1;
            let predicted = if s0 >= s1 { 1 } else { 2 };
            Ok(Judged {
                stereotypical: ex.stereotypical,
                right: !tie && predicted == ex.correct,
                tie,
            })
        })
        .collect::<Result<_>>()?;

    let accuracy = |want: bool| -> Result<f64> {
        let subset: Vec<&Judged> = judged.iter().filter(|j| j.stereotypical == want).collect();
        if subset.is_empty() {
            return Err(Error::invalid(format!(
                "knowledgeeval: empty {} subset",
                if want { "pro-stereotypical" } else { "anti-stereotypical" }
            )));
        }
        Ok(100.0 * subset.iter().filter(|j| j.right).count() as f64 / subset.len() as f64)
    };
    let f1_pro = accuracy(true)?;
    let f1_anti = accuracy(false)?;
    Ok(CorefReport {
        f1_pro,
        f1_anti,
        avg: 0.5 * (f1_pro + f1_anti),
        diff: f1_pro - f1_anti,
        ties: judged.iter().filter(|j| j.tie).count(),
    })
}

pub fn read_cloze(path: &std::path::Path) -> Result<Vec<ClozeQuery>> {
    read_jsonl(path, "cloze")
}

pub fn read_coref(path: &std::path::Path) -> Result<Vec<CorefExample>> {
    read_jsonl(path, "coreference")
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &std::path::Path, what: &str) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("knowledgeeval: reading {} {}", what, path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| {
                Error::data(format!("knowledgeeval: {} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}
