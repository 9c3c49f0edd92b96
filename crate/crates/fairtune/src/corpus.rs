//! Corpus ingestion: word-level tokenization, vocabulary building, chunking,
//! down-sampling, and train/validation splitting.
//!
//! The tokenizer is case-preserving (distinct ids for "He" and "he"); the
//! lexicon does its own case-insensitive matching on token strings.
//! Punctuation is split into separate tokens except for abbreviations the
//! lexicon declares (so "mr." stays one token).

use crate::error::{Error, Result};
use crate::rng::{self, rng_from};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const BOS: usize = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<mask>", "<bos>"];

const TOKENIZER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, usize>,
    abbreviations: HashSet<String>,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\'' || c == '-' || c == '_'
}

/// Splits one whitespace-delimited chunk, peeling leading/trailing
/// punctuation into separate tokens. Abbreviations and the special-token
/// spellings are kept whole.
fn split_chunk(chunk: &str, abbreviations: &HashSet<String>, out: &mut Vec<String>) {
    let mut lead: Vec<String> = Vec::new();
    let mut trail: Vec<String> = Vec::new();
    let mut core = chunk.to_string();
    loop {
        if core.is_empty() {
            break;
        }
        let lower = core.to_lowercase();
        if abbreviations.contains(&lower) || SPECIALS.contains(&lower.as_str()) {
            break;
        }
        let first = core.chars().next().unwrap();
        if !is_word_char(first) {
            lead.push(first.to_string());
            core.drain(..first.len_utf8());
            continue;
        }
        let last = core.chars().last().unwrap();
        if !is_word_char(last) {
            trail.push(last.to_string());
            core.truncate(core.len() - last.len_utf8());
            continue;
        }
        break;
    }
    out.append(&mut lead);
    if !core.is_empty() {
        out.push(core);
    }
    out.extend(trail.into_iter().rev());
}

/// Word-level tokenization without a vocabulary.
pub fn tokenize_with(text: &str, abbreviations: &HashSet<String>) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        split_chunk(chunk, abbreviations, &mut out);
    }
    out
}

impl Tokenizer {
    /// Builds a vocabulary over tokenized lines: every token with count >=
    /// `min_count` gets an id after the four reserved specials, ordered by
    /// descending frequency with lexicographic tie-break.
    pub fn build_vocab(
        lines: &[String],
        min_count: usize,
        abbreviations: &HashSet<String>,
    ) -> Result<Tokenizer> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for token in tokenize_with(line, abbreviations) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::data(
                "corpus::build_vocab: empty corpus (no tokens found)",
            ));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(ranked.into_iter().map(|(w, _)| w));
        Ok(Self::from_words(words, abbreviations.clone()))
    }

    fn from_words(words: Vec<String>, abbreviations: HashSet<String>) -> Tokenizer {
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Tokenizer {
            words,
            ids,
            abbreviations,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn abbreviations(&self) -> &HashSet<String> {
        &self.abbreviations
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        tokenize_with(text, &self.abbreviations)
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn word_of(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    /// Tokenizes and maps to ids; out-of-vocabulary tokens become UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.tokenize(text)
            .iter()
            .map(|t| self.ids.get(t).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.ids.get(t).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i).map(|s| s.as_str()).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut abbreviations: Vec<&String> = self.abbreviations.iter().collect();
        abbreviations.sort();
        let doc = TokenizerFile {
            version: TOKENIZER_FORMAT_VERSION,
            words: self.words[SPECIALS.len()..].to_vec(),
            abbreviations: abbreviations.into_iter().cloned().collect(),
        };
        let text = serde_json::to_string_pretty(&doc).expect("tokenizer serialization");
        std::fs::write(path, text)
            .map_err(|e| Error::io(format!("corpus::tokenizer_save: {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Tokenizer> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("corpus::tokenizer_load: {}", path.display()), e))?;
        let doc: TokenizerFile = serde_json::from_str(&text).map_err(|e| {
            Error::data(format!(
                "corpus::tokenizer_load: {}: {e}",
                path.display()
            ))
        })?;
        if doc.version != TOKENIZER_FORMAT_VERSION {
            return Err(Error::data(format!(
                "corpus::tokenizer_load: {}: unsupported format version {}",
                path.display(),
                doc.version
            )));
        }
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(doc.words);
        Ok(Self::from_words(words, doc.abbreviations.into_iter().collect()))
    }
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    words: Vec<String>,
    abbreviations: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorpusMode {
    Sentence,
    Chunk(usize),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub downsample_fraction: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub examples: Vec<Vec<usize>>,
    pub mode: CorpusMode,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Encodes in-memory lines. Sentence mode keeps one example per
    /// non-empty line; chunk(T) concatenates everything and cuts length-T
    /// pieces (the trailing piece may be shorter).
    pub fn from_lines(
        lines: &[String],
        mode: CorpusMode,
        tokenizer: &Tokenizer,
        source: &str,
    ) -> Result<Corpus> {
        let examples = match mode {
            CorpusMode::Sentence => lines
                .iter()
                .filter(|l| !l.trim().is_empty())
                .map(|l| tokenizer.encode(l))
                .collect(),
            CorpusMode::Chunk(t) => {
                if t < 2 {
                    return Err(Error::invalid(format!(
                        "corpus::load_corpus: chunk length must be at least 2, got {t}"
                    )));
                }
                let mut stream = Vec::new();
                for line in lines {
                    stream.extend(tokenizer.encode(line));
                }
                stream.chunks(t).map(|c| c.to_vec()).collect()
            }
        };
        Ok(Corpus {
            examples,
            mode,
            provenance: Provenance {
                source: source.to_string(),
                ..Provenance::default()
            },
        })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let ctx = || format!("corpus::write_jsonl: {}", path.display());
        let file = std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
        let mut w = std::io::BufWriter::new(file);
        let header = serde_json::json!({
            "kind": "header",
            "mode": self.mode,
            "provenance": self.provenance,
        });
        writeln!(w, "{header}").map_err(|e| Error::io(ctx(), e))?;
        for ids in &self.examples {
            let rec = serde_json::json!({ "ids": ids });
            writeln!(w, "{rec}").map_err(|e| Error::io(ctx(), e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Corpus> {
        let ctx = || format!("corpus::read_jsonl: {}", path.display());
        let file = std::fs::File::open(path).map_err(|e| Error::io(ctx(), e))?;
        let reader = std::io::BufReader::new(file);
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::data(format!("{}: missing header line", ctx())))?
            .map_err(|e| Error::io(ctx(), e))?;
        #[derive(Deserialize)]
        struct Header {
            mode: CorpusMode,
            provenance: Provenance,
        }
        let header: Header = serde_json::from_str(&header_line)
            .map_err(|e| Error::data(format!("{}: bad header: {e}", ctx())))?;
        #[derive(Deserialize)]
        struct Record {
            ids: Vec<usize>,
        }
        let mut examples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(ctx(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("{}: line {}: {e}", ctx(), i + 2)))?;
            examples.push(rec.ids);
        }
        Ok(Corpus {
            examples,
            mode: header.mode,
            provenance: header.provenance,
        })
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("corpus::load_corpus: {}", path.display()), e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

pub fn load_corpus(path: &Path, mode: CorpusMode, tokenizer: &Tokenizer) -> Result<Corpus> {
    let lines = read_lines(path)?;
    Corpus::from_lines(&lines, mode, tokenizer, &path.display().to_string())
}

/// Number of items a fraction selects: ceil(fraction * n), with a small
/// epsilon so f64 products like 0.15 * 20 landing one ulp above an integer
/// do not round up spuriously.
pub(crate) fn fraction_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Uniformly samples ceil(fraction*n) examples without replacement,
/// preserving original order.
pub fn downsample(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Corpus> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "corpus::downsample: fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = corpus.len();
    let k = fraction_count(fraction, n).min(n);
    let mut rng = rng_from(seed);
    let mut picks = rng::sample_without_replacement(n, k, &mut rng);
    picks.sort_unstable();
    let examples = picks.iter().map(|&i| corpus.examples[i].clone()).collect();
    Ok(Corpus {
        examples,
        mode: corpus.mode,
        provenance: Provenance {
            source: corpus.provenance.source.clone(),
            downsample_fraction: Some(fraction),
            seed: Some(seed),
        },
    })
}

/// Deterministic disjoint-exhaustive split; the validation side gets
/// round(val_fraction * n) examples, at least 1 and at most n-1. Original
/// order is preserved within each side.
pub fn split(corpus: &Corpus, val_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "corpus::split: val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let n = corpus.len();
    if n < 2 {
        return Err(Error::data(format!(
            "corpus::split: need at least 2 examples to split, got {n}"
        )));
    }
    let val_count = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = rng_from(seed);
    let order = rng::permutation(n, &mut rng);
    let mut val_idx: Vec<usize> = order[..val_count].to_vec();
    let mut train_idx: Vec<usize> = order[val_count..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let take = |idx: &[usize]| Corpus {
        examples: idx.iter().map(|&i| corpus.examples[i].clone()).collect(),
        mode: corpus.mode,
        provenance: Provenance {
            source: corpus.provenance.source.clone(),
            downsample_fraction: corpus.provenance.downsample_fraction,
            seed: Some(seed),
        },
    };
    Ok((take(&train_idx), take(&val_idx)))
}
