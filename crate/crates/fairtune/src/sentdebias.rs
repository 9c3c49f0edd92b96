//! Linear subspace debiasing of sentence embeddings: estimate the bias
//! directions from counterfactual difference vectors via PCA, then remove
//! each embedding's projection onto them at inference time.

use crate::cda::{augment_corpus, AugmentOptions};
use crate::corpus::{Tokenizer, BOS};
use crate::error::{Error, Result};
use crate::lexicon::BiasAttributeList;
use crate::model::{forward_with_cache, CoreModel, Objective};
use crate::peft::TuningOverlay;
use crate::tensor::{dot, symmetric_eigen, Mat};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Relative eigenvalue cutoff below which a direction counts as numerical
/// noise rather than rank.
const RANK_TOLERANCE: f64 = 1e-9;

pub trait SentenceEncoder: Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

impl<F: Fn(&str) -> Vec<f64> + Sync> SentenceEncoder for F {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self(text))
    }
}

/// Mean of the final hidden layer over real token positions. Causal models
/// get a BOS prepend that is excluded from the mean.
pub struct ModelEncoder<'a> {
    pub core: &'a CoreModel,
    pub overlay: Option<&'a TuningOverlay>,
    pub tokenizer: &'a Tokenizer,
}

impl SentenceEncoder for ModelEncoder<'_> {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut ids = self.tokenizer.encode(text);
        if ids.is_empty() {
            return Err(Error::invalid(format!(
                "sentdebias: sentence produced no tokens: {text:?}"
            )));
        }
        let mut skip = 0;
        if self.core.config.objective == Objective::Causal {
            ids.insert(0, BOS);
            skip = 1;
        }
        let cache = forward_with_cache(self.core, self.overlay, &ids)?;
        let d = self.core.config.d;
        let n_prompt = cache.n_prompt;
        let mut mean = vec![0.0; d];
        let count = ids.len() - skip;
        for t in skip..ids.len() {
            let row = cache.h_final.row(n_prompt + t);
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        Ok(mean)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasSubspace {
    pub dim: usize,
    /// K orthonormal rows, sign-canonicalized so each row's
    /// largest-magnitude entry is positive.
    pub basis: Vec<Vec<f64>>,
    pub source_count: usize,
    pub seed: u64,
}

/// Embedding differences between each attribute-bearing sentence and its
/// sampled counterfactuals. Sentences mentioning no group contribute
/// nothing.
pub fn difference_vectors(
    encoder: &impl SentenceEncoder,
    sentences: &[String],
    list: &BiasAttributeList,
    samples_per_sentence: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let opts = AugmentOptions {
        samples_per_sentence,
        seed,
        keep_neutral: false,
        exclude_fixed_identity: false,
    };
    let augmented = augment_corpus(sentences, list, &opts)?;

    // pair each counterfactual with its original; originals come first per
    // source sentence
    let mut pairs: Vec<(&str, &str)> = Vec::new();
    let mut current_original: Option<(&str, usize)> = None;
    for ex in &augmented.examples {
        if ex.is_original {
            current_original = Some((&ex.text, ex.source_index));
        } else {
            let (orig, src) = current_original
                .expect("augmented corpus emits the original before its counterfactuals");
            debug_assert_eq!(src, ex.source_index);
            pairs.push((orig, &ex.text));
        }
    }
    if pairs.is_empty() {
        return Err(Error::invalid(
            "sentdebias: no attribute-bearing sentences found",
        ));
    }
    pairs
        .par_iter()
        .map(|(orig, cf)| -> Result<Vec<f64>> {
            let a = encoder.embed(orig)?;
            let b = encoder.embed(cf)?;
            if a.len() != b.len() {
                return Err(Error::numerical(
                    "sentdebias: encoder produced inconsistent dimensions",
                ));
            }
            Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
        })
        .collect()
}

/// Top-K principal directions of the mean-centered difference set.
pub fn bias_subspace(diffs: &[Vec<f64>], k: usize, seed: u64) -> Result<BiasSubspace> {
    if k == 0 {
        return Err(Error::invalid("sentdebias: K must be at least 1"));
    }
    if diffs.len() < k {
        return Err(Error::invalid(format!(
            "sentdebias: need at least K={k} difference vectors, got {}",
            diffs.len()
        )));
    }
    let d = diffs[0].len();
    if d == 0 || diffs.iter().any(|v| v.len() != d) {
        return Err(Error::invalid(
            "sentdebias: difference vectors must share a positive dimension",
        ));
    }
    let m = diffs.len();
    let mut mean = vec![0.0; d];
    for v in diffs {
        for (mu, x) in mean.iter_mut().zip(v) {
            *mu += x;
        }
    }
    for mu in &mut mean {
        *mu /= m as f64;
    }
    let mut cov = Mat::zeros(d, d);
    for v in diffs {
        let centered: Vec<f64> = v.iter().zip(&mean).map(|(x, mu)| x - mu).collect();
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = cov.row_mut(i);
            for (j, cj) in centered.iter().enumerate() {
                row[j] += ci * cj;
            }
        }
    }
    cov.scale(1.0 / m as f64);

    let (eigenvalues, vectors) = symmetric_eigen(&cov);
    let lambda_max = eigenvalues.first().copied().unwrap_or(0.0);
    let rank = eigenvalues
        .iter()
        .filter(|&&l| l > RANK_TOLERANCE * lambda_max.max(1.0))
        .count();
    if k > rank {
        return Err(Error::invalid(format!(
            "sentdebias: K={k} exceeds the difference set's rank {rank}"
        )));
    }
    let basis = (0..k)
        .map(|col| {
            let mut b: Vec<f64> = (0..d).map(|r| vectors.at(r, col)).collect();
            canonicalize_sign(&mut b);
            b
        })
        .collect();
    Ok(BiasSubspace {
        dim: d,
        basis,
        source_count: m,
        seed,
    })
}

/// Flips the vector if its largest-magnitude entry (first such index on
/// ties) is negative, making the eigenvector choice reproducible.
fn canonicalize_sign(v: &mut [f64]) {
    let mut lead = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[lead].abs() {
            lead = i;
        }
    }
    if v[lead] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// v minus its projection onto the subspace; the result is orthogonal to
/// every basis vector.
pub fn debias_embedding(v: &[f64], subspace: &BiasSubspace) -> Result<Vec<f64>> {
    if v.len() != subspace.dim {
        return Err(Error::invalid(format!(
            "sentdebias: vector dimension {} does not match subspace dimension {}",
            v.len(),
            subspace.dim
        )));
    }
    let mut out = v.to_vec();
    for b in &subspace.basis {
        let coeff = dot(v, b);
        for (o, bb) in out.iter_mut().zip(b) {
            *o -= coeff * bb;
        }
    }
    Ok(out)
}

impl BiasSubspace {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("subspace serialization");
        std::fs::write(path, text)
            .map_err(|e| Error::io(format!("sentdebias: writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<BiasSubspace> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("sentdebias: reading {}", path.display()), e))?;
        let sub: BiasSubspace = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("sentdebias: {}: {e}", path.display())))?;
        if sub.basis.iter().any(|b| b.len() != sub.dim) {
            return Err(Error::data(format!(
                "sentdebias: {}: basis rows do not match dimension {}",
                path.display(),
                sub.dim
            )));
        }
        Ok(sub)
    }
}
