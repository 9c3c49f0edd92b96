//! Loss and sequence scoring on top of the forward pass. The causal
//! objective scores each token given its predecessors; the masked objective
//! scores tokens a masking plan replaced by MASK. Losses are mean negative
//! log-likelihood per predicted token in natural log.

use super::backward::{backward, Gradients};
use super::forward::forward;
use super::{CoreModel, Objective};
use crate::corpus::{fraction_count, MASK};
use crate::error::{Error, Result};
use crate::peft::TuningOverlay;
use crate::rng::{self, derive_seed_indexed, rng_from};
use crate::tensor::log_sum_exp;
use rayon::prelude::*;

/// Masked positions per batch example.
pub type MaskPlan = Vec<Vec<usize>>;

pub const MASK_FRACTION: f64 = 0.15;

/// Selects ceil(0.15 * len) positions per example, seeded per example so the
/// plan is independent of batch composition elsewhere.
pub fn mask_plan(batch: &[Vec<usize>], seed: u64) -> MaskPlan {
    batch
        .iter()
        .enumerate()
        .map(|(i, example)| {
            let k = fraction_count(MASK_FRACTION, example.len());
            let mut rng = rng_from(derive_seed_indexed(seed, "mask", i as u64));
            let mut picks = rng::sample_without_replacement(example.len(), k, &mut rng);
            picks.sort_unstable();
            picks
        })
        .collect()
}

pub(crate) struct Prediction {
    /// Real-position row index into the forward logits.
    pub row: usize,
    pub target: usize,
}

/// Model input and scored positions for one example: the causal objective
/// shifts targets by one; the masked objective substitutes MASK at the
/// planned positions and scores the originals there.
pub(crate) fn example_predictions(
    objective: Objective,
    tokens: &[usize],
    positions: Option<&[usize]>,
) -> Result<(Vec<usize>, Vec<Prediction>)> {
    match objective {
        Objective::Causal => {
            if tokens.len() < 2 {
                return Err(Error::invalid(format!(
                    "model::lm_loss: causal objective needs length >= 2, got {}",
                    tokens.len()
                )));
            }
            let preds = (0..tokens.len() - 1)
                .map(|t| Prediction {
                    row: t,
                    target: tokens[t + 1],
                })
                .collect();
            Ok((tokens.to_vec(), preds))
        }
        Objective::Masked => {
            let positions = positions.ok_or_else(|| {
                Error::invalid("model::lm_loss: masked objective requires a masking plan")
            })?;
            let mut input = tokens.to_vec();
            let mut preds = Vec::with_capacity(positions.len());
            for &p in positions {
                if p >= tokens.len() {
                    return Err(Error::invalid(format!(
                        "model::lm_loss: masked position {p} out of range for length {}",
                        tokens.len()
                    )));
                }
                input[p] = MASK;
                preds.push(Prediction {
                    row: p,
                    target: tokens[p],
                });
            }
            Ok((input, preds))
        }
    }
}

/// Mean NLL per predicted token across the batch. Per-example work is
/// independent, so examples run in parallel and are reduced in index order
/// for a scheduling-independent result.
pub fn lm_loss(
    core: &CoreModel,
    overlay: Option<&TuningOverlay>,
    batch: &[Vec<usize>],
    plan: Option<&MaskPlan>,
) -> Result<f64> {
    if core.config.objective == Objective::Masked {
        if let Some(p) = plan {
            if p.len() != batch.len() {
                return Err(Error::invalid(format!(
                    "model::lm_loss: plan covers {} examples, batch has {}",
                    p.len(),
                    batch.len()
                )));
            }
        }
    }
    let parts: Vec<(f64, usize)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, example)| -> Result<(f64, usize)> {
            let positions = plan.map(|p| p[i].as_slice());
            let (input, preds) = example_predictions(core.config.objective, example, positions)?;
            if preds.is_empty() {
                return Ok((0.0, 0));
            }
            let logits = forward(core, overlay, &input)?;
            let mut sum = 0.0;
            for pred in &preds {
                let row = logits.row(pred.row);
                sum += log_sum_exp(row) - row[pred.target];
            }
            Ok((sum, preds.len()))
        })
        .collect::<Result<_>>()?;
    let (total, count) = parts
        .into_iter()
        .fold((0.0, 0usize), |(s, c), (ps, pc)| (s + ps, c + pc));
    if count == 0 {
        return Err(Error::invalid(
            "model::lm_loss: batch contains zero predicted tokens",
        ));
    }
    Ok(total / count as f64)
}

/// Loss plus exact gradients for the overlay's tunable parameters (the core
/// itself under Full).
pub fn grad_tunable(
    core: &CoreModel,
    overlay: &TuningOverlay,
    batch: &[Vec<usize>],
    plan: Option<&MaskPlan>,
) -> Result<Gradients> {
    backward(core, overlay, batch, plan)
}

/// Sum over t >= 1 of log P(token_t | tokens before t); causal models only.
pub fn sequence_logprob(
    core: &CoreModel,
    overlay: Option<&TuningOverlay>,
    tokens: &[usize],
) -> Result<f64> {
    if core.config.objective != Objective::Causal {
        return Err(Error::invalid(
            "model::sequence_logprob: requires a causal model",
        ));
    }
    if tokens.len() < 2 {
        return Err(Error::invalid(format!(
            "model::sequence_logprob: need at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    let logits = forward(core, overlay, tokens)?;
    let mut sum = 0.0;
    for t in 0..tokens.len() - 1 {
        let row = logits.row(t);
        sum += row[tokens[t + 1]] - log_sum_exp(row);
    }
    Ok(sum)
}

/// Sum over all t of log P(token_t | tokens with position t masked); one
/// forward pass per position. Masked models only.
pub fn pseudo_logprob(
    core: &CoreModel,
    overlay: Option<&TuningOverlay>,
    tokens: &[usize],
) -> Result<f64> {
    if core.config.objective != Objective::Masked {
        return Err(Error::invalid(
            "model::pseudo_logprob: requires a masked model",
        ));
    }
    if tokens.is_empty() {
        return Err(Error::invalid("model::pseudo_logprob: empty input"));
    }
    let contributions: Vec<f64> = (0..tokens.len())
        .into_par_iter()
        .map(|t| -> Result<f64> {
            let mut input = tokens.to_vec();
            input[t] = MASK;
            let logits = forward(core, overlay, &input)?;
            let row = logits.row(t);
            Ok(row[tokens[t]] - log_sum_exp(row))
        })
        .collect::<Result<_>>()?;
    Ok(contributions.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_embeddings, forward_with_cache, input_rows, ModelConfig};
    use crate::peft::{attach, MethodSpec, OverlayKind};
    use crate::tensor::Mat;

    fn config(objective: Objective, vocab: usize) -> ModelConfig {
        ModelConfig {
            n_layer: 2,
            d: 8,
            n_head: 2,
            t_max: 16,
            vocab_size: vocab,
            objective,
        }
    }

    fn model(objective: Objective, vocab: usize, seed: u64) -> CoreModel {
        CoreModel::new(config(objective, vocab), seed).unwrap()
    }

    #[test]
    fn zeroed_model_scores_uniformly() {
        let vocab = 50;
        let zero = model(Objective::Causal, vocab, 0).zeros_like();
        let batch = vec![vec![4, 5, 6, 7, 8]];
        let loss = lm_loss(&zero, None, &batch, None).unwrap();
        assert!((loss - (vocab as f64).ln()).abs() < 1e-12);

        let lp = sequence_logprob(&zero, None, &batch[0]).unwrap();
        assert!((lp + 4.0 * (vocab as f64).ln()).abs() < 1e-12);

        let zero_masked = model(Objective::Masked, vocab, 0).zeros_like();
        let plan = vec![vec![0, 2]];
        let loss = lm_loss(&zero_masked, None, &batch, Some(&plan)).unwrap();
        assert!((loss - (vocab as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_recomputation_from_emitted_logits() {
        let m = model(Objective::Causal, 13, 21);
        let batch = vec![vec![1, 5, 9], vec![2, 3, 4, 5]];
        let loss = lm_loss(&m, None, &batch, None).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for example in &batch {
            let logits = forward(&m, None, example).unwrap();
            for t in 0..example.len() - 1 {
                let row = logits.row(t);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let p = (row[example[t + 1]] - max).exp() / z;
                total -= p.ln();
                count += 1;
            }
        }
        assert!((loss - total / count as f64).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized_before_gain() {
        let m = model(Objective::Masked, 17, 3);
        let cache = forward_with_cache(&m, None, &[1, 2, 3, 4]).unwrap();
        for lc in &cache.layers {
            for ln in [&lc.ln_attn, &lc.ln_ffn] {
                for r in 0..ln.xhat.rows {
                    let row = ln.xhat.row(r);
                    let mean: f64 = row.iter().sum::<f64>() / row.len() as f64;
                    let var: f64 =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
                    assert!(mean.abs() < 1e-6, "mean {mean}");
                    assert!((var - 1.0).abs() < 1e-6, "var {var}");
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_including_prefix_columns() {
        let m = model(Objective::Causal, 17, 3);
        let prefix = attach(&m, MethodSpec::Prefix { l: 3 }, 11).unwrap();
        for overlay in [None, Some(&prefix)] {
            let cache = forward_with_cache(&m, overlay, &[1, 2, 3, 4, 5]).unwrap();
            for lc in &cache.layers {
                for attn in &lc.attn {
                    let expected_cols = overlay.map_or(0, |_| 3) + 5;
                    assert_eq!(attn.cols, expected_cols);
                    for r in 0..attn.rows {
                        let s: f64 = attn.row(r).iter().sum();
                        assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let m = model(Objective::Causal, 17, 9);
        let a = forward(&m, None, &[1, 2, 3, 4, 5]).unwrap();
        let b = forward(&m, None, &[1, 2, 3, 9, 16]).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t), "position {t} saw the future");
        }
        assert_ne!(a.row(3), b.row(3));

        // masked models attend bidirectionally: position 0 must change
        let bm = model(Objective::Masked, 17, 9);
        let a = forward(&bm, None, &[1, 2, 3, 4, 5]).unwrap();
        let b = forward(&bm, None, &[1, 2, 3, 9, 16]).unwrap();
        assert_ne!(a.row(0), b.row(0));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = model(Objective::Causal, 17, 9);
        let a = forward(&m, None, &[3, 1, 4, 1, 5]).unwrap();
        let b = forward(&m, None, &[3, 1, 4, 1, 5]).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn causal_scoring_is_consistent_across_prefix_forwards() {
        // single full pass vs. per-prefix incremental passes
        let m = model(Objective::Causal, 17, 5);
        let tokens = [3, 1, 4, 1, 5, 9];
        let whole = sequence_logprob(&m, None, &tokens).unwrap();
        let mut incremental = 0.0;
        for t in 1..tokens.len() {
            let logits = forward(&m, None, &tokens[..=t]).unwrap();
            let row = logits.row(t - 1);
            incremental += row[tokens[t]] - log_sum_exp(row);
        }
        assert!((whole - incremental).abs() < 1e-10);
    }

    #[test]
    fn pseudo_logprob_matches_per_position_passes_and_ignores_order() {
        let m = model(Objective::Masked, 17, 5);
        let tokens = [3, 1, 4, 1, 5];
        let got = pseudo_logprob(&m, None, &tokens).unwrap();
        let mut expected = 0.0;
        for t in [4, 2, 0, 3, 1] {
            let mut input = tokens.to_vec();
            input[t] = MASK;
            let logits = forward(&m, None, &input).unwrap();
            let row = logits.row(t);
            expected += row[tokens[t]] - log_sum_exp(row);
        }
        assert!((got - expected).abs() < 1e-12);

        // single-token sentence: log of the MASK-slot probability
        let got = pseudo_logprob(&m, None, &[7]).unwrap();
        let logits = forward(&m, None, &[MASK]).unwrap();
        let row = logits.row(0);
        assert!((got - (row[7] - log_sum_exp(row))).abs() < 1e-12);
    }

    #[test]
    fn mask_plan_is_deterministic_and_in_range() {
        let batch = vec![vec![1; 20], vec![2; 7], vec![3; 1]];
        let plan = mask_plan(&batch, 42);
        assert_eq!(plan, mask_plan(&batch, 42));
        assert_ne!(plan, mask_plan(&batch, 43));
        // ceil(0.15 * 20) = 3, ceil(0.15 * 7) = 2, ceil(0.15 * 1) = 1
        assert_eq!(plan.iter().map(|p| p.len()).collect::<Vec<_>>(), vec![3, 2, 1]);
        for (positions, example) in plan.iter().zip(&batch) {
            let mut seen = positions.clone();
            seen.dedup();
            assert_eq!(seen.len(), positions.len());
            assert!(positions.iter().all(|&p| p < example.len()));
        }
    }

    #[test]
    fn scoring_preconditions_are_enforced() {
        let causal = model(Objective::Causal, 17, 1);
        let masked = model(Objective::Masked, 17, 1);
        assert!(lm_loss(&causal, None, &[vec![3]], None).is_err());
        assert!(lm_loss(&masked, None, &[vec![3, 4]], None).is_err());
        assert!(lm_loss(&causal, None, &[], None).is_err());
        assert!(sequence_logprob(&masked, None, &[1, 2]).is_err());
        assert!(sequence_logprob(&causal, None, &[1]).is_err());
        assert!(pseudo_logprob(&causal, None, &[1, 2]).is_err());
        assert!(pseudo_logprob(&masked, None, &[]).is_err());
        assert!(forward(&causal, None, &[99]).is_err());
        assert!(forward(&causal, None, &(0..17).cycle().take(20).collect::<Vec<_>>()).is_err());
    }

    #[test]
    fn prompt_forward_equals_direct_embedding_prepend() {
        let m = model(Objective::Causal, 17, 31);
        let overlay = attach(&m, MethodSpec::Prompt { l: 3 }, 7).unwrap();
        let tokens = [2, 8, 5, 1];
        let with_prompt = forward(&m, Some(&overlay), &tokens).unwrap();

        // same rows built by hand: prompt rows verbatim, tokens at slots 3..
        let rows = input_rows(&m, Some(&overlay), &tokens).unwrap();
        let OverlayKind::Prompt(p) = &overlay.kind else {
            panic!()
        };
        for r in 0..3 {
            assert_eq!(rows.row(r), p.p.row(r));
        }
        let all = forward_embeddings(&m, &rows).unwrap();
        for t in 0..tokens.len() {
            let a = with_prompt.row(t);
            let b = all.row(3 + t);
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_length_overlays_are_bit_identical_to_base() {
        let m = model(Objective::Causal, 17, 13);
        let tokens = [2, 8, 5, 1, 9];
        let base = forward(&m, None, &tokens).unwrap();
        let prefix0 = attach(&m, MethodSpec::Prefix { l: 0 }, 7).unwrap();
        let prompt0 = attach(&m, MethodSpec::Prompt { l: 0 }, 7).unwrap();
        let adapter0 = attach(&m, MethodSpec::Adapter { r: 4 }, 7).unwrap();
        assert_eq!(forward(&m, Some(&prefix0), &tokens).unwrap().data, base.data);
        assert_eq!(forward(&m, Some(&prompt0), &tokens).unwrap().data, base.data);
        assert_eq!(forward(&m, Some(&adapter0), &tokens).unwrap().data, base.data);
    }

    /// Moves every tunable entry to a generic point. At the identity
    /// initialization some gradients sit at the finite-difference noise
    /// floor (adapter up-weights behind a zero W_up), which makes relative
    /// error meaningless.
    fn randomize(overlay: &mut TuningOverlay, seed: u64) {
        let mut rng = rng_from(seed);
        for t in overlay.tensors_mut() {
            let draw = Mat::gaussian(1, t.len(), 0.1, &mut rng);
            t.copy_from_slice(&draw.data);
        }
    }

    fn fd_check(core: &CoreModel, overlay: &TuningOverlay, batch: &[Vec<usize>], plan: Option<&MaskPlan>) -> f64 {
        let grads = grad_tunable(core, overlay, batch, plan).unwrap();
        let flat: Vec<f64> = grads
            .tunable()
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect();
        let mut core = core.clone();
        let mut overlay = overlay.clone();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut idx = 0;
        let n_tensors = crate::peft::tunable_tensors_mut(&mut core, &mut overlay).len();
        for ti in 0..n_tensors {
            let len = crate::peft::tunable_tensors_mut(&mut core, &mut overlay)[ti].len();
            for j in 0..len {
                let orig = crate::peft::tunable_tensors_mut(&mut core, &mut overlay)[ti][j];
                crate::peft::tunable_tensors_mut(&mut core, &mut overlay)[ti][j] = orig + h;
                let up = lm_loss(&core, Some(&overlay), batch, plan).unwrap();
                crate::peft::tunable_tensors_mut(&mut core, &mut overlay)[ti][j] = orig - h;
                let down = lm_loss(&core, Some(&overlay), batch, plan).unwrap();
                crate::peft::tunable_tensors_mut(&mut core, &mut overlay)[ti][j] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = flat[idx];
                let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
                if rel > 1e-4 {
                    eprintln!("tensor {ti} entry {j}: analytic {a:e} fd {fd:e} rel {rel:e}");
                }
                worst = worst.max(rel);
                idx += 1;
            }
        }
        assert_eq!(idx, flat.len());
        worst
    }

    #[test]
    fn prompt_gradients_match_finite_differences() {
        let m = model(Objective::Causal, 11, 2);
        let overlay = attach(&m, MethodSpec::Prompt { l: 2 }, 3).unwrap();
        let batch = vec![vec![1, 5, 9, 2], vec![3, 4, 6]];
        let worst = fd_check(&m, &overlay, &batch, None);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn adapter_at_zero_gets_zero_down_gradient_but_nonzero_up() {
        let m = model(Objective::Causal, 11, 2);
        let overlay = attach(&m, MethodSpec::Adapter { r: 4 }, 3).unwrap();
        let batch = vec![vec![1, 5, 9, 2]];
        let grads = grad_tunable(&m, &overlay, &batch, None).unwrap();
        let OverlayKind::Adapter(ga) = &grads.overlay.kind else {
            panic!()
        };
        assert!(ga.down.iter().all(|m| m.data.iter().all(|&v| v == 0.0)));
        assert!(ga.down_bias.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert!(ga.up.iter().any(|m| m.data.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn analytic_gradient_vanishes_at_a_line_search_minimum() {
        // 1-parameter probe: one output-projection entry in a column that one
        // prediction wants large and the others want small, so the slice is
        // convex with an interior minimum. Bisect on the slope sign, then ask
        // the analytic gradient at the minimum.
        let m = model(Objective::Causal, 11, 6);
        let overlay = attach(&m, MethodSpec::Full, 0).unwrap();
        let batch = vec![vec![1, 5, 9, 2]];

        let loss_for = |entry: usize, theta: f64| {
            let mut core = m.clone();
            core.output_projection.data[entry] = theta;
            lm_loss(&core, None, &batch, None).unwrap()
        };
        let slope_for = |entry: usize, theta: f64| {
            (loss_for(entry, theta + 1e-6) - loss_for(entry, theta - 1e-6)) / 2e-6
        };

        // the slice is convex (log-sum-exp of affine functions of theta), so
        // an interior minimum exists exactly when the slope brackets zero;
        // which (dimension, target column) pairs do depends on the signs of
        // the final hidden entries, so search for one
        let (mut lo, mut hi) = (-64.0, 64.0);
        let entry = (0..m.config.d)
            .flat_map(|j| {
                let v = m.config.vocab_size;
                [5, 9, 2].into_iter().map(move |col| j * v + col)
            })
            .find(|&e| slope_for(e, lo) < 0.0 && slope_for(e, hi) > 0.0)
            .expect("no output-projection entry brackets a minimum");
        let slope = |theta: f64| slope_for(entry, theta);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if slope(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let theta_star = 0.5 * (lo + hi);
        let mut core = m.clone();
        core.output_projection.data[entry] = theta_star;
        let grads = grad_tunable(&core, &overlay, &batch, None).unwrap();
        let g = grads.tunable().last().unwrap()[entry];
        assert!(g.abs() < 1e-8, "gradient at line-search minimum: {g}");
    }

    #[test]
    fn masked_gradients_match_finite_differences() {
        let m = model(Objective::Masked, 11, 2);
        let mut overlay = attach(&m, MethodSpec::Adapter { r: 4 }, 3).unwrap();
        randomize(&mut overlay, 8);
        let batch = vec![vec![1, 5, 9, 2, 7]];
        let plan = mask_plan(&batch, 4);
        let worst = fd_check(&m, &overlay, &batch, Some(&plan));
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn prompt_rows_are_excluded_from_the_loss() {
        // a causal example of length T yields T-1 predictions whether or not
        // a prompt is attached
        let m = model(Objective::Causal, 11, 2);
        let overlay = attach(&m, MethodSpec::Prompt { l: 3 }, 3).unwrap();
        let batch = vec![vec![1, 5]];
        // with one predicted token, loss is exactly that token's NLL
        let loss = lm_loss(&m, Some(&overlay), &batch, None).unwrap();
        let logits = forward(&m, Some(&overlay), &batch[0]).unwrap();
        let row = logits.row(0);
        let expected = log_sum_exp(row) - row[5];
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn embedding_rows_match_manual_construction() {
        let m = model(Objective::Causal, 11, 2);
        let rows = input_rows(&m, None, &[4, 7]).unwrap();
        for (i, &tok) in [4usize, 7].iter().enumerate() {
            let emb = m.token_embedding.row(tok);
            let pos = m.position_embedding.row(i);
            let expected: Vec<f64> = emb.iter().zip(pos).map(|(a, b)| a + b).collect();
            assert_eq!(rows.row(i), &expected[..]);
        }
        let mut direct = Mat::zeros(2, m.config.d);
        direct.row_mut(0).copy_from_slice(rows.row(0));
        direct.row_mut(1).copy_from_slice(rows.row(1));
        let via_rows = forward_embeddings(&m, &direct).unwrap();
        let via_tokens = forward(&m, None, &[4, 7]).unwrap();
        assert_eq!(via_rows.data, via_tokens.data);
    }
}
