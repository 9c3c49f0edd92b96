//! Forward pass with optional activation caching for the backward pass.
//! Prompt rows are prepended to the input embeddings, prefix key/value rows
//! extend every attention row, and the adapter wraps the feed-forward output
//! in an extra residual. A single code path covers the overlay-free model as
//! the degenerate case, so a zero-length overlay is bit-identical to none.

use super::{CoreModel, LayerNormParams, Objective, LN_EPS};
use crate::error::{Error, Result};
use crate::peft::{OverlayKind, TuningOverlay};
use crate::tensor::{dot, softmax_in_place, Mat};

pub struct LnCache {
    pub xhat: Mat,
    pub inv_std: Vec<f64>,
}

pub struct LayerCache {
    /// Layer input (all rows, prompt included).
    pub input: Mat,
    pub q: Vec<Mat>,
    pub k: Vec<Mat>,
    pub v: Vec<Mat>,
    /// Post-softmax attention, rows of width prefix_len + n_rows.
    pub attn: Vec<Mat>,
    pub concat: Mat,
    pub sum_attn: Mat,
    pub ln_attn: LnCache,
    pub h3: Mat,
    pub z1: Mat,
    pub relu1: Mat,
    /// Feed-forward output before the adapter hook.
    pub h4: Mat,
    /// Adapter pre-activation and activation, when an adapter is attached.
    pub adapter: Option<(Mat, Mat)>,
    pub sum_ffn: Mat,
    pub ln_ffn: LnCache,
}

pub struct RunCache {
    pub n_prompt: usize,
    pub layers: Vec<LayerCache>,
    pub h_final: Mat,
    /// Logits for every row, prompt rows included.
    pub logits: Mat,
}

impl RunCache {
    /// Logits restricted to real token positions.
    pub fn real_logits(&self) -> Mat {
        slice_rows(&self.logits, self.n_prompt)
    }
}

fn slice_rows(m: &Mat, from: usize) -> Mat {
    let mut out = Mat::zeros(m.rows - from, m.cols);
    out.data.copy_from_slice(&m.data[from * m.cols..]);
    out
}

/// Builds the input row matrix for tokens under the overlay: prompt rows
/// verbatim first, then token embedding plus the positional embedding for
/// the slot the token actually occupies (shifted by the prompt length).
pub fn input_rows(
    core: &CoreModel,
    overlay: Option<&TuningOverlay>,
    tokens: &[usize],
) -> Result<Mat> {
    if tokens.is_empty() {
        return Err(Error::invalid("model::forward: empty input"));
    }
    let config = &core.config;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::invalid(format!(
            "model::forward: token id {bad} out of vocabulary range {}",
            config.vocab_size
        )));
    }
    let budget = match overlay.map(|o| &o.kind) {
        Some(OverlayKind::Prompt(p)) => p.l,
        Some(OverlayKind::Prefix(p)) => p.l,
        _ => 0,
    };
    if budget + tokens.len() > config.t_max {
        return Err(Error::invalid(format!(
            "model::forward: length {} plus overlay budget {budget} exceeds t_max {}",
            tokens.len(),
            config.t_max
        )));
    }
    let n_prompt = overlay.map_or(0, |o| o.prompt_len());
    let d = config.d;
    let mut rows = Mat::zeros(n_prompt + tokens.len(), d);
    if let Some(TuningOverlay {
        kind: OverlayKind::Prompt(p),
        ..
    }) = overlay
    {
        rows.data[..n_prompt * d].copy_from_slice(&p.p.data);
    }
    for (i, &tok) in tokens.iter().enumerate() {
        let slot = n_prompt + i;
        let row = rows.row_mut(slot);
        let emb = core.token_embedding.row(tok);
        let pos = core.position_embedding.row(slot);
        for j in 0..d {
            row[j] = emb[j] + pos[j];
        }
    }
    Ok(rows)
}

fn layer_norm(input: &Mat, params: &LayerNormParams) -> (Mat, LnCache) {
    let (n, d) = (input.rows, input.cols);
    let mut out = Mat::zeros(n, d);
    let mut xhat = Mat::zeros(n, d);
    let mut inv_std = vec![0.0; n];
    for r in 0..n {
        let row = input.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = s;
        let xh = xhat.row_mut(r);
        for j in 0..d {
            xh[j] = (row[j] - mean) * s;
        }
        let o = out.row_mut(r);
        let xh = xhat.row(r);
        for j in 0..d {
            o[j] = params.gain[j] * xh[j] + params.bias[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

/// Runs the stack over prepared input rows, returning logits for every row
/// and, when requested, the activations needed for backprop.
pub(crate) fn run(
    core: &CoreModel,
    overlay: Option<&TuningOverlay>,
    rows: Mat,
    n_prompt: usize,
    want_cache: bool,
) -> RunCache {
    let config = &core.config;
    let (n_head, dh) = (config.n_head, config.d_head());
    let causal = config.objective == Objective::Causal;
    let scale = 1.0 / (dh as f64).sqrt();
    let n_rows = rows.rows;

    let (prefix, adapter) = match overlay.map(|o| &o.kind) {
        Some(OverlayKind::Prefix(p)) => (Some(p), None),
        Some(OverlayKind::Adapter(a)) => (None, Some(a)),
        _ => (None, None),
    };
    let l_pre = prefix.map_or(0, |p| p.l);

    let mut layers: Vec<LayerCache> = Vec::with_capacity(config.n_layer);
    let mut h = rows;
    for (li, layer) in core.layers.iter().enumerate() {
        let input = h;
        let mut q_heads = Vec::with_capacity(n_head);
        let mut k_heads = Vec::with_capacity(n_head);
        let mut v_heads = Vec::with_capacity(n_head);
        let mut attn_heads = Vec::with_capacity(n_head);
        let mut concat = Mat::zeros(n_rows, config.d);
        for hd in 0..n_head {
            let q = input.mul(&layer.w_q[hd]);
            let k = input.mul(&layer.w_k[hd]);
            let v = input.mul(&layer.w_v[hd]);
            let mut scores = Mat::zeros(n_rows, l_pre + n_rows);
            for t in 0..n_rows {
                let qt = q.row(t);
                if let Some(p) = prefix {
                    let pk = &p.keys[li][hd];
                    for j in 0..l_pre {
                        *scores.at_mut(t, j) = dot(qt, pk.row(j)) * scale;
                    }
                }
                for j in 0..n_rows {
                    let col = l_pre + j;
                    *scores.at_mut(t, col) = if causal && j > t {
                        f64::NEG_INFINITY
                    } else {
                        dot(qt, k.row(j)) * scale
                    };
                }
                softmax_in_place(scores.row_mut(t));
            }
            // context = attention-weighted prefix values then token values
            let mut ctx = Mat::zeros(n_rows, dh);
            for t in 0..n_rows {
                let at = scores.row(t);
                let ct = ctx.row_mut(t);
                if let Some(p) = prefix {
                    let pv = &p.values[li][hd];
                    for j in 0..l_pre {
                        let w = at[j];
                        if w != 0.0 {
                            let vr = pv.row(j);
                            for c in 0..dh {
                                ct[c] += w * vr[c];
                            }
                        }
                    }
                }
                for j in 0..n_rows {
                    let w = at[l_pre + j];
                    if w != 0.0 {
                        let vr = v.row(j);
                        for c in 0..dh {
                            ct[c] += w * vr[c];
                        }
                    }
                }
            }
            for t in 0..n_rows {
                let src = ctx.row(t);
                let dst = concat.row_mut(t);
                dst[hd * dh..(hd + 1) * dh].copy_from_slice(src);
            }
            q_heads.push(q);
            k_heads.push(k);
            v_heads.push(v);
            attn_heads.push(scores);
        }
        let h2 = concat.mul(&layer.w_o);
        let mut sum_attn = input.clone();
        sum_attn.add_assign(&h2);
        let (h3, ln_attn_cache) = layer_norm(&sum_attn, &layer.ln_attn);

        let mut z1 = h3.mul(&layer.w_1);
        for t in 0..n_rows {
            let row = z1.row_mut(t);
            for (v, b) in row.iter_mut().zip(&layer.b_1) {
                *v += b;
            }
        }
        let mut relu1 = z1.clone();
        relu1.data.iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v = 0.0;
            }
        });
        let mut h4 = relu1.mul(&layer.w_2);
        for t in 0..n_rows {
            let row = h4.row_mut(t);
            for (v, b) in row.iter_mut().zip(&layer.b_2) {
                *v += b;
            }
        }

        // adapter hook: H4 <- H4 + relu(H4 Wdown + bdown) Wup + bup
        let (adapter_cache, h4_final) = match adapter {
            Some(a) => {
                let mut zd = h4.mul(&a.down[li]);
                for t in 0..n_rows {
                    let row = zd.row_mut(t);
                    for (v, b) in row.iter_mut().zip(&a.down_bias[li]) {
                        *v += b;
                    }
                }
                let mut rd = zd.clone();
                rd.data.iter_mut().for_each(|v| {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                });
                let mut adapted = h4.clone();
                adapted.add_prod(&rd, &a.up[li]);
                for t in 0..n_rows {
                    let row = adapted.row_mut(t);
                    for (v, b) in row.iter_mut().zip(&a.up_bias[li]) {
                        *v += b;
                    }
                }
                (Some((zd, rd)), adapted)
            }
            None => (None, h4.clone()),
        };

        let mut sum_ffn = h3.clone();
        sum_ffn.add_assign(&h4_final);
        let (h5, ln_ffn_cache) = layer_norm(&sum_ffn, &layer.ln_ffn);

        if want_cache {
            layers.push(LayerCache {
                input,
                q: q_heads,
                k: k_heads,
                v: v_heads,
                attn: attn_heads,
                concat,
                sum_attn,
                ln_attn: ln_attn_cache,
                h3,
                z1,
                relu1,
                h4,
                adapter: adapter_cache,
                sum_ffn,
                ln_ffn: ln_ffn_cache,
            });
        }
        h = h5;
    }
    let logits = h.mul(&core.output_projection);
    RunCache {
        n_prompt,
        layers,
        h_final: h,
        logits,
    }
}

/// Logits at real token positions (length x vocab).
pub fn forward(
    core: &CoreModel,
    overlay: Option<&TuningOverlay>,
    tokens: &[usize],
) -> Result<Mat> {
    let n_prompt = overlay.map_or(0, |o| o.prompt_len());
    let rows = input_rows(core, overlay, tokens)?;
    let cache = run(core, overlay, rows, n_prompt, false);
    Ok(cache.real_logits())
}

/// Full activations for backprop; logits kept for every row.
pub fn forward_with_cache(
    core: &CoreModel,
    overlay: Option<&TuningOverlay>,
    tokens: &[usize],
) -> Result<RunCache> {
    let n_prompt = overlay.map_or(0, |o| o.prompt_len());
    let rows = input_rows(core, overlay, tokens)?;
    Ok(run(core, overlay, rows, n_prompt, true))
}

/// Base-model forward over caller-built embedding rows (no positional
/// embeddings are added, no overlay applies). Returns logits for every row.
pub fn forward_embeddings(core: &CoreModel, rows: &Mat) -> Result<Mat> {
    if rows.rows == 0 {
        return Err(Error::invalid("model::forward: empty input"));
    }
    if rows.cols != core.config.d {
        return Err(Error::invalid(format!(
            "model::forward: embedding width {} does not match d = {}",
            rows.cols, core.config.d
        )));
    }
    if rows.rows > core.config.t_max {
        return Err(Error::invalid(format!(
            "model::forward: {} rows exceed t_max {}",
            rows.rows, core.config.t_max
        )));
    }
    Ok(run(core, None, rows.clone(), 0, false).logits)
}
