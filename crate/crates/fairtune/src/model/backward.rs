//! Exact reverse-mode gradients through the whole stack. Gradients are
//! always accumulated for both the core and the overlay; the caller selects
//! the tunable subset. Accumulation is serial per batch: one writer, one
//! pass per example.

use super::forward::{forward_with_cache, LayerCache, LnCache};
use super::scoring::{example_predictions, MaskPlan};
use super::{CoreModel, LayerNormParams};
use crate::error::{Error, Result};
use crate::peft::{OverlayKind, TuningOverlay};
use crate::tensor::{dot, log_sum_exp, Mat};

pub struct Gradients {
    pub loss: f64,
    /// Same shapes as the core, holding dLoss/dtheta0.
    pub core: Box<CoreModel>,
    /// Same shapes as the overlay, holding dLoss/dphi (empty for Full).
    pub overlay: TuningOverlay,
}

impl Gradients {
    /// Gradient vectors for the tunable parameters, in the same order as
    /// `peft::tunable_tensors_mut` walks them.
    pub fn tunable(&self) -> Vec<&Vec<f64>> {
        if self.overlay.is_full() {
            self.core.tensors()
        } else {
            self.overlay.tensors()
        }
    }
}

fn column_sums_into(acc: &mut [f64], m: &Mat) {
    for r in 0..m.rows {
        for (a, v) in acc.iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
}

fn relu_mask(dz: &mut Mat, z: &Mat) {
    for (d, z) in dz.data.iter_mut().zip(&z.data) {
        if *z <= 0.0 {
            *d = 0.0;
        }
    }
}

fn ln_backward(
    cache: &LnCache,
    params: &LayerNormParams,
    grads: &mut LayerNormParams,
    dy: &Mat,
) -> Mat {
    let (n, d) = (dy.rows, dy.cols);
    let mut dx = Mat::zeros(n, d);
    for r in 0..n {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let s = cache.inv_std[r];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let dxh = dyr[j] * params.gain[j];
            m1 += dxh;
            m2 += dxh * xh[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let dxr = dx.row_mut(r);
        for j in 0..d {
            let dxh = dyr[j] * params.gain[j];
            dxr[j] = s * (dxh - m1 - xh[j] * m2);
            grads.gain[j] += dyr[j] * xh[j];
            grads.bias[j] += dyr[j];
        }
    }
    dx
}

/// Loss and exact gradients of the mean-NLL objective over the batch.
pub fn backward(
    core: &CoreModel,
    overlay: &TuningOverlay,
    batch: &[Vec<usize>],
    plan: Option<&MaskPlan>,
) -> Result<Gradients> {
    let objective = core.config.objective;
    let mut prepared = Vec::with_capacity(batch.len());
    let mut total_count = 0usize;
    for (i, example) in batch.iter().enumerate() {
        let positions = plan.map(|p| {
            p.get(i).map(|v| v.as_slice()).unwrap_or(&[])
        });
        let (input, preds) = example_predictions(objective, example, positions)?;
        total_count += preds.len();
        prepared.push((input, preds));
    }
    if total_count == 0 {
        return Err(Error::invalid(
            "model::grad: batch contains zero predicted tokens",
        ));
    }
    let inv_total = 1.0 / total_count as f64;

    let mut gcore = Box::new(core.zeros_like());
    let mut goverlay = overlay.zeros_like();
    let mut loss_total = 0.0;

    for (input, preds) in &prepared {
        let cache = forward_with_cache(core, Some(overlay), input)?;
        let n_rows = cache.logits.rows;
        let vocab = cache.logits.cols;
        let mut dlogits = Mat::zeros(n_rows, vocab);
        for pred in preds {
            let global = cache.n_prompt + pred.row;
            let row = cache.logits.row(global);
            let lse = log_sum_exp(row);
            loss_total += lse - row[pred.target];
            let drow = dlogits.row_mut(global);
            for j in 0..vocab {
                drow[j] = (row[j] - lse).exp() * inv_total;
            }
            drow[pred.target] -= inv_total;
        }
        backprop_example(core, overlay, &cache, input, &dlogits, &mut gcore, &mut goverlay);
    }

    Ok(Gradients {
        loss: loss_total * inv_total,
        core: gcore,
        overlay: goverlay,
    })
}

fn backprop_example(
    core: &CoreModel,
    overlay: &TuningOverlay,
    cache: &super::forward::RunCache,
    input_tokens: &[usize],
    dlogits: &Mat,
    gcore: &mut CoreModel,
    goverlay: &mut TuningOverlay,
) {
    let config = &core.config;
    let (n_head, dh) = (config.n_head, config.d_head());
    let scale = 1.0 / (dh as f64).sqrt();
    let n_rows = dlogits.rows;

    gcore.output_projection.add_prod_ta(&cache.h_final, dlogits);
    let mut dh_up = dlogits.mul_transpose(&core.output_projection);

    for li in (0..core.layers.len()).rev() {
        let layer = &core.layers[li];
        let lc: &LayerCache = &cache.layers[li];
        let glayer = &mut gcore.layers[li];

        let dsum_ffn = ln_backward(&lc.ln_ffn, &layer.ln_ffn, &mut glayer.ln_ffn, &dh_up);
        let mut dh3 = dsum_ffn.clone();
        let mut dh4 = dsum_ffn;

        // adapter: h4' = h4 + relu(h4 Wdown + bdown) Wup + bup
        if let (Some((zd, rd)), OverlayKind::Adapter(a), OverlayKind::Adapter(ga)) =
            (&lc.adapter, &overlay.kind, &mut goverlay.kind)
        {
            column_sums_into(&mut ga.up_bias[li], &dh4);
            ga.up[li].add_prod_ta(rd, &dh4);
            let mut dzd = dh4.mul_transpose(&a.up[li]);
            relu_mask(&mut dzd, zd);
            column_sums_into(&mut ga.down_bias[li], &dzd);
            ga.down[li].add_prod_ta(&lc.h4, &dzd);
            dh4.add_prod_tb(&dzd, &a.down[li]);
        }

        // ffn: h4 = relu(h3 W1 + b1) W2 + b2
        column_sums_into(&mut glayer.b_2, &dh4);
        glayer.w_2.add_prod_ta(&lc.relu1, &dh4);
        let mut dz1 = dh4.mul_transpose(&layer.w_2);
        relu_mask(&mut dz1, &lc.z1);
        column_sums_into(&mut glayer.b_1, &dz1);
        glayer.w_1.add_prod_ta(&lc.h3, &dz1);
        dh3.add_prod_tb(&dz1, &layer.w_1);

        let dsum_attn = ln_backward(&lc.ln_attn, &layer.ln_attn, &mut glayer.ln_attn, &dh3);
        let mut dinput = dsum_attn.clone();
        let dh2 = dsum_attn;

        glayer.w_o.add_prod_ta(&lc.concat, &dh2);
        let dconcat = dh2.mul_transpose(&layer.w_o);

        let (prefix, mut gprefix) = match (&overlay.kind, &mut goverlay.kind) {
            (OverlayKind::Prefix(p), OverlayKind::Prefix(gp)) => (Some(p), Some(gp)),
            _ => (None, None),
        };
        let l_pre = prefix.map_or(0, |p| p.l);

        for hd in 0..n_head {
            let attn = &lc.attn[hd];
            let mut dctx = Mat::zeros(n_rows, dh);
            for t in 0..n_rows {
                let src = dconcat.row(t);
                dctx.row_mut(t)
                    .copy_from_slice(&src[hd * dh..(hd + 1) * dh]);
            }

            // dattn = dctx . V_ext^T over prefix then token values
            let mut dattn = Mat::zeros(n_rows, l_pre + n_rows);
            if let Some(p) = prefix {
                let pv = &p.values[li][hd];
                for t in 0..n_rows {
                    let dct = dctx.row(t);
                    for j in 0..l_pre {
                        *dattn.at_mut(t, j) = dot(dct, pv.row(j));
                    }
                }
            }
            for t in 0..n_rows {
                let dct = dctx.row(t);
                for j in 0..n_rows {
                    *dattn.at_mut(t, l_pre + j) = dot(dct, lc.v[hd].row(j));
                }
            }

            // softmax backward, fused with score scaling
            let mut dscore = Mat::zeros(n_rows, l_pre + n_rows);
            for t in 0..n_rows {
                let at = attn.row(t);
                let dat = dattn.row(t);
                let inner = dot(at, dat);
                let dst = dscore.row_mut(t);
                for j in 0..at.len() {
                    dst[j] = at[j] * (dat[j] - inner) * scale;
                }
            }

            let mut dq = Mat::zeros(n_rows, dh);
            let mut dk = Mat::zeros(n_rows, dh);
            let mut dv = Mat::zeros(n_rows, dh);
            if let (Some(p), Some(gp)) = (prefix, gprefix.as_deref_mut()) {
                let pk = &p.keys[li][hd];
                let gpk = &mut gp.keys[li][hd];
                let gpv = &mut gp.values[li][hd];
                for t in 0..n_rows {
                    let qt = lc.q[hd].row(t);
                    let dqt = dq.row_mut(t);
                    for j in 0..l_pre {
                        let ds = dscore.at(t, j);
                        if ds != 0.0 {
                            let pkr = pk.row(j);
                            let gpkr = gpk.row_mut(j);
                            for c in 0..dh {
                                dqt[c] += ds * pkr[c];
                                gpkr[c] += ds * qt[c];
                            }
                        }
                        let a = attn.at(t, j);
                        if a != 0.0 {
                            let dct = dctx.row(t);
                            let gpvr = gpv.row_mut(j);
                            for c in 0..dh {
                                gpvr[c] += a * dct[c];
                            }
                        }
                    }
                }
            }
            for t in 0..n_rows {
                let qt = lc.q[hd].row(t);
                let dqt = dq.row_mut(t);
                for j in 0..n_rows {
                    let ds = dscore.at(t, l_pre + j);
                    if ds != 0.0 {
                        let kr = lc.k[hd].row(j);
                        for c in 0..dh {
                            dqt[c] += ds * kr[c];
                        }
                        let dkr = dk.row_mut(j);
                        for c in 0..dh {
                            dkr[c] += ds * qt[c];
                        }
                    }
                    let a = attn.at(t, l_pre + j);
                    if a != 0.0 {
                        let dct = dctx.row(t);
                        let dvr = dv.row_mut(j);
                        for c in 0..dh {
                            dvr[c] += a * dct[c];
                        }
                    }
                }
            }

            glayer.w_q[hd].add_prod_ta(&lc.input, &dq);
            glayer.w_k[hd].add_prod_ta(&lc.input, &dk);
            glayer.w_v[hd].add_prod_ta(&lc.input, &dv);
            dinput.add_prod_tb(&dq, &layer.w_q[hd]);
            dinput.add_prod_tb(&dk, &layer.w_k[hd]);
            dinput.add_prod_tb(&dv, &layer.w_v[hd]);
        }

        dh_up = dinput;
    }

    // embeddings: prompt rows feed the prompt gradient, token rows feed the
    // token and position tables
    let n_prompt = cache.n_prompt;
    if let OverlayKind::Prompt(gp) = &mut goverlay.kind {
        for r in 0..n_prompt {
            let src = dh_up.row(r);
            for (g, v) in gp.p.row_mut(r).iter_mut().zip(src) {
                *g += v;
            }
        }
    }
    for (i, &tok) in input_tokens.iter().enumerate() {
        let slot = n_prompt + i;
        let src = dh_up.row(slot);
        for (g, v) in gcore.token_embedding.row_mut(tok).iter_mut().zip(src) {
            *g += v;
        }
        for (g, v) in gcore.position_embedding.row_mut(slot).iter_mut().zip(src) {
            *g += v;
        }
    }
}
