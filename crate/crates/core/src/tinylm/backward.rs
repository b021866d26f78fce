use super::forward::{gelu_grad, LayerNormCache};
use super::{ForwardTrace, LayerParams, LmGradSpace, Model, Params};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};

/// Output of one backward pass over a single sequence.
#[derive(Debug, Clone)]
pub struct BackwardResult {
    /// Mean cross-entropy over loss positions.
    pub loss: f64,
    /// d loss / d e[t] for every position, `T x d`.
    pub g_emb: Vec<Vec<f64>>,
    /// LM-head gradient rows; `Some` only at loss positions.
    pub g_lm: Vec<Option<Vec<f64>>>,
    /// Loss weight per position (uniform `1/n` over loss positions, else 0).
    pub weights: Vec<f64>,
    /// Position `t` predicts `targets[t]` (the next token); last entry unused.
    pub targets: Vec<usize>,
    pub param_grads: Params,
}

impl BackwardResult {
    pub fn loss_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.g_lm.iter().enumerate().filter(|(_, g)| g.is_some()).map(|(t, _)| t)
    }
}

/// Accumulating backward of `y = x @ w (+ b)`.
#[allow(clippy::too_many_arguments)]
fn matmul_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    rows: usize,
    inner: usize,
    cols: usize,
    dx: &mut [f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    for r in 0..rows {
        let dyr = &dy[r * cols..(r + 1) * cols];
        for k in 0..inner {
            let xk = x[r * inner + k];
            let wk = &w[k * cols..(k + 1) * cols];
            let dwk = &mut dw[k * cols..(k + 1) * cols];
            let mut acc = 0.0;
            for c in 0..cols {
                dwk[c] += xk * dyr[c];
                acc += dyr[c] * wk[c];
            }
            dx[r * inner + k] += acc;
        }
    }
    if let Some(db) = db {
        for r in 0..rows {
            for (b, g) in db.iter_mut().zip(&dy[r * cols..(r + 1) * cols]) {
                *b += g;
            }
        }
    }
}

fn layer_norm_backward(
    dy: &[f64],
    cache: &LayerNormCache,
    g: &[f64],
    rows: usize,
    d: usize,
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let is = cache.inv_std[r];
        for j in 0..d {
            dx[r * d + j] = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn layer_backward(
    lp: &LayerParams,
    cache: &super::forward::LayerCache,
    dx_out: &[f64],
    grads: &mut LayerParams,
    t_len: usize,
    d: usize,
    d_ff: usize,
    n_heads: usize,
) -> Vec<f64> {
    // x_out = x_mid + ff(LN2(x_mid))
    let mut d_act = vec![0.0; t_len * d_ff];
    matmul_backward(&cache.ff_act, &lp.w2, dx_out, t_len, d_ff, d, &mut d_act, &mut grads.w2, Some(&mut grads.b2));
    let d_pre: Vec<f64> = d_act.iter().zip(&cache.ff_pre).map(|(g, &u)| g * gelu_grad(u)).collect();
    let mut d_b = vec![0.0; t_len * d];
    matmul_backward(&cache.b, &lp.w1, &d_pre, t_len, d, d_ff, &mut d_b, &mut grads.w1, Some(&mut grads.b1));
    let d_ln2 = layer_norm_backward(&d_b, &cache.ln2, &lp.ln2_g, t_len, d, &mut grads.ln2_g, &mut grads.ln2_b);
    let dx_mid: Vec<f64> = dx_out.iter().zip(&d_ln2).map(|(a, b)| a + b).collect();

    // x_mid = x_in + attn(LN1(x_in)) @ wo + bo
    let mut d_ctx = vec![0.0; t_len * d];
    matmul_backward(&cache.ctx, &lp.wo, &dx_mid, t_len, d, d, &mut d_ctx, &mut grads.wo, Some(&mut grads.bo));
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; t_len * d];
    let mut dk = vec![0.0; t_len * d];
    let mut dv = vec![0.0; t_len * d];
    let mut dp = vec![0.0; t_len];
    for h in 0..n_heads {
        let off = h * hd;
        for i in 0..t_len {
            let p = &cache.attn[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
            let dci = &d_ctx[i * d + off..i * d + off + hd];
            let mut dot = 0.0;
            for j in 0..=i {
                let vj = &cache.v[j * d + off..j * d + off + hd];
                dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += p[j] * dp[j];
                for c in 0..hd {
                    dv[j * d + off + c] += p[j] * dci[c];
                }
            }
            for j in 0..=i {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..hd {
                    dq[i * d + off + c] += ds * cache.k[j * d + off + c];
                    dk[j * d + off + c] += ds * cache.q[i * d + off + c];
                }
            }
        }
    }
    let mut d_a = vec![0.0; t_len * d];
    matmul_backward(&cache.a, &lp.wq, &dq, t_len, d, d, &mut d_a, &mut grads.wq, Some(&mut grads.bq));
    matmul_backward(&cache.a, &lp.wk, &dk, t_len, d, d, &mut d_a, &mut grads.wk, Some(&mut grads.bk));
    matmul_backward(&cache.a, &lp.wv, &dv, t_len, d, d, &mut d_a, &mut grads.wv, Some(&mut grads.bv));
    let d_ln1 = layer_norm_backward(&d_a, &cache.ln1, &lp.ln1_g, t_len, d, &mut grads.ln1_g, &mut grads.ln1_b);
    dx_mid.iter().zip(&d_ln1).map(|(a, b)| a + b).collect()
}

/// Mean response cross-entropy and its exact gradients with respect to every
/// parameter, every input embedding and the LM-head output.
pub fn loss_and_grads(model: &Model, seq: &TokenSequence, trace: &ForwardTrace) -> Result<BackwardResult> {
    let cfg = &model.config;
    let p = &model.params;
    let (t_len, d, v) = (trace.seq_len, cfg.d_model, cfg.vocab_size);
    if seq.tokens != trace.tokens {
        return Err(Error::Invalid("trace was produced from a different sequence".into()));
    }
    let mask = seq.loss_mask(cfg.loss_on_eos);
    let n_loss = mask.iter().filter(|m| **m).count();
    if n_loss == 0 {
        return Err(Error::EmptyResponse);
    }
    let w = 1.0 / n_loss as f64;
    let mut targets: Vec<usize> = seq.tokens[1..].to_vec();
    targets.push(seq.tokens[t_len - 1]);

    let mut loss = 0.0;
    let mut dlogits = vec![0.0; t_len * v];
    let mut g_lm = vec![None; t_len];
    let mut weights = vec![0.0; t_len];
    for t in 0..t_len {
        if !mask[t] {
            continue;
        }
        let target = targets[t];
        let probs = trace.probs_row(t);
        loss -= w * probs[target].ln();
        weights[t] = w;
        let row = &mut dlogits[t * v..(t + 1) * v];
        for (i, (g, &pr)) in row.iter_mut().zip(probs).enumerate() {
            *g = w * (pr - if i == target { 1.0 } else { 0.0 });
        }
        g_lm[t] = Some(match cfg.lm_grad_space {
            LmGradSpace::Logits => row.to_vec(),
            LmGradSpace::Probs => {
                let mut g = vec![0.0; v];
                g[target] = -w / probs[target];
                g
            }
        });
    }

    let mut grads = Params::zeros(cfg);
    let mut d_hidden = vec![0.0; t_len * d];
    if cfg.tie_lm_head {
        for t in 0..t_len {
            let dl = &dlogits[t * v..(t + 1) * v];
            let h = trace.hidden_row(t);
            for (tok, &g) in dl.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let e = &p.tok_emb[tok * d..(tok + 1) * d];
                for j in 0..d {
                    d_hidden[t * d + j] += g * e[j];
                    grads.tok_emb[tok * d + j] += g * h[j];
                }
            }
        }
    } else {
        matmul_backward(&trace.hidden, &p.lm_head, &dlogits, t_len, d, v, &mut d_hidden, &mut grads.lm_head, None);
    }
    let mut dx = layer_norm_backward(&d_hidden, &trace.lnf, &p.lnf_g, t_len, d, &mut grads.lnf_g, &mut grads.lnf_b);
    for (l, (lp, cache)) in p.layers.iter().zip(&trace.layers).enumerate().rev() {
        dx = layer_backward(lp, cache, &dx, &mut grads.layers[l], t_len, d, cfg.d_ff, cfg.n_heads);
    }
    let mut g_emb = Vec::with_capacity(t_len);
    for (t, &tok) in seq.tokens.iter().enumerate() {
        let row = &dx[t * d..(t + 1) * d];
        for j in 0..d {
            grads.tok_emb[tok * d + j] += row[j];
            grads.pos_emb[t * d + j] += row[j];
        }
        g_emb.push(row.to_vec());
    }
    Ok(BackwardResult {
        loss,
        g_emb,
        g_lm,
        weights,
        targets,
        param_grads: grads,
    })
}
