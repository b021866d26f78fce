use super::{LayerParams, Model};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `x (rows x inner) @ w (inner x cols)` plus an optional bias row.
pub(crate) fn matmul(x: &[f64], w: &[f64], bias: Option<&[f64]>, rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * cols];
    for r in 0..rows {
        let yr = &mut y[r * cols..(r + 1) * cols];
        if let Some(b) = bias {
            yr.copy_from_slice(b);
        }
        for k in 0..inner {
            let a = x[r * inner + k];
            if a == 0.0 {
                continue;
            }
            let wk = &w[k * cols..(k + 1) * cols];
            for (y, w) in yr.iter_mut().zip(wk) {
                *y += a * w;
            }
        }
    }
    y
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], g: &[f64], b: &[f64], rows: usize, d: usize) -> (Vec<f64>, LayerNormCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (xr[j] - mean) * is;
            xhat[r * d + j] = h;
            y[r * d + j] = g[j] * h + b[j];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Cached activations of one transformer block.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub ln1: LayerNormCache,
    pub a: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Attention weights, `[head][query][key]` with `T x T` per head.
    pub attn: Vec<f64>,
    pub ctx: Vec<f64>,
    pub ln2: LayerNormCache,
    pub b: Vec<f64>,
    pub ff_pre: Vec<f64>,
    pub ff_act: Vec<f64>,
}

/// Everything the backward pass needs, plus the model outputs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    /// Input embeddings `e = tok_emb[x_t]` (before positions are added), `T x d`.
    pub embeddings: Vec<f64>,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) lnf: LayerNormCache,
    /// Final hidden states after the last layer norm, `T x d`.
    pub hidden: Vec<f64>,
    /// `T x V`.
    pub logits: Vec<f64>,
    /// Row-wise softmax of `logits`, `T x V`.
    pub probs: Vec<f64>,
    pub seq_len: usize,
    pub d_model: usize,
    pub vocab_size: usize,
}

impl ForwardTrace {
    pub fn logits_row(&self, t: usize) -> &[f64] {
        &self.logits[t * self.vocab_size..(t + 1) * self.vocab_size]
    }

    pub fn probs_row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.vocab_size..(t + 1) * self.vocab_size]
    }

    pub fn hidden_row(&self, t: usize) -> &[f64] {
        &self.hidden[t * self.d_model..(t + 1) * self.d_model]
    }
}

fn check_tokens(model: &Model, tokens: &[usize]) -> Result<()> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(Error::Invalid("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Invalid(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: bad,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Looks up the token embeddings `e` for a token list (`T x d`).
pub fn embed(model: &Model, tokens: &[usize]) -> Result<Vec<f64>> {
    check_tokens(model, tokens)?;
    let d = model.config.d_model;
    let mut e = Vec::with_capacity(tokens.len() * d);
    for &tok in tokens {
        e.extend_from_slice(&model.params.tok_emb[tok * d..(tok + 1) * d]);
    }
    Ok(e)
}

pub fn forward(model: &Model, seq: &TokenSequence) -> Result<ForwardTrace> {
    forward_tokens(model, &seq.tokens)
}

pub fn forward_tokens(model: &Model, tokens: &[usize]) -> Result<ForwardTrace> {
    let e = embed(model, tokens)?;
    forward_from_embeddings(model, tokens, e)
}

fn layer_forward(lp: &LayerParams, x: &[f64], t_len: usize, d: usize, d_ff: usize, n_heads: usize) -> (LayerCache, Vec<f64>) {
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (a, ln1) = layer_norm(x, &lp.ln1_g, &lp.ln1_b, t_len, d);
    let q = matmul(&a, &lp.wq, Some(&lp.bq), t_len, d, d);
    let k = matmul(&a, &lp.wk, Some(&lp.bk), t_len, d, d);
    let v = matmul(&a, &lp.wv, Some(&lp.bv), t_len, d, d);
    let mut attn = vec![0.0; n_heads * t_len * t_len];
    let mut ctx = vec![0.0; t_len * d];
    for h in 0..n_heads {
        let off = h * hd;
        for i in 0..t_len {
            let row = &mut attn[(h * t_len + i) * t_len..(h * t_len + i + 1) * t_len];
            for j in 0..=i {
                let mut s = 0.0;
                for c in 0..hd {
                    s += q[i * d + off + c] * k[j * d + off + c];
                }
                row[j] = s * scale;
            }
            softmax_in_place(&mut row[..=i]);
            for j in 0..=i {
                let p = row[j];
                for c in 0..hd {
                    ctx[i * d + off + c] += p * v[j * d + off + c];
                }
            }
        }
    }
    let attn_out = matmul(&ctx, &lp.wo, Some(&lp.bo), t_len, d, d);
    let x_mid: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
    let (b, ln2) = layer_norm(&x_mid, &lp.ln2_g, &lp.ln2_b, t_len, d);
    let ff_pre = matmul(&b, &lp.w1, Some(&lp.b1), t_len, d, d_ff);
    let ff_act: Vec<f64> = ff_pre.iter().map(|&u| gelu(u)).collect();
    let ff_out = matmul(&ff_act, &lp.w2, Some(&lp.b2), t_len, d_ff, d);
    let x_out: Vec<f64> = x_mid.iter().zip(&ff_out).map(|(a, b)| a + b).collect();
    let cache = LayerCache {
        ln1,
        a,
        q,
        k,
        v,
        attn,
        ctx,
        ln2,
        b,
        ff_pre,
        ff_act,
    };
    (cache, x_out)
}

/// Runs the network on caller-supplied input embeddings (`T x d`). Positional
/// embeddings are added here; `tokens` is only recorded in the trace.
pub fn forward_from_embeddings(model: &Model, tokens: &[usize], embeddings: Vec<f64>) -> Result<ForwardTrace> {
    check_tokens(model, tokens)?;
    let cfg = &model.config;
    let p = &model.params;
    let (t_len, d, v) = (tokens.len(), cfg.d_model, cfg.vocab_size);
    if embeddings.len() != t_len * d {
        return Err(Error::Invalid("embedding matrix has the wrong shape".into()));
    }
    let mut x: Vec<f64> = embeddings
        .iter()
        .zip(&p.pos_emb[..t_len * d])
        .map(|(e, pe)| e + pe)
        .collect();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &p.layers {
        let (cache, x_out) = layer_forward(lp, &x, t_len, d, cfg.d_ff, cfg.n_heads);
        layers.push(cache);
        x = x_out;
    }
    let (hidden, lnf) = layer_norm(&x, &p.lnf_g, &p.lnf_b, t_len, d);
    let logits = if cfg.tie_lm_head {
        let mut out = vec![0.0; t_len * v];
        for t in 0..t_len {
            let h = &hidden[t * d..(t + 1) * d];
            for tok in 0..v {
                let e = &p.tok_emb[tok * d..(tok + 1) * d];
                out[t * v + tok] = h.iter().zip(e).map(|(a, b)| a * b).sum();
            }
        }
        out
    } else {
        matmul(&hidden, &p.lm_head, None, t_len, d, v)
    };
    let mut probs = logits.clone();
    for row in probs.chunks_mut(v) {
        softmax_in_place(row);
    }
    Ok(ForwardTrace {
        tokens: tokens.to_vec(),
        embeddings,
        layers,
        lnf,
        hidden,
        logits,
        probs,
        seq_len: t_len,
        d_model: d,
        vocab_size: v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{init_model, ModelConfig};

    fn model() -> Model {
        let mut cfg = ModelConfig::new(12, 8, 2, 2);
        cfg.max_seq_len = 10;
        let mut m = init_model(&cfg).unwrap();
        // Larger weights make the causality check meaningful.
        for t in m.params.tensors_mut() {
            for (i, x) in t.iter_mut().enumerate() {
                *x += 0.3 * ((i * 37 % 11) as f64 / 11.0 - 0.5);
            }
        }
        m
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let m = model();
        let tr = forward_tokens(&m, &[2, 5, 6, 4, 7, 3]).unwrap();
        for t in 0..tr.seq_len {
            let s: f64 = tr.probs_row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn earlier_logits_ignore_later_tokens() {
        let m = model();
        let a = forward_tokens(&m, &[2, 5, 6, 4]).unwrap();
        let b = forward_tokens(&m, &[2, 5, 6, 4, 9, 11]).unwrap();
        let c = forward_tokens(&m, &[2, 5, 6, 4, 1, 0]).unwrap();
        for t in 0..4 {
            assert_eq!(a.logits_row(t), b.logits_row(t));
            assert_eq!(b.logits_row(t), c.logits_row(t));
        }
        assert_ne!(b.logits_row(5), c.logits_row(5));
    }

    #[test]
    fn zero_head_gives_uniform_distribution() {
        let mut m = model();
        m.params.lm_head.iter_mut().for_each(|x| *x = 0.0);
        let tr = forward_tokens(&m, &[2, 5, 6]).unwrap();
        for p in &tr.probs {
            assert!((p - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_token_rejected() {
        let m = model();
        assert!(matches!(
            forward_tokens(&m, &[2, 12]),
            Err(Error::TokenOutOfRange { token: 12, vocab: 12 })
        ));
        assert!(forward_tokens(&m, &[2; 11]).is_err());
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
