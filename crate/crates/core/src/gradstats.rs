//! Collapses per-token gradient bundles into per-instance scalars and
//! persists them as JSONL gradient records.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Role, TokenSequence};
use crate::error::{Error, Result};
use crate::tinylm::GradientBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRecord {
    pub instance_id: String,
    /// Mean per-token embedding-gradient magnitude over non-special tokens.
    pub g_emb: f64,
    /// Mean per-token LM-head gradient magnitude over response targets.
    pub g_lm: f64,
    /// `g_emb + g_lm`.
    pub g_grads: f64,
    pub n_emb_tokens: usize,
    pub n_lm_tokens: usize,
    pub model_fingerprint: String,
    pub step_index: i64,
}

impl GradientRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Error::Record {
            id: self.instance_id.clone(),
            msg: msg.to_string(),
        };
        if !(self.g_emb >= 0.0 && self.g_lm >= 0.0) || !self.g_emb.is_finite() || !self.g_lm.is_finite() {
            return Err(bad("gradient magnitudes must be finite and nonnegative"));
        }
        if self.g_grads != self.g_emb + self.g_lm {
            return Err(bad("g_grads != g_emb + g_lm"));
        }
        if self.n_lm_tokens < 1 || self.n_emb_tokens < self.n_lm_tokens {
            return Err(bad("token counts violate n_emb_tokens >= n_lm_tokens >= 1"));
        }
        Ok(())
    }
}

/// Order of the norm and the token average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenReduction {
    /// Mean over tokens of each token's L2 norm.
    #[default]
    MeanOfNorms,
    /// L2 norm of the mean token gradient vector.
    NormOfMean,
}

/// Linear combination of the two layer magnitudes.
pub fn combine(g_emb: f64, g_lm: f64) -> Result<f64> {
    if !(g_emb >= 0.0) || !(g_lm >= 0.0) {
        return Err(Error::Invalid(format!(
            "gradient magnitudes must be nonnegative, got ({g_emb}, {g_lm})"
        )));
    }
    Ok(g_emb + g_lm)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn reduce(vectors: &[Vec<f64>], reduction: TokenReduction) -> f64 {
    let n = vectors.len() as f64;
    match reduction {
        TokenReduction::MeanOfNorms => vectors.iter().map(|v| l2(v)).sum::<f64>() / n,
        TokenReduction::NormOfMean => l2(&mean_vector(vectors)),
    }
}

fn mean_vector(vectors: &[Vec<f64>]) -> Vec<f64> {
    let dim = vectors.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let n = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Embedding-gradient vectors of the non-special tokens and unweighted
/// LM-head gradient vectors of the positions predicting a response token.
fn token_gradients(bundle: &GradientBundle, seq: &TokenSequence) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if bundle.g_emb.len() != seq.len() || bundle.g_lm.len() != seq.len() || bundle.weights.len() != seq.len() {
        return Err(Error::Instance {
            id: seq.instance_id.clone(),
            msg: "gradient bundle does not align with the token sequence".into(),
        });
    }
    let emb: Vec<Vec<f64>> = seq
        .roles
        .iter()
        .zip(&bundle.g_emb)
        .filter(|(r, _)| **r != Role::Special)
        .map(|(_, g)| g.clone())
        .collect();
    let mut lm = Vec::new();
    for t in 0..seq.len().saturating_sub(1) {
        if seq.roles[t + 1] != Role::Response {
            continue;
        }
        if let Some(g) = &bundle.g_lm[t] {
            let w = bundle.weights[t];
            lm.push(g.iter().map(|x| x / w).collect());
        }
    }
    if emb.is_empty() {
        return Err(Error::Instance {
            id: seq.instance_id.clone(),
            msg: "no non-special tokens".into(),
        });
    }
    if lm.is_empty() {
        return Err(Error::Instance {
            id: seq.instance_id.clone(),
            msg: "no response-target positions".into(),
        });
    }
    Ok((emb, lm))
}

#[derive(Debug, Clone, Default)]
pub struct Aggregator {
    pub reduction: TokenReduction,
    pub model_fingerprint: String,
}

impl Aggregator {
    pub fn new(model_fingerprint: impl Into<String>) -> Self {
        Self {
            reduction: TokenReduction::MeanOfNorms,
            model_fingerprint: model_fingerprint.into(),
        }
    }

    pub fn aggregate(&self, bundle: &GradientBundle, seq: &TokenSequence) -> Result<GradientRecord> {
        let (emb, lm) = token_gradients(bundle, seq)?;
        let g_emb = reduce(&emb, self.reduction);
        let g_lm = reduce(&lm, self.reduction);
        Ok(GradientRecord {
            instance_id: seq.instance_id.clone(),
            g_emb,
            g_lm,
            g_grads: combine(g_emb, g_lm)?,
            n_emb_tokens: emb.len(),
            n_lm_tokens: lm.len(),
            model_fingerprint: self.model_fingerprint.clone(),
            step_index: bundle.step_index,
        })
    }

    pub fn aggregate_all(&self, bundles: &[GradientBundle], seqs: &[TokenSequence]) -> Result<Vec<GradientRecord>> {
        if bundles.len() != seqs.len() {
            return Err(Error::Invalid("bundle count does not match dataset size".into()));
        }
        bundles.iter().zip(seqs).map(|(b, s)| self.aggregate(b, s)).collect()
    }
}

pub fn aggregate_instance(bundle: &GradientBundle, seq: &TokenSequence) -> Result<GradientRecord> {
    Aggregator::default().aggregate(bundle, seq)
}

/// Gradient feature vector used by the similarity baseline: the mean
/// embedding-gradient vector (d) followed by the mean LM-head gradient vector (V).
pub fn gradient_features(bundle: &GradientBundle, seq: &TokenSequence) -> Result<Vec<f64>> {
    let (emb, lm) = token_gradients(bundle, seq)?;
    let mut out = mean_vector(&emb);
    out.extend(mean_vector(&lm));
    Ok(out)
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn records_to_jsonl(records: &[GradientRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(
            out,
            "{{\"instance_id\":{},\"g_emb\":{},\"g_lm\":{},\"g_grads\":{},\"n_emb_tokens\":{},\"n_lm_tokens\":{},\"model_fingerprint\":{},\"step_index\":{}}}",
            serde_json::to_string(&r.instance_id).expect("string serializes"),
            fmt_f64(r.g_emb),
            fmt_f64(r.g_lm),
            fmt_f64(r.g_grads),
            r.n_emb_tokens,
            r.n_lm_tokens,
            serde_json::to_string(&r.model_fingerprint).expect("string serializes"),
            r.step_index,
        );
    }
    out
}

pub fn parse_records(text: &str) -> Result<Vec<GradientRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: GradientRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(path: impl AsRef<Path>, records: &[GradientRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, records_to_jsonl(records)).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<GradientRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text)
}

/// Returns one warning per record whose fingerprint differs from `expected`.
/// Mismatches never block selection: records are meant to transfer.
pub fn fingerprint_warnings(records: &[GradientRecord], expected: &str) -> Vec<String> {
    let warnings: Vec<String> = records
        .iter()
        .filter(|r| r.model_fingerprint != expected)
        .map(|r| {
            format!(
                "record {} was extracted with model {} (expected {expected})",
                r.instance_id, r.model_fingerprint
            )
        })
        .collect();
    if !warnings.is_empty() {
        log::warn!("{} of {} gradient records come from a different model", warnings.len(), records.len());
    }
    warnings
}
