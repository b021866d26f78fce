//! Comparison selectors: random, BM25, DSIR, RDS, perplexity density and a
//! LESS-style gradient-similarity selector. All return a [`SelectionResult`]
//! with the standard subset size.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, TokenSequence};
use crate::error::{Error, Result};
use crate::gradstats::gradient_features;
use crate::rng::{SplitMix64, Stream};
use crate::selector::{rank_descending, result_from_ranked, select_by_density, subset_size, SelectionResult};
use crate::tinylm::{extract_frozen, forward, perplexity, Model};

/// Held-out examples the similarity baselines rank candidates against.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub instances: Vec<Instance>,
}

impl QuerySet {
    pub fn new(instances: Vec<Instance>, candidates: &[Instance]) -> Result<Self> {
        let ids: HashSet<&str> = candidates.iter().map(|c| c.id.as_str()).collect();
        if let Some(q) = instances.iter().find(|q| ids.contains(q.id.as_str())) {
            return Err(Error::Invalid(format!("query {} is also a candidate", q.id)));
        }
        if instances.is_empty() {
            return Err(Error::Invalid("query set is empty".into()));
        }
        Ok(Self { instances })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Representation,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub instance_id: String,
    pub values: Vec<f64>,
    pub kind: FeatureKind,
}

#[derive(Serialize, Deserialize)]
struct FeatureLine {
    instance_id: String,
    kind: FeatureKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    values: Option<Vec<f64>>,
    /// Little-endian f64 bytes, base64 encoded.
    #[serde(skip_serializing_if = "Option::is_none")]
    values_b64: Option<String>,
}

pub fn write_features(path: impl AsRef<Path>, feats: &[FeatureVector], base64_payload: bool) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for f in feats {
        let line = if base64_payload {
            let bytes: Vec<u8> = f.values.iter().flat_map(|v| v.to_le_bytes()).collect();
            FeatureLine {
                instance_id: f.instance_id.clone(),
                kind: f.kind,
                values: None,
                values_b64: Some(base64::engine::general_purpose::STANDARD.encode(bytes)),
            }
        } else {
            FeatureLine {
                instance_id: f.instance_id.clone(),
                kind: f.kind,
                values: Some(f.values.clone()),
                values_b64: None,
            }
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<FeatureVector>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
        let raw: FeatureLine = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let values = match (raw.values, raw.values_b64) {
            (Some(v), None) => v,
            (None, Some(b)) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(b)
                    .map_err(|e| parse_err(e.to_string()))?;
                if bytes.len() % 8 != 0 {
                    return Err(parse_err("payload is not a whole number of f64 values".into()));
                }
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect()
            }
            _ => return Err(parse_err("exactly one of values / values_b64 is required".into())),
        };
        out.push(FeatureVector {
            instance_id: raw.instance_id,
            values,
            kind: raw.kind,
        });
    }
    Ok(out)
}

/// Uniform sample without replacement.
pub fn select_random(ids: &[String], percent: f64, seed: u64) -> Result<SelectionResult> {
    if ids.is_empty() {
        return Err(Error::Invalid("no candidates".into()));
    }
    let size = subset_size(ids.len(), percent)?;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    SplitMix64::substream(seed, Stream::RandomSelect).shuffle(&mut order);
    order.truncate(size);
    let scores = vec![0.0; ids.len()];
    let mut res = result_from_ranked("random", percent, ids, &order, &scores, None);
    res.seed = Some(seed);
    Ok(res)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryAggregate {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    pub aggregate: QueryAggregate,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: 1.2,
            b: 0.75,
            aggregate: QueryAggregate::Mean,
        }
    }
}

/// `ln(1 + (M - df + 0.5) / (df + 0.5))`.
pub fn bm25_idf(n_docs: usize, df: usize) -> f64 {
    (1.0 + (n_docs as f64 - df as f64 + 0.5) / (df as f64 + 0.5)).ln()
}

/// Okapi BM25 of every candidate against every query, aggregated per candidate.
pub fn bm25_scores(candidates: &[Vec<usize>], queries: &[Vec<usize>], params: &Bm25Params) -> Result<Vec<f64>> {
    if candidates.is_empty() || queries.is_empty() {
        return Err(Error::Invalid("bm25 needs candidates and queries".into()));
    }
    if queries.iter().any(|q| q.is_empty()) {
        return Err(Error::Invalid("query without terms".into()));
    }
    let m = candidates.len();
    let avgdl = candidates.iter().map(Vec::len).sum::<usize>() as f64 / m as f64;
    let mut df: HashMap<usize, usize> = HashMap::new();
    let tfs: Vec<HashMap<usize, usize>> = candidates
        .iter()
        .map(|doc| {
            let mut tf = HashMap::new();
            for &t in doc {
                *tf.entry(t).or_insert(0) += 1;
            }
            for &t in tf.keys() {
                *df.entry(t).or_insert(0) += 1;
            }
            tf
        })
        .collect();
    let query_terms: Vec<Vec<usize>> = queries
        .iter()
        .map(|q| {
            let mut terms: Vec<usize> = q.iter().copied().collect::<HashSet<_>>().into_iter().collect();
            terms.sort_unstable();
            terms
        })
        .collect();
    let scores = candidates
        .iter()
        .zip(&tfs)
        .map(|(doc, tf)| {
            let norm = if avgdl > 0.0 {
                params.k1 * (1.0 - params.b + params.b * doc.len() as f64 / avgdl)
            } else {
                params.k1
            };
            let per_query = query_terms.iter().map(|terms| {
                terms
                    .iter()
                    .filter_map(|t| tf.get(t).map(|&f| (t, f as f64)))
                    .map(|(t, f)| bm25_idf(m, df[t]) * f * (params.k1 + 1.0) / (f + norm))
                    .sum::<f64>()
            });
            match params.aggregate {
                QueryAggregate::Mean => per_query.sum::<f64>() / query_terms.len() as f64,
                QueryAggregate::Max => per_query.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Ok(scores)
}

pub fn bm25_select(
    ids: &[String],
    candidates: &[Vec<usize>],
    queries: &[Vec<usize>],
    percent: f64,
    params: &Bm25Params,
) -> Result<SelectionResult> {
    let scores = bm25_scores(candidates, queries, params)?;
    let ranked = rank_descending(&scores, subset_size(ids.len(), percent)?);
    Ok(result_from_ranked("bm25", percent, ids, &ranked, &scores, None))
}

pub const DSIR_BUCKETS: usize = 4096;

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed unigram and bigram features of a token list.
pub fn hashed_ngram_features(doc: &[usize], buckets: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(doc.len() * 2);
    for &t in doc {
        let bytes = std::iter::once(1u8).chain((t as u64).to_le_bytes());
        out.push((fnv1a(bytes) % buckets as u64) as usize);
    }
    for w in doc.windows(2) {
        let bytes = std::iter::once(2u8)
            .chain((w[0] as u64).to_le_bytes())
            .chain((w[1] as u64).to_le_bytes());
        out.push((fnv1a(bytes) % buckets as u64) as usize);
    }
    out
}

/// Bag-of-features distribution over a fixed number of buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    log_probs: Vec<f64>,
}

impl NgramModel {
    /// Add-one smoothed estimate from feature lists.
    pub fn fit(docs: &[Vec<usize>], buckets: usize) -> Self {
        let mut counts = vec![1.0; buckets];
        for doc in docs {
            for &f in doc {
                counts[f] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        Self {
            log_probs: counts.iter().map(|c| (c / total).ln()).collect(),
        }
    }

    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Invalid("probabilities must be positive".into()));
        }
        Ok(Self {
            log_probs: probs.iter().map(|p| p.ln()).collect(),
        })
    }

    pub fn log_prob(&self, feature: usize) -> f64 {
        self.log_probs[feature]
    }
}

/// `sum_f ln p(f) - ln q(f)` over the features of one instance.
pub fn importance_log_weight(features: &[usize], target: &NgramModel, raw: &NgramModel) -> f64 {
    features.iter().map(|&f| target.log_prob(f) - raw.log_prob(f)).sum()
}

pub fn dsir_log_weights(candidates: &[Vec<usize>], target: &[Vec<usize>], buckets: usize) -> Vec<f64> {
    let cand_feats: Vec<Vec<usize>> = candidates.iter().map(|d| hashed_ngram_features(d, buckets)).collect();
    let target_feats: Vec<Vec<usize>> = target.iter().map(|d| hashed_ngram_features(d, buckets)).collect();
    let p = NgramModel::fit(&target_feats, buckets);
    let q = NgramModel::fit(&cand_feats, buckets);
    cand_feats.iter().map(|f| importance_log_weight(f, &p, &q)).collect()
}

/// Sampling without replacement proportional to `exp(log_w)`: perturb with
/// Gumbel noise and keep the top `size`, in rank order.
pub fn gumbel_top_k(log_w: &[f64], size: usize, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix64::substream(seed, Stream::Gumbel);
    let keys: Vec<f64> = log_w.iter().map(|w| w + rng.next_gumbel()).collect();
    rank_descending(&keys, size)
}

pub fn dsir_select(
    ids: &[String],
    candidates: &[Vec<usize>],
    target: &[Vec<usize>],
    percent: f64,
    seed: u64,
) -> Result<SelectionResult> {
    if candidates.is_empty() || target.is_empty() {
        return Err(Error::Invalid("dsir needs candidates and target examples".into()));
    }
    let log_w = dsir_log_weights(candidates, target, DSIR_BUCKETS);
    let ranked = gumbel_top_k(&log_w, subset_size(ids.len(), percent)?, seed);
    let mut res = result_from_ranked("dsir", percent, ids, &ranked, &log_w, None);
    res.seed = Some(seed);
    Ok(res)
}

/// Cosine similarity; `-1` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        -1.0
    } else {
        dot / (na * nb)
    }
}

fn check_lengths(cands: &[FeatureVector], queries: &[FeatureVector]) -> Result<usize> {
    let dim = queries
        .first()
        .or(cands.first())
        .map(|f| f.values.len())
        .ok_or_else(|| Error::Invalid("no feature vectors".into()))?;
    if queries.is_empty() || cands.is_empty() {
        return Err(Error::Invalid("need candidate and query features".into()));
    }
    if let Some(bad) = cands.iter().chain(queries).find(|f| f.values.len() != dim) {
        return Err(Error::Invalid(format!(
            "feature length {} of {} does not match {dim}",
            bad.values.len(),
            bad.instance_id
        )));
    }
    Ok(dim)
}

fn ids_of(feats: &[FeatureVector]) -> Vec<String> {
    feats.iter().map(|f| f.instance_id.clone()).collect()
}

pub fn rds_scores(cands: &[FeatureVector], queries: &[FeatureVector]) -> Result<Vec<f64>> {
    check_lengths(cands, queries)?;
    Ok(cands
        .iter()
        .map(|c| queries.iter().map(|q| cosine(&c.values, &q.values)).sum::<f64>() / queries.len() as f64)
        .collect())
}

/// Mean cosine similarity of final-position hidden states to the queries.
pub fn rds_select(cands: &[FeatureVector], queries: &[FeatureVector], percent: f64) -> Result<SelectionResult> {
    let scores = rds_scores(cands, queries)?;
    let ids = ids_of(cands);
    let ranked = rank_descending(&scores, subset_size(ids.len(), percent)?);
    Ok(result_from_ranked("rds", percent, &ids, &ranked, &scores, None))
}

/// Density Top-N% over perplexities.
pub fn ppl_select(ids: &[String], perplexities: &[f64], percent: f64) -> Result<SelectionResult> {
    if let Some((i, p)) = perplexities.iter().enumerate().find(|(_, p)| !(**p > 0.0) || !p.is_finite()) {
        return Err(Error::Invalid(format!("perplexity of {} must be positive, got {p}", ids[i])));
    }
    select_by_density("ppl", ids, perplexities, percent, None)
}

/// Random sign projection `R in {+-1/sqrt(k)}^{dim_in x k}`; identity when
/// `k == dim_in`.
#[derive(Debug, Clone)]
pub struct SignProjection {
    dim_in: usize,
    dim_out: usize,
    signs: Option<Vec<f64>>,
}

impl SignProjection {
    pub fn new(dim_in: usize, dim_out: usize, seed: u64) -> Result<Self> {
        if dim_out == 0 || dim_in == 0 {
            return Err(Error::Invalid("projection dimensions must be positive".into()));
        }
        if dim_out == dim_in {
            return Ok(Self { dim_in, dim_out, signs: None });
        }
        let mut rng = SplitMix64::substream(seed, Stream::Projection);
        let s = 1.0 / (dim_out as f64).sqrt();
        let signs = (0..dim_in * dim_out)
            .map(|_| if rng.next_u64() >> 63 == 1 { s } else { -s })
            .collect();
        Ok(Self {
            dim_in,
            dim_out,
            signs: Some(signs),
        })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match &self.signs {
            None => x.to_vec(),
            Some(r) => {
                let mut out = vec![0.0; self.dim_out];
                for (i, &xi) in x.iter().enumerate().take(self.dim_in) {
                    let row = &r[i * self.dim_out..(i + 1) * self.dim_out];
                    for (o, s) in out.iter_mut().zip(row) {
                        *o += xi * s;
                    }
                }
                out
            }
        }
    }
}

pub fn less_scores(cands: &[FeatureVector], queries: &[FeatureVector], projection_dim: usize, seed: u64) -> Result<Vec<f64>> {
    let dim = check_lengths(cands, queries)?;
    if projection_dim > dim {
        return Err(Error::Invalid(format!("projection_dim {projection_dim} exceeds feature length {dim}")));
    }
    let proj = SignProjection::new(dim, projection_dim, seed)?;
    let qs: Vec<Vec<f64>> = queries.iter().map(|q| proj.apply(&q.values)).collect();
    Ok(cands
        .iter()
        .map(|c| {
            let pc = proj.apply(&c.values);
            qs.iter().map(|q| cosine(&pc, q)).fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Max cosine similarity of projected gradient features to the queries.
pub fn less_select(
    cands: &[FeatureVector],
    queries: &[FeatureVector],
    percent: f64,
    projection_dim: usize,
    seed: u64,
) -> Result<SelectionResult> {
    let scores = less_scores(cands, queries, projection_dim, seed)?;
    let ids = ids_of(cands);
    let ranked = rank_descending(&scores, subset_size(ids.len(), percent)?);
    let mut res = result_from_ranked("less", percent, &ids, &ranked, &scores, None);
    res.seed = Some(seed);
    Ok(res)
}

/// Final hidden state at the last non-padding position of each sequence.
pub fn representation_features(model: &Model, seqs: &[TokenSequence]) -> Result<Vec<FeatureVector>> {
    seqs.iter()
        .map(|s| {
            let trace = forward(model, s)?;
            Ok(FeatureVector {
                instance_id: s.instance_id.clone(),
                values: trace.hidden_row(s.last_content_index()).to_vec(),
                kind: FeatureKind::Representation,
            })
        })
        .collect()
}

/// Mean embedding-gradient and mean LM-head gradient vectors, concatenated.
pub fn gradient_feature_vectors(model: &Model, seqs: &[TokenSequence]) -> Result<Vec<FeatureVector>> {
    let bundles = extract_frozen(model, seqs)?;
    bundles
        .iter()
        .zip(seqs)
        .map(|(b, s)| {
            Ok(FeatureVector {
                instance_id: s.instance_id.clone(),
                values: gradient_features(b, s)?,
                kind: FeatureKind::Gradient,
            })
        })
        .collect()
}

pub fn perplexities(model: &Model, seqs: &[TokenSequence]) -> Result<Vec<f64>> {
    seqs.iter().map(|s| perplexity(model, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn fv(id: &str, v: &[f64], kind: FeatureKind) -> FeatureVector {
        FeatureVector {
            instance_id: id.into(),
            values: v.to_vec(),
            kind,
        }
    }

    #[test]
    fn random_full_fraction_and_determinism() {
        let all = select_random(&ids(7), 100.0, 3).unwrap();
        assert_eq!(all.indices(), (0..7).collect::<Vec<_>>());
        let a = select_random(&ids(50), 30.0, 42).unwrap();
        let b = select_random(&ids(50), 30.0, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
        assert_ne!(a.indices(), select_random(&ids(50), 30.0, 43).unwrap().indices());
    }

    #[test]
    fn bm25_single_document_idf() {
        assert!((bm25_idf(1, 1) - (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((bm25_idf(1, 1) - 0.287_68).abs() < 1e-5);
        let s = bm25_scores(&[vec![7, 8]], &[vec![7]], &Bm25Params::default()).unwrap();
        // tf=1, |d| = avgdl: idf * (k1+1) / (1 + k1).
        assert!((s[0] - bm25_idf(1, 1)).abs() < 1e-15);
    }

    #[test]
    fn bm25_disjoint_query_scores_zero() {
        let s = bm25_scores(&[vec![1, 2], vec![3, 4]], &[vec![3]], &Bm25Params::default()).unwrap();
        assert_eq!(s[0], 0.0);
        assert!(s[1] > 0.0);
        assert!(bm25_scores(&[vec![1]], &[vec![]], &Bm25Params::default()).is_err());
    }

    #[test]
    fn bm25_duplicate_documents_score_identically() {
        let docs = vec![vec![1, 2, 3], vec![2, 5], vec![1, 2, 3]];
        let s = bm25_scores(&docs, &[vec![1, 5], vec![3]], &Bm25Params::default()).unwrap();
        assert_eq!(s[0], s[2]);
        let single = bm25_scores(&docs[..2], &[vec![1, 5], vec![3]], &Bm25Params::default()).unwrap();
        assert_ne!(single[0], s[0]);
    }

    #[test]
    fn bm25_max_aggregation() {
        let p = Bm25Params {
            aggregate: QueryAggregate::Max,
            ..Bm25Params::default()
        };
        let docs = vec![vec![1, 2], vec![3, 4]];
        let mean = bm25_scores(&docs, &[vec![1], vec![3]], &Bm25Params::default()).unwrap();
        let max = bm25_scores(&docs, &[vec![1], vec![3]], &p).unwrap();
        assert!((max[0] - 2.0 * mean[0]).abs() < 1e-12);
    }

    #[test]
    fn dsir_exact_two_token_weight() {
        let p = NgramModel::from_probs(&[0.8, 0.2]).unwrap();
        let q = NgramModel::from_probs(&[0.5, 0.5]).unwrap();
        let w = importance_log_weight(&[0, 0, 1], &p, &q).exp();
        assert!((w - 1.024).abs() < 1e-12);
    }

    #[test]
    fn dsir_identical_distributions_give_zero_weights() {
        let docs = vec![vec![5, 6, 7], vec![6, 8]];
        let w = dsir_log_weights(&docs, &docs, DSIR_BUCKETS);
        assert!(w.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn dsir_is_deterministic() {
        let docs: Vec<Vec<usize>> = (0..30).map(|i| vec![i % 7, i % 5, 9]).collect();
        let a = dsir_select(&ids(30), &docs, &[vec![1, 2]], 40.0, 42).unwrap();
        let b = dsir_select(&ids(30), &docs, &[vec![1, 2]], 40.0, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), -1.0);
    }

    #[test]
    fn rds_ranks_self_similar_first_and_is_scale_invariant() {
        let q = vec![fv("q", &[1.0, 2.0, 0.5], FeatureKind::Representation)];
        let cands = vec![
            fv("a", &[0.0, 0.0, 1.0], FeatureKind::Representation),
            fv("b", &[1.0, 2.0, 0.5], FeatureKind::Representation),
            fv("c", &[-1.0, 0.3, 0.0], FeatureKind::Representation),
        ];
        let scores = rds_scores(&cands, &q).unwrap();
        assert!((scores[1] - 1.0).abs() < 1e-12);
        let sel = rds_select(&cands, &q, 34.0).unwrap();
        assert_eq!(sel.ids(), vec!["b"]);
        let mut scaled = cands.clone();
        scaled[0].values.iter_mut().for_each(|x| *x *= 5.0);
        let s2 = rds_scores(&scaled, &q).unwrap();
        assert!((s2[0] - scores[0]).abs() < 1e-12);
        let bad = vec![fv("x", &[1.0], FeatureKind::Representation)];
        assert!(rds_scores(&bad, &q).is_err());
    }

    #[test]
    fn ppl_rejects_nonpositive() {
        assert!(ppl_select(&ids(3), &[1.0, 0.0, 2.0], 50.0).is_err());
        let all = ppl_select(&ids(3), &[1.0, 1.5, 2.0], 100.0).unwrap();
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn less_without_projection_is_exact_cosine() {
        let q = vec![fv("q", &[1.0, 0.0, 2.0, -1.0], FeatureKind::Gradient)];
        let cands = vec![
            fv("a", &[0.5, 1.0, 0.0, 0.0], FeatureKind::Gradient),
            fv("b", &[1.0, 0.0, 2.0, -1.0], FeatureKind::Gradient),
        ];
        let s = less_scores(&cands, &q, 4, 42).unwrap();
        assert!((s[0] - cosine(&cands[0].values, &q[0].values)).abs() < 1e-15);
        assert!((s[1] - 1.0).abs() < 1e-12);
        assert!(less_scores(&cands, &q, 5, 42).is_err());
        let a = less_select(&cands, &q, 50.0, 3, 7).unwrap();
        assert_eq!(a, less_select(&cands, &q, 50.0, 3, 7).unwrap());
    }

    #[test]
    fn query_set_must_be_disjoint() {
        let inst = |id: &str| Instance {
            id: id.into(),
            prompt: "p".into(),
            response: "r".into(),
            stratum: None,
        };
        assert!(QuerySet::new(vec![inst("a")], &[inst("a"), inst("b")]).is_err());
        assert!(QuerySet::new(vec![inst("q")], &[inst("a")]).is_ok());
    }

    #[test]
    fn feature_files_round_trip_in_both_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let feats = vec![
            fv("a", &[0.1, -2.5e-300, 3.0], FeatureKind::Gradient),
            fv("b", &[1.0 / 3.0, 0.0, f64::MAX], FeatureKind::Representation),
        ];
        for b64 in [false, true] {
            let path = dir.path().join(format!("f{b64}.jsonl"));
            write_features(&path, &feats, b64).unwrap();
            assert_eq!(read_features(&path).unwrap(), feats);
        }
    }
}
