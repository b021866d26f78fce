//! Text-generation metrics (corpus BLEU, ROUGE-L, exact-match METEOR),
//! greedy decoding and the gradient-decile pilot.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, EOS};
use crate::error::{Error, Result};
use crate::gradstats::GradientRecord;
use crate::tinylm::{forward, forward_tokens, Model};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt` (normally `BOS .. SEP`). Stops at EOS,
/// after `max_new` tokens, or at the model's context length. EOS is not
/// included in the output.
pub fn greedy_decode(model: &Model, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && tokens.len() < model.config.max_seq_len {
        let trace = forward_tokens(model, &tokens)?;
        let next = argmax(trace.logits_row(tokens.len() - 1));
        if next == EOS {
            break;
        }
        tokens.push(next);
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub corpus_score: f64,
    pub per_instance: Vec<f64>,
    pub config: BTreeMap<String, f64>,
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// `(clipped matches, candidate n-gram count)` for one order.
pub fn clipped_ngram_matches<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand.iter().map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0))).sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c >= r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

fn sentence_bleu<T: Eq + Hash + Clone>(cand: &[T], reference: &[T], max_order: usize) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_order {
        let (m, t) = clipped_ngram_matches(cand, reference, n);
        let p = if n == 1 {
            if m == 0 {
                return 0.0;
            }
            m as f64 / t as f64
        } else {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    brevity_penalty(cand.len(), reference.len()) * (log_sum / max_order as f64).exp()
}

/// Corpus BLEU with clipped precisions, no smoothing and a corpus-level
/// brevity penalty. Per-instance scores use add-one smoothing above unigrams.
pub fn bleu<T: Eq + Hash + Clone>(candidates: &[Vec<T>], references: &[Vec<T>], max_order: usize) -> Result<MetricReport> {
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidates to score".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_order == 0 {
        return Err(Error::Invalid("max_order must be positive".into()));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Invalid("empty reference".into()));
    }
    let mut matched = vec![0usize; max_order];
    let mut total = vec![0usize; max_order];
    for (c, r) in candidates.iter().zip(references) {
        for n in 1..=max_order {
            let (m, t) = clipped_ngram_matches(c, r, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let c_len: usize = candidates.iter().map(Vec::len).sum();
    let r_len: usize = references.iter().map(Vec::len).sum();
    let corpus = if matched.iter().any(|&m| m == 0) {
        0.0
    } else {
        let log_p: f64 = matched.iter().zip(&total).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum();
        brevity_penalty(c_len, r_len) * (log_p / max_order as f64).exp()
    };
    Ok(MetricReport {
        metric: "bleu".into(),
        corpus_score: corpus,
        per_instance: candidates
            .iter()
            .zip(references)
            .map(|(c, r)| sentence_bleu(c, r, max_order))
            .collect(),
        config: BTreeMap::from([("max_order".to_string(), max_order as f64)]),
    })
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F1.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn rouge_l_report<T: Eq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<MetricReport> {
    per_instance_report("rouge_l", candidates, references, BTreeMap::new(), |c, r| rouge_l(c, r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeteorParams {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for MeteorParams {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            gamma: 0.5,
            beta: 3.0,
        }
    }
}

/// Exact-match alignment: `(matches, chunks)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

const ALIGN_NODE_BUDGET: usize = 200_000;

struct AlignSearch<'a, T> {
    cand: &'a [T],
    positions: Vec<Vec<usize>>,
    budget: Vec<usize>,
    used: Vec<bool>,
    best: usize,
    nodes: usize,
}

impl<T> AlignSearch<'_, T> {
    fn chunk_step(prev: Option<usize>, j: usize) -> usize {
        match prev {
            Some(p) if p + 1 == j => 0,
            _ => 1,
        }
    }

    fn greedy(&mut self, class: &[usize]) -> usize {
        let mut used = vec![false; self.used.len()];
        let mut budget = self.budget.clone();
        let mut prev: Option<usize> = None;
        let mut chunks = 0;
        for &k in class {
            if k == usize::MAX || budget[k] == 0 {
                prev = None;
                continue;
            }
            let opts = &self.positions[k];
            let pick = prev
                .map(|p| p + 1)
                .filter(|j| opts.contains(j) && !used[*j])
                .or_else(|| opts.iter().copied().find(|&j| !used[j]))
                .expect("budget implies a free reference slot");
            chunks += Self::chunk_step(prev, pick);
            used[pick] = true;
            budget[k] -= 1;
            prev = Some(pick);
        }
        chunks
    }

    fn search(&mut self, class: &[usize], i: usize, prev: Option<usize>, chunks: usize, remaining: usize) {
        if chunks >= self.best || self.nodes >= ALIGN_NODE_BUDGET {
            return;
        }
        self.nodes += 1;
        if remaining == 0 {
            self.best = chunks;
            return;
        }
        if i == self.cand.len() {
            return;
        }
        let k = class[i];
        if k == usize::MAX {
            self.search(class, i + 1, None, chunks, remaining);
            return;
        }
        if self.budget[k] > 0 {
            // Continuing the current chunk first finds good bounds early.
            let mut opts = self.positions[k].clone();
            if let Some(p) = prev {
                opts.sort_by_key(|&j| (j != p + 1, j));
            }
            for j in opts {
                if self.used[j] {
                    continue;
                }
                self.used[j] = true;
                self.budget[k] -= 1;
                self.search(class, i + 1, Some(j), chunks + Self::chunk_step(prev, j), remaining - 1);
                self.budget[k] += 1;
                self.used[j] = false;
            }
        }
        // Leave this occurrence unmatched if enough later ones remain.
        let later = class[i + 1..].iter().filter(|&&c| c == k).count();
        if later >= self.budget[k] {
            self.search(class, i + 1, None, chunks, remaining);
        }
    }
}

/// Maximum number of exact unigram matches, then the fewest chunks among
/// such alignments. Exhaustive branch-and-bound, falling back to the best
/// alignment found (at worst a greedy one) on very long inputs.
pub fn align<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Alignment {
    let mut classes: HashMap<&T, usize> = HashMap::new();
    let mut positions: Vec<Vec<usize>> = Vec::new();
    for (j, t) in reference.iter().enumerate() {
        let k = *classes.entry(t).or_insert_with(|| {
            positions.push(Vec::new());
            positions.len() - 1
        });
        positions[k].push(j);
    }
    let class: Vec<usize> = candidate.iter().map(|t| classes.get(t).copied().unwrap_or(usize::MAX)).collect();
    let mut cand_counts = vec![0usize; positions.len()];
    for &k in class.iter().filter(|&&k| k != usize::MAX) {
        cand_counts[k] += 1;
    }
    let budget: Vec<usize> = positions.iter().zip(&cand_counts).map(|(p, &c)| p.len().min(c)).collect();
    let matches: usize = budget.iter().sum();
    if matches == 0 {
        return Alignment { matches: 0, chunks: 0 };
    }
    let mut s = AlignSearch {
        cand: candidate,
        positions,
        budget,
        used: vec![false; reference.len()],
        best: usize::MAX,
        nodes: 0,
    };
    s.best = s.greedy(&class);
    s.search(&class, 0, None, 0, matches);
    Alignment { matches, chunks: s.best }
}

pub fn meteor_lite_with<T: Eq + Hash>(candidate: &[T], reference: &[T], p: &MeteorParams) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let a = align(candidate, reference);
    if a.matches == 0 {
        return 0.0;
    }
    let m = a.matches as f64;
    let prec = m / candidate.len() as f64;
    let rec = m / reference.len() as f64;
    let f_mean = prec * rec / (p.alpha * prec + (1.0 - p.alpha) * rec);
    let penalty = p.gamma * (a.chunks as f64 / m).powf(p.beta);
    f_mean * (1.0 - penalty)
}

pub fn meteor_lite<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> f64 {
    meteor_lite_with(candidate, reference, &MeteorParams::default())
}

pub fn meteor_report<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], params: &MeteorParams) -> Result<MetricReport> {
    let config = BTreeMap::from([
        ("alpha".to_string(), params.alpha),
        ("gamma".to_string(), params.gamma),
        ("beta".to_string(), params.beta),
    ]);
    per_instance_report("meteor_lite", candidates, references, config, |c, r| meteor_lite_with(c, r, params))
}

fn per_instance_report<T, F>(
    name: &str,
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    config: BTreeMap<String, f64>,
    score: F,
) -> Result<MetricReport>
where
    F: Fn(&[T], &[T]) -> f64,
{
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidates to score".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Invalid("empty reference".into()));
    }
    let per: Vec<f64> = candidates.iter().zip(references).map(|(c, r)| score(c, r)).collect();
    Ok(MetricReport {
        metric: name.into(),
        corpus_score: per.iter().sum::<f64>() / per.len() as f64,
        per_instance: per,
        config,
    })
}

/// Decoded-text metrics for one model on one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationScores {
    pub bleu: MetricReport,
    pub rouge_l: MetricReport,
    pub meteor: MetricReport,
}

/// Greedy-decodes every context and scores the output against the gold
/// response tokens.
pub fn evaluate_generation(model: &Model, seqs: &[TokenSequence]) -> Result<GenerationScores> {
    let mut cands = Vec::with_capacity(seqs.len());
    let mut refs = Vec::with_capacity(seqs.len());
    for s in seqs {
        let ctx = s.context();
        let budget = model.config.max_seq_len.saturating_sub(ctx.len());
        cands.push(greedy_decode(model, ctx, budget)?);
        refs.push(s.response_tokens());
    }
    Ok(GenerationScores {
        bleu: bleu(&cands, &refs, 4)?,
        rouge_l: rouge_l_report(&cands, &refs)?,
        meteor: meteor_report(&cands, &refs, &MeteorParams::default())?,
    })
}

/// Mean response loss and teacher-forced argmax accuracy of one sequence.
pub fn response_loss_and_accuracy(model: &Model, seq: &TokenSequence) -> Result<(f64, f64)> {
    let trace = forward(model, seq)?;
    let mask = seq.loss_mask(model.config.loss_on_eos);
    let (mut loss, mut hits, mut n) = (0.0, 0usize, 0usize);
    for t in 0..seq.len().saturating_sub(1) {
        if mask[t] {
            let target = seq.tokens[t + 1];
            loss -= trace.probs_row(t)[target].ln();
            hits += (argmax(trace.logits_row(t)) == target) as usize;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyResponse);
    }
    Ok((loss / n as f64, hits as f64 / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileRow {
    /// 1 holds the largest gradients.
    pub decile: usize,
    pub mean_loss: f64,
    pub token_acc: f64,
    pub count: usize,
    pub mean_g_grads: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileReport {
    pub rows: Vec<DecileRow>,
}

pub const DECILE_CSV_HEADER: &str = "decile,mean_loss,token_acc,count";

impl DecileReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(DECILE_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{:.8},{:.8},{}\n", r.decile, r.mean_loss, r.token_acc, r.count));
        }
        out
    }

    /// Spearman correlation between decile number and mean loss.
    pub fn loss_trend(&self) -> f64 {
        let idx: Vec<f64> = self.rows.iter().map(|r| r.decile as f64).collect();
        let loss: Vec<f64> = self.rows.iter().map(|r| r.mean_loss).collect();
        spearman(&idx, &loss)
    }
}

/// Sizes of ten near-equal slices; the first `n % 10` get one extra.
pub fn decile_sizes(n: usize) -> Result<Vec<usize>> {
    if n < 10 {
        return Err(Error::Invalid(format!("need at least 10 instances for deciles, got {n}")));
    }
    Ok((0..10).map(|i| n / 10 + usize::from(i < n % 10)).collect())
}

/// Ranks with ties averaged, starting at 1.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Sorts instances by `g_grads` (largest first, ties by dataset order),
/// slices them into ten deciles and measures the base model on each.
pub fn pilot_deciles(records: &[GradientRecord], seqs: &[TokenSequence], base: &Model) -> Result<DecileReport> {
    let sizes = decile_sizes(seqs.len())?;
    let by_id: HashMap<&str, f64> = records.iter().map(|r| (r.instance_id.as_str(), r.g_grads)).collect();
    let g: Vec<f64> = seqs
        .iter()
        .map(|s| {
            by_id
                .get(s.instance_id.as_str())
                .copied()
                .ok_or_else(|| Error::Record {
                    id: s.instance_id.clone(),
                    msg: "no gradient record for instance".into(),
                })
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by(|&a, &b| g[b].total_cmp(&g[a]).then(a.cmp(&b)));
    let mut rows = Vec::with_capacity(10);
    let mut start = 0;
    for (d, &size) in sizes.iter().enumerate() {
        let slice = &order[start..start + size];
        start += size;
        let (mut loss, mut acc, mut gsum) = (0.0, 0.0, 0.0);
        for &i in slice {
            let (l, a) = response_loss_and_accuracy(base, &seqs[i])?;
            loss += l;
            acc += a;
            gsum += g[i];
        }
        let k = size as f64;
        rows.push(DecileRow {
            decile: d + 1,
            mean_loss: loss / k,
            token_acc: acc / k,
            count: size,
            mean_g_grads: gsum / k,
        });
    }
    Ok(DecileReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_short_candidate() {
        let r = bleu(&[w("a b c d")], &[w("a b c d e")], 4).unwrap();
        assert!((r.corpus_score - (-0.25f64).exp()).abs() < 1e-12);
        assert!((r.corpus_score - 0.7788).abs() < 1e-4);
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let c = vec![w("x y z w v"), w("p q r s")];
        assert!((bleu(&c, &c, 4).unwrap().corpus_score - 1.0).abs() < 1e-15);
        let r = bleu(&[w("a b")], &[w("c d")], 4).unwrap();
        assert_eq!(r.corpus_score, 0.0);
        assert_eq!(r.per_instance, vec![0.0]);
        assert!(bleu::<&str>(&[], &[], 4).is_err());
        assert!(bleu(&[w("a")], &[w("a"), w("b")], 4).is_err());
    }

    #[test]
    fn bleu_clipping() {
        assert_eq!(clipped_ngram_matches(&w("the the the"), &w("the cat"), 1), (1, 3));
        assert_eq!(clipped_ngram_matches(&w("a"), &w("a b"), 2), (0, 0));
    }

    #[test]
    fn bleu_order_invariant() {
        let c = vec![w("a b c d"), w("e f g h i"), w("a a b")];
        let r = vec![w("a b c d x"), w("e f g h"), w("a b b")];
        let s1 = bleu(&c, &r, 4).unwrap().corpus_score;
        let rc: Vec<_> = c.iter().rev().cloned().collect();
        let rr: Vec<_> = r.iter().rev().cloned().collect();
        assert_eq!(s1, bleu(&rc, &rr, 4).unwrap().corpus_score);
    }

    #[test]
    fn rouge_cases() {
        assert!((rouge_l(&w("the cat sat"), &w("the cat ran")) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&w("a b"), &w("a b")), 1.0);
        assert_eq!(rouge_l(&w("a b"), &w("c d")), 0.0);
        assert_eq!(rouge_l(&w(""), &w("c d")), 0.0);
    }

    #[test]
    fn meteor_identity() {
        let s = meteor_lite(&w("a b c"), &w("a b c"));
        assert!((s - (1.0 - 0.5 / 27.0)).abs() < 1e-12);
        assert!((s - 0.98148).abs() < 1e-5);
        assert_eq!(meteor_lite(&w("a b"), &w("c d")), 0.0);
    }

    #[test]
    fn meteor_chunks_lower_score() {
        let one = meteor_lite(&w("a b x"), &w("a b y"));
        let two = meteor_lite(&w("b a x"), &w("a b y"));
        assert!(two < one);
        assert_eq!(align(&w("b a x"), &w("a b y")), Alignment { matches: 2, chunks: 2 });
    }

    #[test]
    fn alignment_prefers_fewer_chunks() {
        // Greedy left-to-right matching of the first "a" would split the run.
        let a = align(&w("a b c"), &w("a x a b c"));
        assert_eq!(a, Alignment { matches: 3, chunks: 1 });
        let b = align(&w("a a b"), &w("a b a"));
        assert_eq!(b.matches, 3);
        assert_eq!(b.chunks, 2);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert_eq!(spearman(&[1.0, 2.0], &[4.0, 4.0]), 0.0);
    }

    #[test]
    fn decile_size_rule() {
        assert_eq!(decile_sizes(100).unwrap(), vec![10; 10]);
        assert_eq!(decile_sizes(103).unwrap(), vec![11, 11, 11, 10, 10, 10, 10, 10, 10, 10]);
        assert!(decile_sizes(9).is_err());
    }

    #[test]
    fn csv_header() {
        let r = DecileReport {
            rows: vec![DecileRow {
                decile: 1,
                mean_loss: 1.5,
                token_acc: 0.25,
                count: 3,
                mean_g_grads: 0.0,
            }],
        };
        assert_eq!(r.to_csv(), "decile,mean_loss,token_acc,count\n1,1.50000000,0.25000000,3\n");
    }
}
